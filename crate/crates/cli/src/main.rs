//! `rad`: training runs, dominance reports, matchups and the invariant suite.
//!
//! Exit codes: 0 success, 1 failing invariant check, 2 bad input, 3 numerical
//! failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use rad_core::checks::{run_checks, CheckHooks};
use rad_core::evaluation::{
    paired_outcomes, safety_breakdown_csv_row, SAFETY_BREAKDOWN_HEADER, SAFE_THRESHOLD,
};
use rad_core::format::round_sig;
use rad_core::spectra::normal_cdf;
use rad_core::trainer::{run, HISTORY_HEADER};
use rad_core::{
    dominance_report, history_csv, matchup, safety_breakdown, CostSamples, PolicyState, RadError,
    RunContext, Spectrum, ToyEnv, TrainerState,
};
use serde_json::Value;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "rad",
    version,
    about = "Dominance-constrained policy optimization on a toy bandit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config; writes run_config.json, history.csv and
    /// final_state.json into the configured output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare two cost-sample files and print the dominance report.
    Dominance {
        #[arg(long)]
        x: PathBuf,
        #[arg(long)]
        y: PathBuf,
        #[arg(long)]
        spectrum: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        normalize: bool,
    },
    /// Compare two trained policies on common prompts.
    Matchup {
        #[arg(long)]
        env: PathBuf,
        #[arg(long)]
        blue: PathBuf,
        #[arg(long)]
        red: PathBuf,
        /// Comma-separated spectrum tokens.
        #[arg(long, default_value = "mean,var,cvar,linear,exponential,power,wang")]
        spectra: String,
        #[arg(long, default_value_t = 1024)]
        prompts: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the win rate split by safety-outcome pair to this CSV.
        #[arg(long)]
        breakdown: Option<PathBuf>,
    },
    /// Run the built-in invariant suite.
    Check {
        /// Test hook: perturb the normal CDF seen by the suite.
        #[arg(long, hide = true)]
        corrupt_normal_cdf: bool,
    },
}

enum Failure {
    Checks,
    Input(anyhow::Error),
    Numerical(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<RadError>() {
            Some(r) if r.is_numerical() => Failure::Numerical(e),
            _ => Failure::Input(e),
        }
    }
}

impl From<RadError> for Failure {
    fn from(e: RadError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Dominance {
            x,
            y,
            spectrum,
            n,
            normalize,
        } => cmd_dominance(&x, &y, &spectrum, n, normalize),
        Command::Matchup {
            env,
            blue,
            red,
            spectra,
            prompts,
            n,
            seed,
            breakdown,
        } => cmd_matchup(
            &env,
            &blue,
            &red,
            &spectra,
            prompts,
            n,
            seed,
            breakdown.as_deref(),
        ),
        Command::Check { corrupt_normal_cdf } => cmd_check(corrupt_normal_cdf),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            eprintln!("numerical error: {e:#}");
            ExitCode::from(3)
        }
    }
}

/// Rounds every real in `v` to the emitted precision.
fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => n
            .as_f64()
            .and_then(|f| serde_json::Number::from_f64(round_sig(f)))
            .map_or(Value::Null, Value::Number),
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn print_json(value: Value) -> Result<()> {
    let v = round_json(value);
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(config_path: &Path) -> Result<(), Failure> {
    let cfg = RunConfig::load(config_path)?;
    let ctx = RunContext::new(&cfg.env, &cfg.rad, cfg.mode())?;
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write(&cfg.output_dir, "run_config.json", &cfg.resolved_json())?;
    let mut state = TrainerState::initial(&cfg.env, &cfg.rad);
    let result = run(&cfg.env, &mut state, &cfg.rad, &ctx);
    debug_assert!(history_csv(&[]).starts_with(HISTORY_HEADER));
    write(&cfg.output_dir, "history.csv", &history_csv(&state.history))?;
    write(
        &cfg.output_dir,
        "final_state.json",
        &state.snapshot().to_json(),
    )?;
    result.with_context(|| format!("training stopped after {} steps", state.step))?;
    Ok(())
}

fn cmd_dominance(
    x: &Path,
    y: &Path,
    token: &str,
    n: usize,
    normalize: bool,
) -> Result<(), Failure> {
    let xs = CostSamples::parse(&read(x)?).with_context(|| format!("parsing {}", x.display()))?;
    let ys = CostSamples::parse(&read(y)?).with_context(|| format!("parsing {}", y.display()))?;
    let spec = Spectrum::from_token(token)?;
    let report = dominance_report(&xs, &ys, &spec, n, normalize)?;
    print_json(serde_json::to_value(report).context("serializing report")?)?;
    Ok(())
}

fn load_policy(env: &ToyEnv, path: &Path) -> Result<rad_core::SoftmaxPolicy> {
    let state = PolicyState::from_json(&read(path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    let policy = state.policy()?;
    env.check_policy(&policy)
        .with_context(|| format!("policy in {}", path.display()))?;
    Ok(policy)
}

fn cmd_matchup(
    env_path: &Path,
    blue: &Path,
    red: &Path,
    spectra: &str,
    prompts: usize,
    n: usize,
    seed: u64,
    breakdown: Option<&Path>,
) -> Result<(), Failure> {
    let env = ToyEnv::from_json(&read(env_path)?)
        .with_context(|| format!("parsing {}", env_path.display()))?;
    let blue = load_policy(&env, blue)?;
    let red = load_policy(&env, red)?;
    let spectra: Vec<Spectrum> = spectra
        .split(',')
        .map(|t| Spectrum::from_token(t.trim()))
        .collect::<rad_core::Result<_>>()?;
    if spectra.is_empty() {
        return Err(Failure::Input(anyhow!("no spectra given")));
    }
    let result = matchup(&env, &blue, &red, &spectra, prompts, n, seed)?;
    if let Some(path) = breakdown {
        let outcomes = paired_outcomes(&env, &blue, &red, prompts, seed)?;
        let cells = safety_breakdown(&outcomes, SAFE_THRESHOLD)?;
        let csv = format!(
            "{SAFETY_BREAKDOWN_HEADER}\n{}\n",
            safety_breakdown_csv_row(&cells)
        );
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    print_json(serde_json::to_value(result).context("serializing result")?)?;
    Ok(())
}

fn cmd_check(corrupt_normal_cdf: bool) -> Result<(), Failure> {
    let hooks = if corrupt_normal_cdf {
        CheckHooks {
            normal_cdf: |z| normal_cdf(z) + 1e-6,
        }
    } else {
        CheckHooks::default()
    };
    let outcomes = run_checks(&hooks);
    let mut failed = 0;
    for o in &outcomes {
        if o.passed {
            println!("PASS {}", o.name);
        } else {
            failed += 1;
            println!("FAIL {}: {}", o.name, o.detail);
        }
    }
    println!(
        "{} of {} checks passed",
        outcomes.len() - failed,
        outcomes.len()
    );
    if failed > 0 {
        return Err(Failure::Checks);
    }
    Ok(())
}
