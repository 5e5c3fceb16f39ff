//! Acceptance criteria AC1 through AC9.
//!
//! Every criterion runs in one test so wall-clock budgets are measured
//! without other tests competing for cores. Each criterion prints one
//! `PASS`/`FAIL` line; the test fails at the end if any criterion failed.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rad_core::toyenv::expected_score_gradient;
use rad_core::trainer::batch_particles;
use rad_core::{
    discretize_weights, entropic_value, exact_cdf_gradient, exact_cost_law, exact_expected_cost,
    exact_expected_rtilde, exact_fsd, fsd_loss, make_levels, matchup, particle_gradient, plan_cost,
    rad_score, sample_batch, spectral_risk, train, CostLaw, EmpiricalCostDistribution, Episode,
    Mode, RadConfig, RunContext, SoftmaxPolicy, Spectrum, ToyEnv,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AC1_GAP: f64 = 5e-3;
const AC1_BUDGET: Duration = Duration::from_secs(10);
const AC2_REL: f64 = 1e-4;
/// Coordinates with smaller gradients are compared absolutely at `AC2_REL * AC2_FLOOR`.
const AC2_FLOOR: f64 = 1e-3;
const AC2_CHI: f64 = 0.05;
const AC2_BUDGET: Duration = Duration::from_secs(5);
const AC3_ENUM_TOL: f64 = 1e-12;
const AC3_MC_EPISODES: usize = 100_000;
const AC3_MC_SIGMAS: f64 = 4.0;
const AC3_LAMBDA_TOL: f64 = 1e-10;
const AC3_BUDGET: Duration = Duration::from_secs(30);
const AC4_TOL: f64 = 1e-12;
const AC4_BUDGET: Duration = Duration::from_secs(5);
const AC5_FWD_SLACK: f64 = 0.05;
const AC5_REV_MAX: f64 = 0.1;
const TRAIN_BUDGET: Duration = Duration::from_secs(120);
const AC6_ALPHA: f64 = 0.9;
const AC6_PROMPTS: usize = 1024;
const AC7_SLACK: f64 = 0.05;
const AC8_STEPS: u64 = 300;
const AC9_GRID: usize = 10_000;
const AC9_TOL: f64 = 1e-3;

type Verdict = Result<String, String>;

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/toy_env.json")
}

fn fixture() -> ToyEnv {
    ToyEnv::from_json(&fs::read_to_string(fixture_path()).expect("fixture readable"))
        .expect("fixture parses")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(budget: Duration, start: Instant) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took <= budget, || {
        format!("took {took:.2?}, budget {budget:?}")
    })
}

fn sorted_uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    v.sort_by(f64::total_cmp);
    v
}

fn solve(
    x: &[f64],
    y: &[f64],
    chi: f64,
    tol: f64,
) -> (rad_core::CostMatrix, rad_core::TransportPlan) {
    rad_core::transport::solve_fsd(x, y, chi, tol, 100_000).expect("sinkhorn converges")
}

fn ac1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let chis = [0.1, 0.03, 0.01, 0.003, 0.001];
    let mut worst = 0.0f64;
    for instance in 0..100 {
        let x = sorted_uniform(&mut rng, 64);
        let y = sorted_uniform(&mut rng, 64);
        let exact = exact_fsd(&x, &y).map_err(|e| e.to_string())?;
        let mut last = f64::INFINITY;
        for chi in chis {
            let (c, p) = solve(&x, &y, chi, 1e-9);
            let gap = (plan_cost(&p, &c).unwrap() - exact).abs();
            ensure(gap <= last + 1e-12, || {
                format!("instance {instance}: gap rose to {gap:e} at chi {chi}")
            })?;
            last = gap;
        }
        ensure(last <= AC1_GAP, || {
            format!("instance {instance}: gap {last:e} at chi 0.001")
        })?;
        worst = worst.max(last);
    }
    within(AC1_BUDGET, start)?;
    Ok(format!("max gap at chi 0.001 {worst:.2e}"))
}

fn ac2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let value = |x: &[f64], y: &[f64]| {
        let (c, p) = solve(x, y, AC2_CHI, 1e-14);
        entropic_value(&p, &c, AC2_CHI).unwrap()
    };
    let (mut done, mut worst) = (0, 0.0f64);
    while done < 20 {
        let x = sorted_uniform(&mut rng, 8);
        let y = sorted_uniform(&mut rng, 8);
        if x.iter().any(|a| y.iter().any(|b| (a - b).abs() < 1e-3)) {
            continue;
        }
        done += 1;
        let (_, p) = solve(&x, &y, AC2_CHI, 1e-14);
        let g = particle_gradient(&p, &x, &y).unwrap();
        for i in 0..8 {
            let h = 1e-5;
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (value(&up, &y) - value(&down, &y)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(AC2_FLOOR);
            ensure(rel <= AC2_REL, || {
                format!("instance {done} coordinate {i}: envelope {} vs {fd}", g[i])
            })?;
            worst = worst.max(rel);
        }
    }
    within(AC2_BUDGET, start)?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn enumerated_episode(env: &ToyEnv, policy: &SoftmaxPolicy, x: usize, y: usize) -> Episode {
    Episode {
        context: x,
        action: y,
        reward: env.reward()[x][y],
        cost: env.cost()[x][y],
        logprob_theta: policy.log_prob(x, y).unwrap(),
        logprob_ref: env.reference().log_prob(x, y).unwrap(),
        prompt_group: 0,
    }
}

fn ac3() -> Verdict {
    let start = Instant::now();
    let env = fixture();
    let policy = env.reference();
    let law = exact_cost_law(&env, policy).unwrap();

    // (a) indicator estimator, enumerated, at every atom and between atoms.
    let mut worst_a = 0.0f64;
    let atoms: Vec<f64> = law.atoms().iter().map(|a| a.0).collect();
    let mut thresholds = atoms.clone();
    thresholds.extend(atoms.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    for t in thresholds {
        let est = expected_score_gradient(&env, policy, |x, y| {
            f64::from(u8::from(env.cost()[x][y] <= t))
        })
        .unwrap();
        let exact = exact_cdf_gradient(&env, policy, t).unwrap();
        worst_a = worst_a.max(max_abs_diff(&est, &exact));
    }
    ensure(worst_a <= AC3_ENUM_TOL, || format!("(a) error {worst_a:e}"))?;

    // (b) Monte-Carlo average of the same estimator at the median.
    let t = law.quantile(0.5).unwrap();
    let exact = exact_cdf_gradient(&env, policy, t).unwrap();
    let eps = sample_batch(
        &env,
        policy,
        AC3_MC_EPISODES,
        1,
        false,
        rad_core::rng::StepStreams::new(3, 0),
    )
    .unwrap();
    let (nx, ny) = (env.n_contexts(), env.n_actions());
    let (mut sum, mut sq) = (vec![vec![0.0; ny]; nx], vec![vec![0.0; ny]; nx]);
    for e in &eps {
        let mut one = vec![vec![0.0; ny]; nx];
        let ind = f64::from(u8::from(e.cost <= t));
        policy
            .add_score(&mut one, e.context, e.action, ind)
            .unwrap();
        for (x, row) in one.iter().enumerate() {
            for (y, v) in row.iter().enumerate() {
                sum[x][y] += v;
                sq[x][y] += v * v;
            }
        }
    }
    let n = AC3_MC_EPISODES as f64;
    let mut worst_z = 0.0f64;
    for x in 0..nx {
        for y in 0..ny {
            let mean = sum[x][y] / n;
            let se = ((sq[x][y] / n - mean * mean).max(0.0) / n).sqrt();
            let z = (mean - exact[x][y]).abs() / se.max(1e-300);
            ensure(z <= AC3_MC_SIGMAS, || {
                format!("(b) ({x},{y}) off by {z:.2} standard errors")
            })?;
            worst_z = worst_z.max(z);
        }
    }

    // (c) λ-term of the score on real batch particles and gradients.
    let config = RadConfig {
        spectrum: Spectrum::Linear,
        ..RadConfig::default()
    };
    let ctx = RunContext::new(&env, &config, Mode::Rad).unwrap();
    let batch = sample_batch(
        &env,
        policy,
        config.batch_prompts,
        config.samples_per_prompt,
        true,
        rad_core::rng::StepStreams::new(config.seed, 0),
    )
    .unwrap();
    let (theta, g) = batch_particles(&batch, &config, &ctx).unwrap();
    let q = theta.particles();
    let lambda = 1.7;
    let est = expected_score_gradient(&env, policy, |x, y| {
        let ep = enumerated_episode(&env, policy, x, y);
        rad_score(&ep, q, &g, &ctx.weights, lambda, config.beta)
            - rad_score(&ep, q, &g, &ctx.weights, 0.0, config.beta)
    })
    .unwrap();
    let mut composed = vec![vec![0.0; ny]; nx];
    for ((qi, gi), wi) in q.iter().zip(&g).zip(ctx.weights.as_slice()) {
        let cdf = exact_cdf_gradient(&env, policy, *qi).unwrap();
        for (row, crow) in composed.iter_mut().zip(&cdf) {
            for (v, c) in row.iter_mut().zip(crow) {
                *v += lambda * wi * -gi * c;
            }
        }
    }
    let worst_c = max_abs_diff(&est, &composed);
    ensure(worst_c <= AC3_LAMBDA_TOL, || {
        format!("(c) error {worst_c:e}")
    })?;
    within(AC3_BUDGET, start)?;
    Ok(format!(
        "(a) {worst_a:.1e}, (b) max {worst_z:.2} se, (c) {worst_c:.1e}"
    ))
}

fn dist(particles: Vec<f64>) -> EmpiricalCostDistribution {
    let samples = rad_core::CostSamples::new(particles).unwrap();
    let n = samples.len();
    rad_core::quantile_particles(&samples, n).unwrap()
}

fn ac4() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for pair in 0..50 {
        let n = rng.random_range(10..40);
        let x = dist((0..n).map(|_| rng.random_range(-3.0..3.0)).collect());
        let y = dist((0..n).map(|_| rng.random_range(-3.0..3.0)).collect());
        for spec in Spectrum::all_defaults() {
            let w = discretize_weights(&spec, x.levels(), true).unwrap();
            let (fwd, rev) = (fsd_loss(&x, &y, &w).unwrap(), fsd_loss(&y, &x, &w).unwrap());
            let gap = spectral_risk(&y, &w).unwrap() - spectral_risk(&x, &w).unwrap();
            let err = (fwd - rev - gap).abs();
            ensure(err <= AC4_TOL, || {
                format!("pair {pair} {spec}: error {err:e}")
            })?;
            ensure(-rev - AC4_TOL <= gap && gap <= fwd + AC4_TOL, || {
                format!("pair {pair} {spec}: {gap} outside [-{rev}, {fwd}]")
            })?;
            worst = worst.max(err);
        }
    }
    within(AC4_BUDGET, start)?;
    Ok(format!("max identity error {worst:.1e}"))
}

fn ac5(env: &ToyEnv) -> Verdict {
    let start = Instant::now();
    let kappa = env.kappa().ok_or("fixture has no kappa")?;
    let config = RadConfig::default();
    let state = train(env, &config, Mode::Rad).map_err(|e| e.to_string())?;
    within(TRAIN_BUDGET, start)?;
    let last = state.history.last().ok_or("empty history")?;
    let ref_mean = exact_expected_cost(env, env.reference()).unwrap();
    let r0 = exact_expected_rtilde(env, env.reference(), config.beta)
        .unwrap()
        .0;
    let detail = format!(
        "fwd {:.4} (κ {kappa:.4}), rev {:.4}, cost {:.4} vs ref {ref_mean:.4}, r̃ {:.4} vs {r0:.4}",
        last.lfsd_fwd, last.lfsd_rev, last.exp_cost, last.exp_reward
    );
    ensure(last.lfsd_fwd >= kappa - AC5_FWD_SLACK * kappa, || {
        format!("forward loss too small: {detail}")
    })?;
    ensure(last.lfsd_rev <= AC5_REV_MAX * kappa, || {
        format!("reverse loss too large: {detail}")
    })?;
    ensure(
        last.exp_cost <= ref_mean - kappa + last.lfsd_rev + AC5_FWD_SLACK * kappa,
        || format!("mean-cost bound violated: {detail}"),
    )?;
    ensure(last.exp_reward > r0, || {
        format!("r̃ did not improve: {detail}")
    })?;
    Ok(detail)
}

/// `(1/(1−α)) ∫_α^1 F⁻¹(u) du` of a discrete law.
fn exact_cvar(law: &CostLaw, alpha: f64) -> f64 {
    let mut acc = 0.0;
    let mut lo = 0.0;
    for &(c, p) in law.atoms() {
        let hi = lo + p;
        acc += c * (hi.min(1.0) - lo.max(alpha)).max(0.0);
        lo = hi;
    }
    acc / (1.0 - alpha)
}

fn ac6(env: &ToyEnv) -> Verdict {
    let start = Instant::now();
    let spectrum = Spectrum::Cvar { alpha: AC6_ALPHA };
    let config = RadConfig {
        spectrum,
        ..RadConfig::default()
    };
    let state = train(env, &config, Mode::Rad).map_err(|e| e.to_string())?;
    within(TRAIN_BUDGET, start)?;
    let theta = exact_cvar(&exact_cost_law(env, &state.policy).unwrap(), AC6_ALPHA);
    let reference = exact_cvar(&exact_cost_law(env, env.reference()).unwrap(), AC6_ALPHA);
    let m = matchup(
        env,
        &state.policy,
        env.reference(),
        &[spectrum],
        AC6_PROMPTS,
        config.n_particles,
        0,
    )
    .unwrap();
    let diff = m.dominance["cvar"];
    let detail = format!("CVaR {theta:.4} vs ref {reference:.4}, matchup dominance {diff:.4}");
    ensure(theta < reference, || format!("CVaR not reduced: {detail}"))?;
    ensure(diff > 0.0, || format!("dominance not positive: {detail}"))?;
    Ok(detail)
}

fn ac7(env: &ToyEnv) -> Verdict {
    let start = Instant::now();
    let kappa = env.kappa().ok_or("fixture has no kappa")?;
    let ref_mean = exact_expected_cost(env, env.reference()).unwrap();
    let tau = ref_mean - kappa;
    let state =
        train(env, &RadConfig::default(), Mode::SafeRlhf { tau }).map_err(|e| e.to_string())?;
    within(TRAIN_BUDGET, start)?;
    let cost = state.history.last().ok_or("empty history")?.exp_cost;
    let bound = tau + AC7_SLACK * (tau - ref_mean).abs();
    let detail = format!("cost {cost:.4}, τ {tau:.4}, bound {bound:.4}");
    ensure(cost <= bound, || {
        format!("expected cost above bound: {detail}")
    })?;
    Ok(detail)
}

fn ac8() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_rad");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut histories = Vec::new();
    for run in ["a", "b"] {
        let config = dir.path().join(format!("{run}.json"));
        let body = serde_json::json!({
            "env": fixture_path(),
            "output_dir": dir.path().join(run),
            "steps": AC8_STEPS,
            "seed": 17,
        });
        fs::write(&config, body.to_string()).unwrap();
        let status = Command::new(bin)
            .args(["train", "--config"])
            .arg(&config)
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("train exited with {status}"))?;
        histories.push(fs::read(dir.path().join(run).join("history.csv")).unwrap());
    }
    ensure(histories[0] == histories[1], || "histories differ".into())?;
    let check = Command::new(bin)
        .arg("check")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(check.status.success(), || {
        format!(
            "check exited with {}: {}",
            check.status,
            String::from_utf8_lossy(&check.stdout)
        )
    })?;
    Ok(format!(
        "{} history bytes identical, check exit 0",
        histories[0].len()
    ))
}

fn ac9() -> Verdict {
    let levels = make_levels(AC9_GRID).unwrap();
    let mut worst = 0.0f64;
    for spec in Spectrum::all_defaults() {
        if matches!(spec, Spectrum::Var { .. }) {
            continue;
        }
        let normalize = matches!(spec, Spectrum::Wang { .. });
        let w = discretize_weights(&spec, &levels, normalize).unwrap();
        let integral = w.as_slice().iter().sum::<f64>() / AC9_GRID as f64;
        let err = (integral - 1.0).abs();
        ensure(err <= AC9_TOL, || format!("{spec}: integral {integral}"))?;
        worst = worst.max(err);
    }
    Ok(format!("max |integral - 1| {worst:.1e}"))
}

#[test]
fn acceptance_criteria() {
    let env = fixture();
    let criteria: [(&str, &dyn Fn() -> Verdict); 9] = [
        ("AC1 fsd-ot-equivalence", &ac1),
        ("AC2 particle-gradient", &ac2),
        ("AC3 estimator-identities", &ac3),
        ("AC4 srm-decomposition", &ac4),
        ("AC5 rad-uniform-run", &|| ac5(&env)),
        ("AC6 rad-cvar-run", &|| ac6(&env)),
        ("AC7 safe-rlhf-run", &|| ac7(&env)),
        ("AC8 determinism", &ac8),
        ("AC9 spectrum-normalization", &ac9),
    ];
    let mut failed = Vec::new();
    for (name, criterion) in criteria {
        match criterion() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
