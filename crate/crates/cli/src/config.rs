//! Run configuration files.
//!
//! A run config is one JSON object: `env` (fixture path), `output_dir`,
//! optional `mode` (`"rad"` or `"safe-rlhf"`), optional `tau` (safe-rlhf
//! only) and any [`RadConfig`] field. Relative paths are resolved against
//! the config file's directory. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rad_core::format::round_sig;
use rad_core::{exact_expected_cost, Mode, RadConfig, ToyEnv};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModeKind {
    Rad,
    SafeRlhf,
}

impl ModeKind {
    fn parse(token: &str) -> Result<Self> {
        match token {
            "rad" => Ok(ModeKind::Rad),
            "safe-rlhf" => Ok(ModeKind::SafeRlhf),
            other => bail!("unknown mode {other:?}; expected \"rad\" or \"safe-rlhf\""),
        }
    }

    fn token(self) -> &'static str {
        match self {
            ModeKind::Rad => "rad",
            ModeKind::SafeRlhf => "safe-rlhf",
        }
    }
}

/// A parsed, validated run configuration with its environment loaded.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub env_path: PathBuf,
    pub output_dir: PathBuf,
    pub mode: ModeKind,
    /// Set for safe-rlhf; defaults to the reference mean cost minus `kappa`.
    pub tau: Option<f64>,
    /// With `kappa` resolved against the environment.
    pub rad: RadConfig,
    pub env: ToyEnv,
}

fn take_string(map: &mut Map<String, Value>, key: &str) -> Result<Option<String>> {
    match map.remove(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => bail!("{key} must be a string, got {other}"),
    }
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Reads and validates `path`. Touches nothing on disk.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let value: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let Value::Object(mut map) = value else {
            bail!("config must be a JSON object");
        };
        let env_raw = take_string(&mut map, "env")?.ok_or_else(|| anyhow!("missing key env"))?;
        let out_raw = take_string(&mut map, "output_dir")?
            .ok_or_else(|| anyhow!("missing key output_dir"))?;
        let mode = match take_string(&mut map, "mode")? {
            Some(t) => ModeKind::parse(&t)?,
            None => ModeKind::Rad,
        };
        let tau = match map.remove("tau") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_f64().ok_or_else(|| anyhow!("tau must be a number"))?),
        };
        if tau.is_some() && mode == ModeKind::Rad {
            bail!("tau is only meaningful with mode \"safe-rlhf\"");
        }
        let mut rad: RadConfig =
            serde_json::from_value(Value::Object(map)).context("invalid training parameters")?;
        rad.validate()?;

        let env_path = resolve(base, &env_raw);
        let env_text = fs::read_to_string(&env_path)
            .with_context(|| format!("reading environment {}", env_path.display()))?;
        let env = ToyEnv::from_json(&env_text)?;
        rad.kappa = Some(rad.resolve_kappa(&env)?);
        let tau = match mode {
            ModeKind::Rad => None,
            ModeKind::SafeRlhf => Some(match tau {
                Some(t) if t.is_finite() => t,
                Some(t) => bail!("tau must be finite, got {t}"),
                None => exact_expected_cost(&env, env.reference())? - rad.kappa.unwrap_or_default(),
            }),
        };
        Ok(Self {
            env_path: std::path::absolute(&env_path)?,
            output_dir: std::path::absolute(resolve(base, &out_raw))?,
            mode,
            tau: tau.map(round_sig),
            rad: rad.rounded(),
            env,
        })
    }

    pub fn mode(&self) -> Mode {
        match (self.mode, self.tau) {
            (ModeKind::SafeRlhf, Some(tau)) => Mode::SafeRlhf { tau },
            _ => Mode::Rad,
        }
    }

    /// The fully resolved config; loading it reproduces this run exactly.
    pub fn resolved_json(&self) -> String {
        let mut map = Map::new();
        map.insert(
            "env".into(),
            Value::String(self.env_path.display().to_string()),
        );
        map.insert(
            "output_dir".into(),
            Value::String(self.output_dir.display().to_string()),
        );
        map.insert("mode".into(), Value::String(self.mode.token().into()));
        if let Some(tau) = self.tau {
            map.insert("tau".into(), serde_json::json!(tau));
        }
        if let Value::Object(rad) = serde_json::to_value(&self.rad).expect("config serializes") {
            map.extend(rad);
        }
        serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes")
    }
}
