//! The constrained policy-gradient loop.
//!
//! Each RAD step samples `B·k` episodes, pools their costs into `N` quantile
//! particles, solves the entropic FSD problem against frozen reference
//! particles, turns the particle gradients into a per-episode score
//! `r̃ + λ Σ_i w_i (−g_i) 1[cost ≤ q_i]`, applies a leave-one-out baselined
//! REINFORCE step to the logits and a projected step to `λ`:
//! `λ ← max(0, λ − lr_λ (L̂ − κ))` where `L̂` is the weighted quantile gap of
//! the batch particles below the reference. The expected-cost baseline
//! replaces the constraint term by `−λ_c · cost` with
//! `λ_c ← max(0, λ_c + lr_λ (Ê[cost] − τ))`.

use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize};

use crate::distributions::{quantile_particles, CostSamples, EmpiricalCostDistribution};
use crate::dominance::fsd_loss;
use crate::error::{RadError, Result};
use crate::format::{fmt_sig, round_sig};
use crate::rng::StepStreams;
use crate::spectra::{discretize_weights, spectral_risk, DiscreteWeights, Spectrum};
use crate::toyenv::{
    exact_cost_law, exact_expected_cost, exact_expected_rtilde, kl_regularized_reward,
    sample_batch, Episode, SoftmaxPolicy, Table, ToyEnv,
};
use crate::transport::{particle_gradient, solve_fsd, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Step index whose substreams draw the cached reference sample; training
/// steps never reach it.
pub const REFERENCE_STREAM_STEP: u64 = u64::MAX;

/// Header of the history CSV.
pub const HISTORY_HEADER: &str =
    "step,exp_reward,exp_cost,lfsd_fwd,lfsd_rev,dominance_diff,lambda,srm_theta,srm_ref";

/// How the frozen reference particles are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RefQuantileSource {
    /// Exact quantiles of the enumerated reference cost law.
    Exact,
    /// Quantiles of this many seeded reference draws.
    CachedSample(usize),
}

/// Which objective the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Rad,
    /// Expected-cost constraint `E[cost] ≤ tau`.
    SafeRlhf {
        tau: f64,
    },
}

fn spectrum_or_token<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Spectrum, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Form {
        Token(String),
        Full(Spectrum),
    }
    match Form::deserialize(d)? {
        Form::Token(t) => Spectrum::from_token(&t).map_err(serde::de::Error::custom),
        Form::Full(s) => Ok(s),
    }
}

/// Hyperparameters of a run. Missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadConfig {
    pub chi: f64,
    pub beta: f64,
    /// Constraint level; `None` uses the environment's stored value.
    pub kappa: Option<f64>,
    pub n_particles: usize,
    #[serde(deserialize_with = "spectrum_or_token")]
    pub spectrum: Spectrum,
    pub normalize_weights: bool,
    pub batch_prompts: usize,
    pub samples_per_prompt: usize,
    pub lr_theta: f64,
    /// Dual step size. The constraint gap is of order `kappa`, so the
    /// multiplier needs a large step to react within a run.
    pub lr_lambda: f64,
    pub lambda_init: f64,
    pub steps: u64,
    pub seed: u64,
    pub ref_quantile_source: RefQuantileSource,
}

impl Default for RadConfig {
    fn default() -> Self {
        Self {
            chi: 0.01,
            beta: 0.1,
            kappa: None,
            n_particles: 16,
            spectrum: Spectrum::Mean,
            normalize_weights: true,
            batch_prompts: 32,
            samples_per_prompt: 2,
            lr_theta: 0.05,
            lr_lambda: 10.0,
            lambda_init: 0.0,
            steps: 2000,
            seed: 0,
            ref_quantile_source: RefQuantileSource::Exact,
        }
    }
}

fn round_spectrum(s: Spectrum) -> Spectrum {
    match s {
        Spectrum::Var { alpha, bandwidth } => Spectrum::Var {
            alpha: round_sig(alpha),
            bandwidth: round_sig(bandwidth),
        },
        Spectrum::Cvar { alpha } => Spectrum::Cvar {
            alpha: round_sig(alpha),
        },
        Spectrum::Exponential { lambda } => Spectrum::Exponential {
            lambda: round_sig(lambda),
        },
        Spectrum::Power { lambda } => Spectrum::Power {
            lambda: round_sig(lambda),
        },
        Spectrum::Wang { lambda } => Spectrum::Wang {
            lambda: round_sig(lambda),
        },
        other => other,
    }
}

impl RadConfig {
    /// Copy with every real parameter rounded to the emitted precision, so a
    /// serialized config reproduces the run exactly.
    pub fn rounded(&self) -> Self {
        Self {
            chi: round_sig(self.chi),
            beta: round_sig(self.beta),
            kappa: self.kappa.map(round_sig),
            spectrum: round_spectrum(self.spectrum),
            lr_theta: round_sig(self.lr_theta),
            lr_lambda: round_sig(self.lr_lambda),
            lambda_init: round_sig(self.lambda_init),
            ..self.clone()
        }
    }

    /// The constraint level in force: the configured one, else the
    /// environment's.
    pub fn resolve_kappa(&self, env: &ToyEnv) -> Result<f64> {
        self.kappa.or(env.kappa()).ok_or_else(|| {
            RadError::invalid("kappa is neither configured nor stored in the environment")
        })
    }

    /// Checks the parameter invariants; `B·k ≥ 4N` keeps every particle
    /// backed by several samples.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(RadError::invalid(format!("{name} must be > 0, got {v}")))
            }
        };
        positive("chi", self.chi)?;
        positive("lr_theta", self.lr_theta)?;
        positive("lr_lambda", self.lr_lambda)?;
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(RadError::invalid(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if let Some(k) = self.kappa {
            if !(k.is_finite() && k >= 0.0) {
                return Err(RadError::invalid(format!("kappa must be >= 0, got {k}")));
            }
        }
        if !(self.lambda_init.is_finite() && self.lambda_init >= 0.0) {
            return Err(RadError::invalid("lambda_init must be >= 0"));
        }
        if self.n_particles == 0 {
            return Err(RadError::invalid("n_particles must be >= 1"));
        }
        if self.batch_prompts == 0 {
            return Err(RadError::invalid("batch_prompts must be >= 1"));
        }
        if self.samples_per_prompt < 2 {
            return Err(RadError::invalid(
                "samples_per_prompt must be >= 2 for leave-one-out baselines",
            ));
        }
        let batch = self.batch_prompts * self.samples_per_prompt;
        if batch < 4 * self.n_particles {
            return Err(RadError::invalid(format!(
                "batch of {batch} episodes is below 4 x n_particles = {}",
                4 * self.n_particles
            )));
        }
        if let RefQuantileSource::CachedSample(m) = self.ref_quantile_source {
            if m < self.n_particles {
                return Err(RadError::invalid(format!(
                    "cached reference sample of {m} is smaller than n_particles"
                )));
            }
        }
        self.spectrum.validate()
    }
}

/// Frozen reference particles: exact quantiles of the reference cost law, or
/// quantiles of `M` reference draws from the seed's reference substreams.
pub fn estimate_ref_quantiles(
    env: &ToyEnv,
    config: &RadConfig,
) -> Result<EmpiricalCostDistribution> {
    let n = config.n_particles;
    match config.ref_quantile_source {
        RefQuantileSource::Exact => exact_cost_law(env, env.reference())?.particles(n),
        RefQuantileSource::CachedSample(m) => {
            if m < n {
                return Err(RadError::invalid(format!(
                    "cached reference sample of {m} is smaller than {n} particles"
                )));
            }
            let streams = StepStreams::new(config.seed, REFERENCE_STREAM_STEP);
            let eps = sample_batch(env, env.reference(), m, 1, false, streams)?;
            quantile_particles(&CostSamples::new(eps.iter().map(|e| e.cost).collect())?, n)
        }
    }
}

/// `r̃ + λ Σ_i w_i (−g_i) 1[cost ≤ q_i]`.
pub fn rad_score(
    ep: &Episode,
    q: &[f64],
    g: &[f64],
    w: &DiscreteWeights,
    lambda: f64,
    beta: f64,
) -> f64 {
    let rt = kl_regularized_reward(ep, beta);
    if lambda == 0.0 {
        return rt;
    }
    let bonus: f64 = q
        .iter()
        .zip(g)
        .zip(w.as_slice())
        .filter(|((&qi, _), _)| ep.cost <= qi)
        .map(|((_, gi), wi)| wi * -gi)
        .sum();
    rt + lambda * bonus
}

/// `score_j − mean of the other k−1 scores`.
pub fn rloo_advantages(scores: &[f64]) -> Result<Vec<f64>> {
    let k = scores.len();
    if k < 2 {
        return Err(RadError::invalid(format!(
            "leave-one-out baseline needs k >= 2 scores, got {k}"
        )));
    }
    let total: f64 = scores.iter().sum();
    Ok(scores
        .iter()
        .map(|s| s - (total - s) / (k - 1) as f64)
        .collect())
}

/// `max(0, λ − lr (L̂ − κ))`.
pub fn dual_update(lambda: f64, lfsd_hat: f64, kappa: f64, lr_lambda: f64) -> f64 {
    (lambda - lr_lambda * (lfsd_hat - kappa)).max(0.0)
}

/// One row of the training history, measured exactly after the step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRecord {
    pub step: u64,
    /// `E[r] − β KL(π_θ ‖ π_ref)`.
    pub exp_reward: f64,
    pub exp_cost: f64,
    /// `L_w(C_θ, C_ref)`: weighted improvement of `θ`'s quantiles over the
    /// reference particles.
    pub lfsd_fwd: f64,
    /// `L_w(C_ref, C_θ)`.
    pub lfsd_rev: f64,
    pub dominance_diff: f64,
    pub lambda: f64,
    pub srm_theta: f64,
    pub srm_ref: f64,
}

/// Everything fixed for the duration of a run.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub mode: Mode,
    pub kappa: f64,
    pub reference: EmpiricalCostDistribution,
    pub weights: DiscreteWeights,
}

impl RunContext {
    pub fn new(env: &ToyEnv, config: &RadConfig, mode: Mode) -> Result<Self> {
        config.validate()?;
        if let Mode::SafeRlhf { tau } = mode {
            if !tau.is_finite() {
                return Err(RadError::invalid("tau must be finite"));
            }
        }
        let reference = estimate_ref_quantiles(env, config)?;
        let weights = discretize_weights(
            &config.spectrum,
            reference.levels(),
            config.normalize_weights,
        )?;
        Ok(Self {
            mode,
            kappa: config.resolve_kappa(env)?,
            reference,
            weights,
        })
    }
}

/// Exact metrics of `policy` against the frozen reference particles.
pub fn measure(
    env: &ToyEnv,
    policy: &SoftmaxPolicy,
    config: &RadConfig,
    ctx: &RunContext,
    step: u64,
    lambda: f64,
) -> Result<HistoryRecord> {
    let theta = exact_cost_law(env, policy)?.particles(config.n_particles)?;
    let lfsd_fwd = fsd_loss(&theta, &ctx.reference, &ctx.weights)?;
    let lfsd_rev = fsd_loss(&ctx.reference, &theta, &ctx.weights)?;
    Ok(HistoryRecord {
        step,
        exp_reward: exact_expected_rtilde(env, policy, config.beta)?.0,
        exp_cost: exact_expected_cost(env, policy)?,
        lfsd_fwd,
        lfsd_rev,
        dominance_diff: lfsd_fwd - lfsd_rev,
        lambda,
        srm_theta: spectral_risk(&theta, &ctx.weights)?,
        srm_ref: spectral_risk(&ctx.reference, &ctx.weights)?,
    })
}

/// Policy, multiplier and history of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub policy: SoftmaxPolicy,
    pub lambda: f64,
    pub step: u64,
    pub history: Vec<HistoryRecord>,
}

impl TrainerState {
    /// The reference policy with `λ = lambda_init`.
    pub fn initial(env: &ToyEnv, config: &RadConfig) -> Self {
        Self {
            policy: env.reference().clone(),
            lambda: config.lambda_init,
            step: 0,
            history: Vec::new(),
        }
    }

    /// The serializable end-of-run snapshot.
    pub fn snapshot(&self) -> PolicyState {
        PolicyState {
            logits: self.policy.logits().clone(),
            lambda: self.lambda,
            step: self.step,
        }
    }
}

/// Logits, multiplier and step count as stored in a state file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyState {
    pub logits: Table,
    pub lambda: f64,
    pub step: u64,
}

impl PolicyState {
    /// Pretty JSON with every real rounded to the emitted precision.
    pub fn to_json(&self) -> String {
        let rounded = PolicyState {
            logits: self
                .logits
                .iter()
                .map(|r| r.iter().map(|&v| round_sig(v)).collect())
                .collect(),
            lambda: round_sig(self.lambda),
            step: self.step,
        };
        serde_json::to_string_pretty(&rounded).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| RadError::Parse(format!("state file: {e}")))
    }

    pub fn policy(&self) -> Result<SoftmaxPolicy> {
        SoftmaxPolicy::new(self.logits.clone())
    }
}

/// `(1/(B·k)) Σ advantage · ∇θ log π(y|x)` with leave-one-out advantages
/// computed within each prompt group.
fn policy_gradient(
    policy: &SoftmaxPolicy,
    episodes: &[Episode],
    scores: &[f64],
    k: usize,
) -> Result<Table> {
    let mut grad = vec![vec![0.0; policy.n_actions()]; policy.n_contexts()];
    let scale = 1.0 / episodes.len() as f64;
    for (group, group_scores) in episodes.chunks(k).zip(scores.chunks(k)) {
        for (ep, adv) in group.iter().zip(rloo_advantages(group_scores)?) {
            policy.add_score(&mut grad, ep.context, ep.action, scale * adv)?;
        }
    }
    Ok(grad)
}

fn check_mode(ctx: &RunContext, want_rad: bool) -> Result<()> {
    if matches!(ctx.mode, Mode::Rad) != want_rad {
        return Err(RadError::invalid(
            "run context mode does not match the step kind",
        ));
    }
    Ok(())
}

/// Batch particles and their entropic particle gradients against the
/// reference; every `g_i ≤ 0`.
pub fn batch_particles(
    episodes: &[Episode],
    config: &RadConfig,
    ctx: &RunContext,
) -> Result<(EmpiricalCostDistribution, Vec<f64>)> {
    let samples = CostSamples::new(episodes.iter().map(|e| e.cost).collect())?;
    let theta = quantile_particles(&samples, config.n_particles)?;
    let y = ctx.reference.particles();
    let (_, plan) = solve_fsd(
        theta.particles(),
        y,
        config.chi,
        DEFAULT_TOL,
        DEFAULT_MAX_ITER,
    )?;
    let g = particle_gradient(&plan, theta.particles(), y)?;
    Ok((theta, g))
}

/// One RAD step. On error `state` is left untouched.
pub fn rad_step(
    env: &ToyEnv,
    state: &mut TrainerState,
    config: &RadConfig,
    ctx: &RunContext,
) -> Result<()> {
    check_mode(ctx, true)?;
    let k = config.samples_per_prompt;
    let streams = StepStreams::new(config.seed, state.step);
    let episodes = sample_batch(env, &state.policy, config.batch_prompts, k, true, streams)?;
    let (theta, g) = batch_particles(&episodes, config, ctx)?;
    let q = theta.particles();
    let scores: Vec<f64> = episodes
        .iter()
        .map(|ep| rad_score(ep, q, &g, &ctx.weights, state.lambda, config.beta))
        .collect();
    let grad = policy_gradient(&state.policy, &episodes, &scores, k)?;
    let policy = state.policy.stepped(&grad, config.lr_theta)?;
    let lfsd_hat = fsd_loss(&theta, &ctx.reference, &ctx.weights)?;
    let lambda = dual_update(state.lambda, lfsd_hat, ctx.kappa, config.lr_lambda);
    let record = measure(env, &policy, config, ctx, state.step + 1, lambda)?;
    state.policy = policy;
    state.lambda = lambda;
    state.step += 1;
    state.history.push(record);
    Ok(())
}

/// One expected-cost-constrained step. On error `state` is left untouched.
pub fn safe_rlhf_step(
    env: &ToyEnv,
    state: &mut TrainerState,
    config: &RadConfig,
    ctx: &RunContext,
) -> Result<()> {
    check_mode(ctx, false)?;
    let Mode::SafeRlhf { tau } = ctx.mode else {
        unreachable!("checked above")
    };
    let k = config.samples_per_prompt;
    let streams = StepStreams::new(config.seed, state.step);
    let episodes = sample_batch(env, &state.policy, config.batch_prompts, k, true, streams)?;
    let scores: Vec<f64> = episodes
        .iter()
        .map(|ep| kl_regularized_reward(ep, config.beta) - state.lambda * ep.cost)
        .collect();
    let grad = policy_gradient(&state.policy, &episodes, &scores, k)?;
    let policy = state.policy.stepped(&grad, config.lr_theta)?;
    let mean_cost = episodes.iter().map(|e| e.cost).sum::<f64>() / episodes.len() as f64;
    let lambda = (state.lambda + config.lr_lambda * (mean_cost - tau)).max(0.0);
    let record = measure(env, &policy, config, ctx, state.step + 1, lambda)?;
    state.policy = policy;
    state.lambda = lambda;
    state.step += 1;
    state.history.push(record);
    Ok(())
}

/// Advances `state` until it has completed `config.steps` steps. Stops at
/// the first error, keeping every step completed before it.
pub fn run(
    env: &ToyEnv,
    state: &mut TrainerState,
    config: &RadConfig,
    ctx: &RunContext,
) -> Result<()> {
    while state.step < config.steps {
        match ctx.mode {
            Mode::Rad => rad_step(env, state, config, ctx)?,
            Mode::SafeRlhf { .. } => safe_rlhf_step(env, state, config, ctx)?,
        }
    }
    Ok(())
}

/// A full run from the reference policy.
pub fn train(env: &ToyEnv, config: &RadConfig, mode: Mode) -> Result<TrainerState> {
    let ctx = RunContext::new(env, config, mode)?;
    let mut state = TrainerState::initial(env, config);
    run(env, &mut state, config, &ctx)?;
    Ok(state)
}

/// The history as CSV: [`HISTORY_HEADER`] then one row per step.
pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let cells = [
            r.exp_reward,
            r.exp_cost,
            r.lfsd_fwd,
            r.lfsd_rev,
            r.dominance_diff,
            r.lambda,
            r.srm_theta,
            r.srm_ref,
        ];
        let _ = write!(out, "{}", r.step);
        for c in cells {
            let _ = write!(out, ",{}", fmt_sig(c));
        }
        out.push('\n');
    }
    out
}
