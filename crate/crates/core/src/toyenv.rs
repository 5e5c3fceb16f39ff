//! A tabular contextual bandit with exact oracles.
//!
//! Contexts are drawn from `context_probs`, actions from a softmax policy over
//! per-context logits, and reward and cost are deterministic tables. Every
//! expectation and policy gradient the trainer estimates by sampling can be
//! computed here exactly by enumerating all `(x, y)` pairs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::CostLaw;
use crate::error::{RadError, Result};
use crate::format::round_sig;
use crate::rng::{categorical, uniform, StepStreams};
use crate::transport::exact_fsd;

/// A dense `n_x × n_y` table, indexed `[x][y]`.
pub type Table = Vec<Vec<f64>>;

const PROB_TOL: f64 = 1e-12;

fn check_table(name: &str, t: &Table, n_x: usize, n_y: usize) -> Result<()> {
    if t.len() != n_x || t.iter().any(|row| row.len() != n_y) {
        return Err(RadError::invalid(format!(
            "{name} must be a {n_x}x{n_y} table"
        )));
    }
    if t.iter().flatten().any(|v| !v.is_finite()) {
        return Err(RadError::invalid(format!("{name} has non-finite entries")));
    }
    Ok(())
}

/// `Σ_y π(y) f(y)` subtracted from `f`, times `π`: the softmax Jacobian applied
/// to `f`, i.e. `∂/∂θ_y' Σ_y π(y) f(y)` with `f` held fixed.
fn jacobian_apply(pi: &[f64], f: &[f64]) -> Vec<f64> {
    let mean: f64 = pi.iter().zip(f).map(|(p, v)| p * v).sum();
    pi.iter().zip(f).map(|(p, v)| p * (v - mean)).collect()
}

/// Softmax policy over per-context logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Table", into = "Table")]
pub struct SoftmaxPolicy {
    logits: Table,
}

impl TryFrom<Table> for SoftmaxPolicy {
    type Error = RadError;

    fn try_from(logits: Table) -> Result<Self> {
        Self::new(logits)
    }
}

impl From<SoftmaxPolicy> for Table {
    fn from(p: SoftmaxPolicy) -> Table {
        p.logits
    }
}

impl SoftmaxPolicy {
    /// Requires a non-empty rectangular table of finite logits.
    pub fn new(logits: Table) -> Result<Self> {
        let n_y = logits.first().map_or(0, Vec::len);
        if logits.is_empty() || n_y == 0 {
            return Err(RadError::invalid("policy logits must be non-empty"));
        }
        check_table("logits", &logits, logits.len(), n_y)?;
        Ok(Self { logits })
    }

    /// All-zero logits.
    pub fn uniform(n_x: usize, n_y: usize) -> Result<Self> {
        Self::new(vec![vec![0.0; n_y]; n_x])
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    pub fn n_contexts(&self) -> usize {
        self.logits.len()
    }

    pub fn n_actions(&self) -> usize {
        self.logits[0].len()
    }

    fn check_context(&self, x: usize) -> Result<()> {
        if x >= self.n_contexts() {
            return Err(RadError::invalid(format!(
                "context {x} out of range (n_x = {})",
                self.n_contexts()
            )));
        }
        Ok(())
    }

    /// Log-probabilities of every action in context `x`.
    pub fn log_probs(&self, x: usize) -> Result<Vec<f64>> {
        self.check_context(x)?;
        let row = &self.logits[x];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        Ok(row.iter().map(|v| v - lse).collect())
    }

    /// `π(·|x)`.
    pub fn action_probs(&self, x: usize) -> Result<Vec<f64>> {
        self.check_context(x)?;
        let row = &self.logits[x];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / z).collect())
    }

    /// `log π(y|x)`.
    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        let lp = self.log_probs(x)?;
        lp.get(y).copied().ok_or_else(|| {
            RadError::invalid(format!("action {y} out of range (n_y = {})", lp.len()))
        })
    }

    /// `π(y|x)` for every context.
    pub fn probs_table(&self) -> Table {
        (0..self.n_contexts())
            .map(|x| self.action_probs(x).expect("context in range"))
            .collect()
    }

    /// Adds `coef · ∇θ log π(y|x)` to `acc`. Only row `x` is touched:
    /// `∂ log π(y|x) / ∂θ[x][y'] = 1[y = y'] − π(y'|x)`.
    pub fn add_score(&self, acc: &mut Table, x: usize, y: usize, coef: f64) -> Result<()> {
        let pi = self.action_probs(x)?;
        if y >= pi.len() {
            return Err(RadError::invalid(format!("action {y} out of range")));
        }
        for (yp, p) in pi.iter().enumerate() {
            let ind = if yp == y { 1.0 } else { 0.0 };
            acc[x][yp] += coef * (ind - p);
        }
        Ok(())
    }

    /// `θ + step · direction`.
    pub fn stepped(&self, direction: &Table, step: f64) -> Result<Self> {
        check_table("direction", direction, self.n_contexts(), self.n_actions())?;
        let logits = self
            .logits
            .iter()
            .zip(direction)
            .map(|(row, d)| row.iter().zip(d).map(|(a, b)| a + step * b).collect())
            .collect();
        Self::new(logits)
    }
}

/// Serialized environment: exact JSON keys of the fixture format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvFile {
    context_probs: Vec<f64>,
    reward: Table,
    cost: Table,
    ref_logits: Table,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kappa: Option<f64>,
}

/// The environment: context law, reward and cost tables, reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EnvFile", into = "EnvFile")]
pub struct ToyEnv {
    context_probs: Vec<f64>,
    reward: Table,
    cost: Table,
    reference: SoftmaxPolicy,
    kappa: Option<f64>,
}

impl TryFrom<EnvFile> for ToyEnv {
    type Error = RadError;

    fn try_from(f: EnvFile) -> Result<Self> {
        ToyEnv::new(f.context_probs, f.reward, f.cost, f.ref_logits, f.kappa)
    }
}

impl From<ToyEnv> for EnvFile {
    fn from(e: ToyEnv) -> EnvFile {
        EnvFile {
            context_probs: e.context_probs,
            reward: e.reward,
            cost: e.cost,
            ref_logits: e.reference.logits,
            kappa: e.kappa,
        }
    }
}

impl ToyEnv {
    /// Validates dimensions, finiteness and the context law (mass 1 within
    /// `1e-12`). `kappa`, when present, must be non-negative.
    pub fn new(
        context_probs: Vec<f64>,
        reward: Table,
        cost: Table,
        ref_logits: Table,
        kappa: Option<f64>,
    ) -> Result<Self> {
        let n_x = context_probs.len();
        if n_x == 0 {
            return Err(RadError::invalid("context_probs must be non-empty"));
        }
        if context_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(RadError::invalid("context_probs must be finite and >= 0"));
        }
        let total: f64 = context_probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(RadError::invalid(format!(
                "context_probs sum to {total}, not 1"
            )));
        }
        let n_y = reward.first().map_or(0, Vec::len);
        if n_y == 0 {
            return Err(RadError::invalid("reward table must be non-empty"));
        }
        check_table("reward", &reward, n_x, n_y)?;
        check_table("cost", &cost, n_x, n_y)?;
        check_table("ref_logits", &ref_logits, n_x, n_y)?;
        if let Some(k) = kappa {
            if !(k.is_finite() && k >= 0.0) {
                return Err(RadError::invalid(format!("kappa must be >= 0, got {k}")));
            }
        }
        Ok(Self {
            context_probs,
            reward,
            cost,
            reference: SoftmaxPolicy::new(ref_logits)?,
            kappa,
        })
    }

    /// Parses the fixture JSON.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: EnvFile =
            serde_json::from_str(text).map_err(|e| RadError::Parse(format!("env file: {e}")))?;
        Self::try_from(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("env serializes")
    }

    pub fn n_contexts(&self) -> usize {
        self.context_probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.reward[0].len()
    }

    pub fn context_probs(&self) -> &[f64] {
        &self.context_probs
    }

    pub fn reward(&self) -> &Table {
        &self.reward
    }

    pub fn cost(&self) -> &Table {
        &self.cost
    }

    pub fn reference(&self) -> &SoftmaxPolicy {
        &self.reference
    }

    /// Constraint level stored with the fixture, if any.
    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    /// Errors unless `policy` has this environment's shape.
    pub fn check_policy(&self, policy: &SoftmaxPolicy) -> Result<()> {
        if policy.n_contexts() != self.n_contexts() || policy.n_actions() != self.n_actions() {
            return Err(RadError::invalid(format!(
                "policy is {}x{}, environment is {}x{}",
                policy.n_contexts(),
                policy.n_actions(),
                self.n_contexts(),
                self.n_actions()
            )));
        }
        Ok(())
    }

    /// The deterministic policy taking a least-cost action in every context
    /// (lowest index among ties), as a cost law.
    pub fn best_cost_law(&self) -> CostLaw {
        let atoms = self
            .cost
            .iter()
            .zip(&self.context_probs)
            .map(|(row, &p)| (row.iter().copied().fold(f64::INFINITY, f64::min), p))
            .collect();
        CostLaw::new(atoms).expect("validated context law")
    }

    /// Default constraint level: a quarter of the uniform-weight violation
    /// `L(best, ref)` between the least-cost law and the reference law, both
    /// represented by `n` exact quantile particles.
    pub fn default_kappa(&self, n: usize) -> Result<f64> {
        let best = self.best_cost_law().particles(n)?;
        let reference = exact_cost_law(self, &self.reference)?.particles(n)?;
        Ok(0.25 * exact_fsd(best.particles(), reference.particles())?)
    }

    /// Seeded random environment with uniform contexts: rewards are standard
    /// normal, costs are positively correlated with rewards (harmful answers
    /// tend to be rewarded) and shifted so the reference mean cost is near
    /// zero, reference logits have standard deviation 0.5. Entries are
    /// rounded to 4 decimals; `kappa` is [`ToyEnv::default_kappa`] at `n`
    /// particles, rounded to 9 significant digits.
    pub fn generate(seed: u64, n_x: usize, n_y: usize, n: usize) -> Result<Self> {
        if n_x == 0 || n_y == 0 {
            return Err(RadError::invalid("environment dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let r4 = |v: f64| (v * 1e4).round() / 1e4;
        let mut reward = vec![vec![0.0; n_y]; n_x];
        let mut cost = vec![vec![0.0; n_y]; n_x];
        let mut ref_logits = vec![vec![0.0; n_y]; n_x];
        for x in 0..n_x {
            for y in 0..n_y {
                let r = normal();
                reward[x][y] = r4(r);
                cost[x][y] = 0.6 * r + 0.8 * normal();
                ref_logits[x][y] = r4(0.5 * normal());
            }
        }
        let context_probs = vec![1.0 / n_x as f64; n_x];
        let mut env = Self::new(
            context_probs.clone(),
            reward.clone(),
            cost.clone(),
            ref_logits.clone(),
            None,
        )?;
        let shift = exact_cost_law(&env, &env.reference)?.mean();
        for row in &mut cost {
            for c in row.iter_mut() {
                *c = r4(*c - shift);
            }
        }
        env = Self::new(context_probs, reward, cost, ref_logits, None)?;
        env.kappa = Some(round_sig(env.default_kappa(n)?));
        Ok(env)
    }
}

/// One sampled interaction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Episode {
    pub context: usize,
    pub action: usize,
    pub reward: f64,
    pub cost: f64,
    pub logprob_theta: f64,
    pub logprob_ref: f64,
    pub prompt_group: usize,
}

/// Samples `prompts · k` episodes. Episode `e` belongs to group `e / k` and
/// draws two uniforms from substream `e` of `streams`: the first picks the
/// context (used by the first episode of each group, shared by the rest),
/// the second picks the action from `π(·|x)`.
pub fn sample_batch(
    env: &ToyEnv,
    policy: &SoftmaxPolicy,
    prompts: usize,
    k: usize,
    rloo: bool,
    streams: StepStreams,
) -> Result<Vec<Episode>> {
    env.check_policy(policy)?;
    if prompts == 0 || k == 0 {
        return Err(RadError::invalid("need at least one prompt and one sample"));
    }
    if rloo && k < 2 {
        return Err(RadError::invalid(format!(
            "leave-one-out baselines need k >= 2 samples per prompt, got {k}"
        )));
    }
    let probs = policy.probs_table();
    let log_theta: Vec<Vec<f64>> = (0..env.n_contexts())
        .map(|x| policy.log_probs(x))
        .collect::<Result<_>>()?;
    let log_ref: Vec<Vec<f64>> = (0..env.n_contexts())
        .map(|x| env.reference.log_probs(x))
        .collect::<Result<_>>()?;
    let mut episodes = Vec::with_capacity(prompts * k);
    let mut context = 0;
    for e in 0..prompts * k {
        let mut rng = streams.stream(e as u64);
        let u_ctx = uniform(&mut rng);
        let u_act = uniform(&mut rng);
        if e % k == 0 {
            context = categorical(&env.context_probs, u_ctx);
        }
        let x = context;
        let y = categorical(&probs[x], u_act);
        episodes.push(Episode {
            context: x,
            action: y,
            reward: env.reward[x][y],
            cost: env.cost[x][y],
            logprob_theta: log_theta[x][y],
            logprob_ref: log_ref[x][y],
            prompt_group: e / k,
        });
    }
    Ok(episodes)
}

/// `r − β (log π_θ − log π_ref)`.
pub fn kl_regularized_reward(ep: &Episode, beta: f64) -> f64 {
    ep.reward - beta * (ep.logprob_theta - ep.logprob_ref)
}

/// The law of `Cst[x][y]` under `x ~ p`, `y ~ π(·|x)`, duplicates merged.
pub fn exact_cost_law(env: &ToyEnv, policy: &SoftmaxPolicy) -> Result<CostLaw> {
    env.check_policy(policy)?;
    let mut atoms = Vec::with_capacity(env.n_contexts() * env.n_actions());
    for (x, pi) in policy.probs_table().iter().enumerate() {
        for (y, p) in pi.iter().enumerate() {
            atoms.push((env.cost[x][y], env.context_probs[x] * p));
        }
    }
    CostLaw::new(atoms)
}

/// `Σ p(x) π(y|x) R[x][y]`.
pub fn exact_expected_reward(env: &ToyEnv, policy: &SoftmaxPolicy) -> Result<f64> {
    expectation(env, policy, &env.reward)
}

/// `Σ p(x) π(y|x) Cst[x][y]`.
pub fn exact_expected_cost(env: &ToyEnv, policy: &SoftmaxPolicy) -> Result<f64> {
    expectation(env, policy, &env.cost)
}

fn expectation(env: &ToyEnv, policy: &SoftmaxPolicy, table: &Table) -> Result<f64> {
    env.check_policy(policy)?;
    Ok(policy
        .probs_table()
        .iter()
        .enumerate()
        .map(|(x, pi)| {
            env.context_probs[x] * pi.iter().zip(&table[x]).map(|(p, v)| p * v).sum::<f64>()
        })
        .sum())
}

/// `∇θ F(t)` for the cost CDF `F(t) = P(Cst ≤ t)`:
/// `Σ_x p(x) Σ_y 1[Cst[x][y] ≤ t] ∇θ π(y|x)`.
pub fn exact_cdf_gradient(env: &ToyEnv, policy: &SoftmaxPolicy, t: f64) -> Result<Table> {
    env.check_policy(policy)?;
    Ok(policy
        .probs_table()
        .iter()
        .enumerate()
        .map(|(x, pi)| {
            let ind: Vec<f64> = env.cost[x]
                .iter()
                .map(|&c| if c <= t { 1.0 } else { 0.0 })
                .collect();
            jacobian_apply(pi, &ind)
                .into_iter()
                .map(|v| env.context_probs[x] * v)
                .collect()
        })
        .collect())
}

/// `J(θ) = E[r] − β KL(π_θ ‖ π_ref)` and its exact gradient
/// `p(x) π(y'|x) (f(y') − Σ_y π(y|x) f(y))` with `f = R − β log(π_θ/π_ref)`.
pub fn exact_expected_rtilde(
    env: &ToyEnv,
    policy: &SoftmaxPolicy,
    beta: f64,
) -> Result<(f64, Table)> {
    env.check_policy(policy)?;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(env.n_contexts());
    for x in 0..env.n_contexts() {
        let pi = policy.action_probs(x)?;
        let lt = policy.log_probs(x)?;
        let lr = env.reference.log_probs(x)?;
        let f: Vec<f64> = (0..env.n_actions())
            .map(|y| env.reward[x][y] - beta * (lt[y] - lr[y]))
            .collect();
        let px = env.context_probs[x];
        value += px * pi.iter().zip(&f).map(|(p, v)| p * v).sum::<f64>();
        grad.push(
            jacobian_apply(&pi, &f)
                .into_iter()
                .map(|v| px * v)
                .collect(),
        );
    }
    Ok((value, grad))
}

/// Enumerated expectation of the score-function estimator
/// `f(x, y) ∇θ log π(y|x)` under `x ~ p`, `y ~ π(·|x)`.
pub fn expected_score_gradient(
    env: &ToyEnv,
    policy: &SoftmaxPolicy,
    f: impl Fn(usize, usize) -> f64,
) -> Result<Table> {
    env.check_policy(policy)?;
    let mut acc = vec![vec![0.0; env.n_actions()]; env.n_contexts()];
    for (x, pi) in policy.probs_table().iter().enumerate() {
        for (y, p) in pi.iter().enumerate() {
            policy.add_score(&mut acc, x, y, env.context_probs[x] * p * f(x, y))?;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::central_difference;
    use proptest::prelude::*;

    fn env_1x(costs: Vec<f64>) -> ToyEnv {
        let n = costs.len();
        ToyEnv::new(
            vec![1.0],
            vec![vec![0.0; n]],
            vec![costs],
            vec![vec![0.0; n]],
            None,
        )
        .unwrap()
    }

    fn max_abs_diff(a: &Table, b: &Table) -> f64 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn softmax_examples() {
        let p = SoftmaxPolicy::uniform(1, 4).unwrap();
        assert_eq!(p.action_probs(0).unwrap(), vec![0.25; 4]);
        let p = SoftmaxPolicy::new(vec![vec![7.5; 3]]).unwrap();
        for v in p.action_probs(0).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = SoftmaxPolicy::new(vec![vec![0.0, 3f64.ln()]]).unwrap();
        let pr = p.action_probs(0).unwrap();
        assert!((pr[0] - 0.25).abs() < 1e-15 && (pr[1] - 0.75).abs() < 1e-15);
        assert!((p.log_prob(0, 1).unwrap() - 0.75f64.ln()).abs() < 1e-15);
        assert!(p.log_prob(1, 0).is_err());
        assert!(p.log_prob(0, 2).is_err());
        assert!(SoftmaxPolicy::new(vec![vec![0.0, f64::NAN]]).is_err());
        assert!(SoftmaxPolicy::new(vec![vec![0.0, 1.0], vec![0.0]]).is_err());
    }

    #[test]
    fn env_validation() {
        let t = vec![vec![0.0; 2]; 2];
        assert!(ToyEnv::new(vec![0.5, 0.5], t.clone(), t.clone(), t.clone(), None).is_ok());
        assert!(ToyEnv::new(vec![0.5, 0.4], t.clone(), t.clone(), t.clone(), None).is_err());
        assert!(ToyEnv::new(
            vec![0.5, 0.5],
            t.clone(),
            vec![vec![0.0; 3]; 2],
            t.clone(),
            None
        )
        .is_err());
        assert!(ToyEnv::new(vec![1.0], t.clone(), t.clone(), t.clone(), None).is_err());
        assert!(ToyEnv::new(vec![0.5, 0.5], t.clone(), t.clone(), t, Some(-1.0)).is_err());
        let bad_key =
            r#"{"context_probs":[1],"reward":[[0]],"cost":[[0]],"ref_logits":[[0]],"extra":1}"#;
        assert!(matches!(
            ToyEnv::from_json(bad_key),
            Err(RadError::Parse(_))
        ));
        let ok = r#"{"context_probs":[1],"reward":[[0]],"cost":[[0]],"ref_logits":[[0]]}"#;
        assert!(ToyEnv::from_json(ok).unwrap().kappa().is_none());
    }

    #[test]
    fn json_round_trip() {
        let env = ToyEnv::generate(3, 3, 5, 16).unwrap();
        assert_eq!(ToyEnv::from_json(&env.to_json()).unwrap(), env);
    }

    #[test]
    fn sampling_examples() {
        let env = ToyEnv::generate(1, 3, 5, 16).unwrap();
        let p = env.reference().clone();
        let eps = sample_batch(&env, &p, 1, 2, true, StepStreams::new(9, 0)).unwrap();
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[0].context, eps[1].context);
        let batch = sample_batch(&env, &p, 8, 3, true, StepStreams::new(9, 4)).unwrap();
        assert_eq!(batch.len(), 24);
        for (e, ep) in batch.iter().enumerate() {
            assert_eq!(ep.prompt_group, e / 3);
            assert_eq!(ep.context, batch[3 * (e / 3)].context);
            assert_eq!(ep.logprob_theta, p.log_prob(ep.context, ep.action).unwrap());
            assert_eq!(ep.cost, env.cost()[ep.context][ep.action]);
        }
        assert_eq!(
            batch,
            sample_batch(&env, &p, 8, 3, true, StepStreams::new(9, 4)).unwrap()
        );
        assert!(sample_batch(&env, &p, 4, 1, true, StepStreams::new(9, 0)).is_err());
        assert!(sample_batch(&env, &p, 4, 1, false, StepStreams::new(9, 0)).is_ok());

        let single = ToyEnv::new(
            vec![1.0],
            vec![vec![2.0]],
            vec![vec![-1.0]],
            vec![vec![0.3]],
            None,
        )
        .unwrap();
        let eps = sample_batch(
            &single,
            single.reference(),
            5,
            2,
            true,
            StepStreams::new(0, 0),
        )
        .unwrap();
        assert!(eps
            .iter()
            .all(|e| e.context == 0 && e.action == 0 && e.reward == 2.0 && e.cost == -1.0));
    }

    #[test]
    fn kl_reward_examples() {
        let mut ep = Episode {
            context: 0,
            action: 0,
            reward: 1.0,
            cost: 0.0,
            logprob_theta: -1.0,
            logprob_ref: -1.0,
            prompt_group: 0,
        };
        assert_eq!(kl_regularized_reward(&ep, 0.1), 1.0);
        ep.logprob_theta = 1.0;
        assert!((kl_regularized_reward(&ep, 0.1) - 0.8).abs() < 1e-15);
        assert_eq!(kl_regularized_reward(&ep, 0.0), 1.0);
    }

    #[test]
    fn cost_law_examples() {
        let env = env_1x(vec![0.0, 1.0]);
        let law = exact_cost_law(&env, env.reference()).unwrap();
        assert_eq!(law.atoms(), &[(0.0, 0.5), (1.0, 0.5)]);

        let t = vec![vec![0.0; 2]; 2];
        let env = ToyEnv::new(
            vec![0.5, 0.5],
            t.clone(),
            vec![vec![0.0, 1.0], vec![2.0, 3.0]],
            t,
            None,
        )
        .unwrap();
        let law = exact_cost_law(&env, env.reference()).unwrap();
        assert_eq!(
            law.atoms(),
            &[(0.0, 0.25), (1.0, 0.25), (2.0, 0.25), (3.0, 0.25)]
        );

        let det = SoftmaxPolicy::new(vec![vec![-800.0, 0.0], vec![0.0, -800.0]]).unwrap();
        let law = exact_cost_law(&env, &det).unwrap();
        assert_eq!(law.atoms(), &[(1.0, 0.5), (2.0, 0.5)]);

        let dup = env_1x(vec![1.0, 1.0, 2.0]);
        let law = exact_cost_law(&dup, dup.reference()).unwrap();
        assert_eq!(law.atoms().len(), 2);
        assert!((law.atoms()[0].1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cdf_gradient_examples() {
        let env = env_1x(vec![0.0, 1.0]);
        let p = env.reference();
        assert_eq!(
            exact_cdf_gradient(&env, p, 0.5).unwrap(),
            vec![vec![0.25, -0.25]]
        );
        assert_eq!(
            exact_cdf_gradient(&env, p, -1.0).unwrap(),
            vec![vec![0.0, 0.0]]
        );
        let g = exact_cdf_gradient(&env, p, 1.0).unwrap();
        assert!(g[0].iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn rtilde_examples() {
        let env = ToyEnv::generate(5, 3, 5, 16).unwrap();
        let (v, _) = exact_expected_rtilde(&env, env.reference(), 0.7).unwrap();
        let plain = exact_expected_reward(&env, env.reference()).unwrap();
        assert!((v - plain).abs() < 1e-14);

        let single = ToyEnv::new(
            vec![1.0],
            vec![vec![2.5]],
            vec![vec![0.0]],
            vec![vec![0.0]],
            None,
        )
        .unwrap();
        assert_eq!(
            exact_expected_rtilde(&single, single.reference(), 0.1)
                .unwrap()
                .0,
            2.5
        );
    }

    #[test]
    fn rtilde_gradient_matches_finite_differences() {
        let env = ToyEnv::generate(11, 3, 4, 16).unwrap();
        let policy = ToyEnv::generate(12, 3, 4, 16).unwrap().reference().clone();
        let beta = 0.3;
        let (_, grad) = exact_expected_rtilde(&env, &policy, beta).unwrap();
        for x in 0..3 {
            for y in 0..4 {
                let f = |h: f64| {
                    let mut l = policy.logits().clone();
                    l[x][y] += h;
                    exact_expected_rtilde(&env, &SoftmaxPolicy::new(l).unwrap(), beta)
                        .unwrap()
                        .0
                };
                let fd = central_difference(f, 0.0, 1e-5);
                assert!(
                    (fd - grad[x][y]).abs() < 1e-6,
                    "({x},{y}): {fd} vs {}",
                    grad[x][y]
                );
            }
        }
    }

    #[test]
    fn score_identities() {
        let env = ToyEnv::generate(2, 3, 5, 16).unwrap();
        let policy = ToyEnv::generate(8, 3, 5, 16).unwrap().reference().clone();
        for &t in &[-1.0, -0.2, 0.0, 0.4, 1.3] {
            let est = expected_score_gradient(&env, &policy, |x, y| {
                if env.cost()[x][y] <= t {
                    1.0
                } else {
                    0.0
                }
            })
            .unwrap();
            let exact = exact_cdf_gradient(&env, &policy, t).unwrap();
            assert!(max_abs_diff(&est, &exact) < 1e-12);
        }
        let beta = 0.1;
        let lr = |x, y| env.reference().log_prob(x, y).unwrap();
        let lt = |x, y| policy.log_prob(x, y).unwrap();
        let est = expected_score_gradient(&env, &policy, |x, y| {
            env.reward()[x][y] - beta * (lt(x, y) - lr(x, y))
        })
        .unwrap();
        let (_, exact) = exact_expected_rtilde(&env, &policy, beta).unwrap();
        assert!(max_abs_diff(&est, &exact) < 1e-12);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = ToyEnv::generate(42, 3, 5, 16).unwrap();
        assert_eq!(a, ToyEnv::generate(42, 3, 5, 16).unwrap());
        assert_ne!(a, ToyEnv::generate(43, 3, 5, 16).unwrap());
        assert!(a.kappa().unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn shift_invariance(
            seed in 0u64..1000,
            shifts in proptest::collection::vec(-5.0f64..5.0, 3),
            t in -2.0f64..2.0,
        ) {
            let env = ToyEnv::generate(seed, 3, 5, 16).unwrap();
            let p = env.reference().clone();
            let shifted = SoftmaxPolicy::new(
                p.logits().iter().zip(&shifts).map(|(r, s)| r.iter().map(|v| v + s).collect()).collect(),
            ).unwrap();
            prop_assert!(max_abs_diff(&p.probs_table(), &shifted.probs_table()) < 1e-12);
            let (la, lb) = (exact_cost_law(&env, &p).unwrap(), exact_cost_law(&env, &shifted).unwrap());
            prop_assert_eq!(la.atoms().len(), lb.atoms().len());
            for (a, b) in la.atoms().iter().zip(lb.atoms()) {
                prop_assert_eq!(a.0, b.0);
                prop_assert!((a.1 - b.1).abs() < 1e-12);
            }
            let ga = exact_cdf_gradient(&env, &p, t).unwrap();
            prop_assert!(max_abs_diff(&ga, &exact_cdf_gradient(&env, &shifted, t).unwrap()) < 1e-12);
            for row in &ga {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
            let (va, gra) = exact_expected_rtilde(&env, &p, 0.2).unwrap();
            let (vb, grb) = exact_expected_rtilde(&env, &shifted, 0.2).unwrap();
            prop_assert!((va - vb).abs() < 1e-12);
            prop_assert!(max_abs_diff(&gra, &grb) < 1e-12);
        }

        #[test]
        fn law_mass_is_one(seed in 0u64..1000) {
            let env = ToyEnv::generate(seed, 3, 5, 16).unwrap();
            let law = exact_cost_law(&env, env.reference()).unwrap();
            let total: f64 = law.atoms().iter().map(|a| a.1).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
