//! Head-to-head comparison of two policies on shared prompts.
//!
//! A matchup samples `n_prompts` contexts once and draws both policies'
//! actions from the same uniform per prompt (common random numbers), so two
//! identical policies produce identical episodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distributions::CostSamples;
use crate::dominance::dominance_report;
use crate::error::{RadError, Result};
use crate::format::fmt_sig;
use crate::rng::{categorical, uniform, StepStreams};
use crate::spectra::Spectrum;
use crate::toyenv::{SoftmaxPolicy, ToyEnv};

/// Responses with cost at or below this value count as safe.
pub const SAFE_THRESHOLD: f64 = 0.0;

/// Fraction of costs `<= threshold`.
pub fn safe_proportion(costs: &[f64], threshold: f64) -> Result<f64> {
    if costs.is_empty() {
        return Err(RadError::invalid("safe proportion of an empty cost list"));
    }
    let safe = costs.iter().filter(|&&c| c <= threshold).count();
    Ok(safe as f64 / costs.len() as f64)
}

/// Fraction of pairs where blue's reward is strictly greater; ties are losses.
pub fn win_rate(blue: &[f64], red: &[f64]) -> Result<f64> {
    if blue.len() != red.len() || blue.is_empty() {
        return Err(RadError::invalid(format!(
            "win rate needs paired non-empty lists, got {} and {}",
            blue.len(),
            red.len()
        )));
    }
    let wins = blue.iter().zip(red).filter(|(b, r)| b > r).count();
    Ok(wins as f64 / blue.len() as f64)
}

/// Outcome of [`matchup`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchupResult {
    pub blue_safe_rate: f64,
    pub red_safe_rate: f64,
    pub blue_winrate: f64,
    /// `ρ_w(red) - ρ_w(blue)` per spectrum token; positive when blue is safer.
    pub dominance: BTreeMap<String, f64>,
    pub n_prompts: usize,
}

/// Paired rewards and costs of two policies on common prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedOutcomes {
    pub blue_rewards: Vec<f64>,
    pub red_rewards: Vec<f64>,
    pub blue_costs: Vec<f64>,
    pub red_costs: Vec<f64>,
}

/// Samples one response per policy for each of `n_prompts` prompts. Prompt
/// `p` uses substream `p` of step 0: the first uniform picks the context, the
/// second picks both actions.
pub fn paired_outcomes(
    env: &ToyEnv,
    blue: &SoftmaxPolicy,
    red: &SoftmaxPolicy,
    n_prompts: usize,
    seed: u64,
) -> Result<PairedOutcomes> {
    env.check_policy(blue)?;
    env.check_policy(red)?;
    let blue_probs = blue.probs_table();
    let red_probs = red.probs_table();
    let streams = StepStreams::new(seed, 0);
    let mut out = PairedOutcomes {
        blue_rewards: Vec::with_capacity(n_prompts),
        red_rewards: Vec::with_capacity(n_prompts),
        blue_costs: Vec::with_capacity(n_prompts),
        red_costs: Vec::with_capacity(n_prompts),
    };
    for p in 0..n_prompts {
        let mut rng = streams.stream(p as u64);
        let x = categorical(env.context_probs(), uniform(&mut rng));
        let u_act = uniform(&mut rng);
        let yb = categorical(&blue_probs[x], u_act);
        let yr = categorical(&red_probs[x], u_act);
        out.blue_rewards.push(env.reward()[x][yb]);
        out.red_rewards.push(env.reward()[x][yr]);
        out.blue_costs.push(env.cost()[x][yb]);
        out.red_costs.push(env.cost()[x][yr]);
    }
    Ok(out)
}

/// Compares `blue` against `red` on `n_prompts` common prompts. Dominance
/// entries use unnormalized (reporting) weights on `n_particles` particles per side.
pub fn matchup(
    env: &ToyEnv,
    blue: &SoftmaxPolicy,
    red: &SoftmaxPolicy,
    spectra: &[Spectrum],
    n_prompts: usize,
    n_particles: usize,
    seed: u64,
) -> Result<MatchupResult> {
    if n_particles == 0 || n_prompts < n_particles {
        return Err(RadError::invalid(format!(
            "matchup needs n_prompts >= n_particles >= 1, got {n_prompts} and {n_particles}"
        )));
    }
    let out = paired_outcomes(env, blue, red, n_prompts, seed)?;
    let blue_costs = CostSamples::new(out.blue_costs.clone())?;
    let red_costs = CostSamples::new(out.red_costs.clone())?;
    let mut dominance = BTreeMap::new();
    for spec in spectra {
        let report = dominance_report(&blue_costs, &red_costs, spec, n_particles, false)?;
        dominance.insert(spec.token().to_string(), report.difference);
    }
    Ok(MatchupResult {
        blue_safe_rate: safe_proportion(&out.blue_costs, SAFE_THRESHOLD)?,
        red_safe_rate: safe_proportion(&out.red_costs, SAFE_THRESHOLD)?,
        blue_winrate: win_rate(&out.blue_rewards, &out.red_rewards)?,
        dominance,
        n_prompts,
    })
}

/// One cell of the win-rate breakdown by the pair (blue safe, red safe).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyCell {
    pub blue_safe: bool,
    pub red_safe: bool,
    /// Fraction of all prompts that fall in this cell.
    pub share: f64,
    /// Blue win rate among prompts in this cell; `None` when the cell is empty.
    pub blue_winrate: Option<f64>,
}

/// Column names matching [`safety_breakdown_csv_row`].
pub const SAFETY_BREAKDOWN_HEADER: &str = "share_ss,share_su,share_us,share_uu,\
win_ss,win_su,win_us,win_uu";

/// Splits the paired prompts by safety outcome and reports the blue win rate
/// inside each cell. Cells are ordered (safe,safe), (safe,unsafe),
/// (unsafe,safe), (unsafe,unsafe) with blue first.
pub fn safety_breakdown(out: &PairedOutcomes, threshold: f64) -> Result<[SafetyCell; 4]> {
    let n = out.blue_costs.len();
    if n == 0
        || [
            out.red_costs.len(),
            out.blue_rewards.len(),
            out.red_rewards.len(),
        ]
        .iter()
        .any(|&m| m != n)
    {
        return Err(RadError::invalid(
            "safety breakdown needs equal non-empty outcome lists",
        ));
    }
    let mut counts = [(0usize, 0usize); 4];
    for p in 0..n {
        let b = out.blue_costs[p] > threshold;
        let r = out.red_costs[p] > threshold;
        let cell = 2 * usize::from(b) + usize::from(r);
        counts[cell].0 += 1;
        if out.blue_rewards[p] > out.red_rewards[p] {
            counts[cell].1 += 1;
        }
    }
    Ok(std::array::from_fn(|c| {
        let (size, wins) = counts[c];
        SafetyCell {
            blue_safe: c < 2,
            red_safe: c % 2 == 0,
            share: size as f64 / n as f64,
            blue_winrate: (size > 0).then(|| wins as f64 / size as f64),
        }
    }))
}

/// CSV row for [`SAFETY_BREAKDOWN_HEADER`]; empty cells leave the win column blank.
pub fn safety_breakdown_csv_row(cells: &[SafetyCell; 4]) -> String {
    let shares = cells.iter().map(|c| fmt_sig(c.share));
    let wins = cells
        .iter()
        .map(|c| c.blue_winrate.map(fmt_sig).unwrap_or_default());
    shares.chain(wins).collect::<Vec<_>>().join(",")
}
