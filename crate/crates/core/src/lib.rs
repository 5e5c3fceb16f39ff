//! Dominance-constrained policy optimization.
//!
//! Cost distributions are represented by quantile particles; the FSD
//! violation between two of them is an optimal transport problem under the
//! asymmetric cost `(y - x)₊`, solved with entropic regularization to get
//! particle gradients. Quantile-weighted violations bound differences of
//! spectral risk measures, and a Lagrangian REINFORCE trainer enforces the
//! dominance constraint on a tabular contextual bandit with exact oracles.

pub mod checks;
pub mod distributions;
pub mod dominance;
pub mod error;
pub mod evaluation;
pub mod format;
pub mod oracle;
pub mod rng;
pub mod spectra;
pub mod toyenv;
pub mod trainer;
pub mod transport;

pub use distributions::{
    empirical_cdf, empirical_quantile, make_levels, quantile_particles, CostLaw, CostSamples,
    EmpiricalCostDistribution, QuantileLevels,
};
pub use dominance::{
    dominance_difference, dominance_report, fsd_dominates, fsd_loss, report_for, DominanceReport,
};
pub use error::{RadError, Result};
pub use evaluation::{
    matchup, safe_proportion, safety_breakdown, win_rate, MatchupResult, SafetyCell,
};
pub use spectra::{discretize_weights, spectral_risk, weight, DiscreteWeights, Spectrum};
pub use toyenv::{
    exact_cdf_gradient, exact_cost_law, exact_expected_cost, exact_expected_reward,
    exact_expected_rtilde, kl_regularized_reward, sample_batch, Episode, SoftmaxPolicy, Table,
    ToyEnv,
};
pub use trainer::{
    dual_update, estimate_ref_quantiles, history_csv, rad_score, rad_step, rloo_advantages,
    safe_rlhf_step, train, HistoryRecord, Mode, PolicyState, RadConfig, RefQuantileSource,
    RunContext, TrainerState,
};
pub use transport::{
    entropic_value, exact_fsd, fsd_cost_matrix, particle_gradient, plan_cost, sinkhorn, CostMatrix,
    TransportPlan,
};
