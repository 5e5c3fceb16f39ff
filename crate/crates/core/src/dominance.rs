//! Quantile-weighted FSD violations and dominance differences.
//!
//! With particles `X_i`, `Y_i` at shared levels and weights `w_i`,
//!
//! ```text
//! L_w(X, Y) = (1/N) Σ w_i (Y_i - X_i)₊
//! L_w(X, Y) - L_w(Y, X) = ρ_w(Y) - ρ_w(X)
//! ```
//!
//! so the forward violation upper-bounds the spectral risk gap and the
//! reverse violation lower-bounds it. All values here use the exact
//! quantile gaps; entropic values are only used for gradients.

use serde::Serialize;

use crate::distributions::{quantile_particles, CostSamples, EmpiricalCostDistribution};
use crate::error::{RadError, Result};
use crate::spectra::{discretize_weights, spectral_risk, DiscreteWeights, Spectrum};

fn check_aligned(
    x: &EmpiricalCostDistribution,
    y: &EmpiricalCostDistribution,
    w: Option<&DiscreteWeights>,
) -> Result<()> {
    if !x.same_levels(y) {
        return Err(RadError::invalid(format!(
            "distributions use different quantile levels ({} vs {} particles)",
            x.len(),
            y.len()
        )));
    }
    if let Some(w) = w {
        if w.len() != x.len() {
            return Err(RadError::invalid(format!(
                "{} weights for {} particles",
                w.len(),
                x.len()
            )));
        }
    }
    Ok(())
}

/// Weighted FSD violation `L_w(X, Y)`: how far `Y`'s quantiles sit above `X`'s.
pub fn fsd_loss(
    x: &EmpiricalCostDistribution,
    y: &EmpiricalCostDistribution,
    w: &DiscreteWeights,
) -> Result<f64> {
    check_aligned(x, y, Some(w))?;
    let n = x.len() as f64;
    Ok(x.particles()
        .iter()
        .zip(y.particles())
        .zip(w.as_slice())
        .map(|((xi, yi), wi)| wi * (yi - xi).max(0.0))
        .sum::<f64>()
        / n)
}

/// `L_w(X, Y) - L_w(Y, X)`.
pub fn dominance_difference(
    x: &EmpiricalCostDistribution,
    y: &EmpiricalCostDistribution,
    w: &DiscreteWeights,
) -> Result<f64> {
    Ok(fsd_loss(x, y, w)? - fsd_loss(y, x, w)?)
}

/// Whether `Y` weakly dominates `X` at every level: `Y_i >= X_i`.
pub fn fsd_dominates(y: &EmpiricalCostDistribution, x: &EmpiricalCostDistribution) -> Result<bool> {
    check_aligned(x, y, None)?;
    Ok(y.particles()
        .iter()
        .zip(x.particles())
        .all(|(yi, xi)| yi >= xi))
}

/// Forward/reverse violations and spectral risks of two sample sets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceReport {
    pub forward_loss: f64,
    pub reverse_loss: f64,
    pub difference: f64,
    pub rho_x: f64,
    pub rho_y: f64,
    pub spectrum: String,
    pub n_particles: usize,
}

/// Builds `n` particles per side and compares them under `spec`.
pub fn dominance_report(
    x: &CostSamples,
    y: &CostSamples,
    spec: &Spectrum,
    n: usize,
    normalize: bool,
) -> Result<DominanceReport> {
    let xd = quantile_particles(x, n)?;
    let yd = quantile_particles(y, n)?;
    report_for(&xd, &yd, spec, normalize)
}

/// [`dominance_report`] for particles that are already built.
pub fn report_for(
    x: &EmpiricalCostDistribution,
    y: &EmpiricalCostDistribution,
    spec: &Spectrum,
    normalize: bool,
) -> Result<DominanceReport> {
    check_aligned(x, y, None)?;
    let w = discretize_weights(spec, x.levels(), normalize)?;
    let forward_loss = fsd_loss(x, y, &w)?;
    let reverse_loss = fsd_loss(y, x, &w)?;
    Ok(DominanceReport {
        forward_loss,
        reverse_loss,
        difference: forward_loss - reverse_loss,
        rho_x: spectral_risk(x, &w)?,
        rho_y: spectral_risk(y, &w)?,
        spectrum: spec.token().to_string(),
        n_particles: x.len(),
    })
}
