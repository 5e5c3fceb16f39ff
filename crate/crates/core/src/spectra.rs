//! Quantile weight functions `w(q)` and spectral risk `ρ_w = ∫ w(q) Q(q) dq`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{EmpiricalCostDistribution, QuantileLevels};
use crate::error::{RadError, Result};

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_BANDWIDTH: f64 = 0.1;
pub const DEFAULT_WANG_LAMBDA: f64 = 0.7;
pub const DEFAULT_EXPONENTIAL_LAMBDA: f64 = 3.0;
pub const DEFAULT_POWER_LAMBDA: f64 = 2.0;

/// Selection tokens accepted on the command line and in configs.
pub const SPECTRUM_TOKENS: [&str; 7] = [
    "mean",
    "var",
    "cvar",
    "linear",
    "exponential",
    "power",
    "wang",
];

/// A risk spectrum. `lambda` is the risk-aversion parameter of the
/// parametric families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Spectrum {
    Mean,
    /// Dirac at `alpha`, smoothed by a Gaussian of width `bandwidth`.
    Var {
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default = "default_bandwidth")]
        bandwidth: f64,
    },
    Cvar {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Linear,
    Exponential {
        #[serde(default = "default_exponential_lambda")]
        lambda: f64,
    },
    Power {
        #[serde(default = "default_power_lambda")]
        lambda: f64,
    },
    Wang {
        #[serde(default = "default_wang_lambda")]
        lambda: f64,
    },
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}
fn default_exponential_lambda() -> f64 {
    DEFAULT_EXPONENTIAL_LAMBDA
}
fn default_power_lambda() -> f64 {
    DEFAULT_POWER_LAMBDA
}
fn default_wang_lambda() -> f64 {
    DEFAULT_WANG_LAMBDA
}

impl Spectrum {
    /// Spectrum for a token with the default parameters.
    pub fn from_token(token: &str) -> Result<Self> {
        Ok(match token {
            "mean" => Spectrum::Mean,
            "var" => Spectrum::Var {
                alpha: DEFAULT_ALPHA,
                bandwidth: DEFAULT_BANDWIDTH,
            },
            "cvar" => Spectrum::Cvar {
                alpha: DEFAULT_ALPHA,
            },
            "linear" => Spectrum::Linear,
            "exponential" => Spectrum::Exponential {
                lambda: DEFAULT_EXPONENTIAL_LAMBDA,
            },
            "power" => Spectrum::Power {
                lambda: DEFAULT_POWER_LAMBDA,
            },
            "wang" => Spectrum::Wang {
                lambda: DEFAULT_WANG_LAMBDA,
            },
            other => {
                return Err(RadError::invalid(format!(
                    "unknown spectrum {other:?}; expected one of {}",
                    SPECTRUM_TOKENS.join(", ")
                )))
            }
        })
    }

    /// All seven spectra with default parameters.
    pub fn all_defaults() -> Vec<Spectrum> {
        SPECTRUM_TOKENS
            .iter()
            .map(|t| Spectrum::from_token(t).expect("known token"))
            .collect()
    }

    pub fn token(&self) -> &'static str {
        match self {
            Spectrum::Mean => "mean",
            Spectrum::Var { .. } => "var",
            Spectrum::Cvar { .. } => "cvar",
            Spectrum::Linear => "linear",
            Spectrum::Exponential { .. } => "exponential",
            Spectrum::Power { .. } => "power",
            Spectrum::Wang { .. } => "wang",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let alpha_ok = |a: f64| a > 0.0 && a < 1.0;
        let positive = |x: f64| x > 0.0 && x.is_finite();
        let ok = match *self {
            Spectrum::Mean | Spectrum::Linear => true,
            Spectrum::Var { alpha, bandwidth } => alpha_ok(alpha) && positive(bandwidth),
            Spectrum::Cvar { alpha } => alpha_ok(alpha),
            Spectrum::Exponential { lambda }
            | Spectrum::Power { lambda }
            | Spectrum::Wang { lambda } => positive(lambda),
        };
        if ok {
            Ok(())
        } else {
            Err(RadError::invalid(format!(
                "invalid spectrum parameters: {self:?}"
            )))
        }
    }

    /// Whether `w` is non-decreasing in `q`.
    pub fn is_monotone(&self) -> bool {
        !matches!(self, Spectrum::Var { .. })
    }
}

impl FromStr for Spectrum {
    type Err = RadError;

    fn from_str(s: &str) -> Result<Self> {
        Spectrum::from_token(s)
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

// Acklam's rational approximation, relative error ~1.2e-9 before refinement.
const A: [f64; 6] = [
    -3.969683028665376e+01,
    2.209460984245205e+02,
    -2.759285104469687e+02,
    1.383577518672690e+02,
    -3.066479806614716e+01,
    2.506628277459239e+00,
];
const B: [f64; 5] = [
    -5.447609879822406e+01,
    1.615858368580409e+02,
    -1.556989798598866e+02,
    6.680131188771972e+01,
    -1.328068155288572e+01,
];
const C: [f64; 6] = [
    -7.784894002430293e-03,
    -3.223964580411365e-01,
    -2.400758277161838e+00,
    -2.549732539343734e+00,
    4.374664141464968e+00,
    2.938163982698783e+00,
];
const D: [f64; 4] = [
    7.784695709041462e-03,
    3.224671290700398e-01,
    2.445134137142996e+00,
    3.754408661907416e+00,
];

fn acklam_lower(p: f64) -> f64 {
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Inverse standard normal CDF: rational approximation plus one Newton step.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(RadError::invalid(format!("probability {p} outside (0, 1)")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work in the lower tail where Φ(z) - p does not cancel.
    let (pl, sign) = if p > 0.5 { (1.0 - p, -1.0) } else { (p, 1.0) };
    let z0 = acklam_lower(pl);
    let z = z0 - (normal_cdf(z0) - pl) / normal_pdf(z0);
    Ok(sign * z)
}

/// `w(q)` for `q` in `(0, 1)`.
pub fn weight(spec: &Spectrum, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(RadError::invalid(format!(
            "quantile level {q} outside (0, 1)"
        )));
    }
    spec.validate()?;
    Ok(weight_unchecked(spec, q))
}

fn weight_unchecked(spec: &Spectrum, q: f64) -> f64 {
    match *spec {
        Spectrum::Mean => 1.0,
        Spectrum::Var { alpha, bandwidth } => {
            let d = (q - alpha) / bandwidth;
            (-0.5 * d * d).exp() / (bandwidth * (2.0 * PI).sqrt())
        }
        Spectrum::Cvar { alpha } => {
            if q >= alpha {
                1.0 / (1.0 - alpha)
            } else {
                0.0
            }
        }
        Spectrum::Linear => 2.0 * q,
        Spectrum::Exponential { lambda } => lambda * (lambda * q).exp() / lambda.exp_m1(),
        Spectrum::Power { lambda } => (1.0 + lambda) * q.powf(lambda),
        Spectrum::Wang { lambda } => {
            let z = normal_quantile(q).expect("q checked in (0, 1)");
            normal_cdf(z + lambda) / (1.0 - normal_cdf(lambda))
        }
    }
}

/// Weights `w_i` aligned with a set of quantile levels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteWeights {
    weights: Vec<f64>,
    normalized: bool,
}

impl DiscreteWeights {
    pub fn new(weights: Vec<f64>, normalized: bool) -> Result<Self> {
        if weights.is_empty() {
            return Err(RadError::invalid("weights must be non-empty"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(RadError::invalid("weights must be finite and non-negative"));
        }
        if normalized {
            let m = weights.iter().sum::<f64>() / weights.len() as f64;
            if (m - 1.0).abs() > 1e-12 {
                return Err(RadError::invalid(format!(
                    "normalized weights average {m}, expected 1"
                )));
            }
        }
        Ok(Self {
            weights,
            normalized,
        })
    }

    /// The Mean spectrum: all ones.
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0; n],
            normalized: true,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Evaluates `w` at each level, optionally rescaling to `(1/N) Σ w_i = 1`.
pub fn discretize_weights(
    spec: &Spectrum,
    levels: &QuantileLevels,
    normalize: bool,
) -> Result<DiscreteWeights> {
    spec.validate()?;
    let mut weights: Vec<f64> = levels
        .as_slice()
        .iter()
        .map(|&q| weight_unchecked(spec, q))
        .collect();
    let sum: f64 = weights.iter().sum();
    if !(sum > 0.0) {
        return Err(RadError::DegenerateSpectrum(format!(
            "{spec:?} has zero weight at all {} levels",
            levels.len()
        )));
    }
    if normalize {
        let scale = weights.len() as f64 / sum;
        weights.iter_mut().for_each(|w| *w *= scale);
    }
    Ok(DiscreteWeights {
        weights,
        normalized: normalize,
    })
}

/// `ρ_w ≈ (1/N) Σ w_i q_i`.
pub fn spectral_risk(dist: &EmpiricalCostDistribution, w: &DiscreteWeights) -> Result<f64> {
    if dist.len() != w.len() {
        return Err(RadError::invalid(format!(
            "{} particles but {} weights",
            dist.len(),
            w.len()
        )));
    }
    let n = dist.len() as f64;
    Ok(dist
        .particles()
        .iter()
        .zip(w.as_slice())
        .map(|(q, w)| q * w)
        .sum::<f64>()
        / n)
}
