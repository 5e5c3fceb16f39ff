//! Empirical quantile machinery.
//!
//! Cost distributions are represented by quantile particles: the values of
//! the (left-continuous, nearest-rank) quantile function at a fixed grid of
//! levels. With `n` levels placed at the midpoints `(2i-1)/(2n)` the uniform
//! measure over the particles is a midpoint Riemann discretization of the
//! quantile function, and `n == sample count` reproduces the sorted sample
//! exactly.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};

/// Slack used when a floating-point rank or cumulative mass lands within
/// rounding distance of an exact boundary.
const RANK_EPS: f64 = 4.0 * f64::EPSILON;
const MASS_EPS: f64 = 1e-12;

/// A non-empty, finite, ascending sample of costs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSamples {
    values: Vec<f64>,
}

impl CostSamples {
    /// Sorts the input (stable) after rejecting empty or non-finite data.
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(RadError::invalid("cost samples must be non-empty"));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(RadError::invalid(format!("non-finite cost sample {bad}")));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        Ok(Self { values })
    }

    /// Parses the plain-text sample format: one decimal per line, blank lines
    /// ignored, anything else is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|_| {
                RadError::Parse(format!(
                    "line {}: not a decimal number: {line:?}",
                    lineno + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(RadError::Parse(format!(
                    "line {}: non-finite value {line:?}",
                    lineno + 1
                )));
            }
            values.push(v);
        }
        if values.is_empty() {
            return Err(RadError::Parse("no cost samples found".into()));
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Strictly increasing quantile levels inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevels {
    levels: Vec<f64>,
}

impl QuantileLevels {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(RadError::invalid("quantile levels must be non-empty"));
        }
        if levels.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(RadError::invalid("quantile levels must lie in (0, 1)"));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RadError::invalid(
                "quantile levels must be strictly increasing",
            ));
        }
        Ok(Self { levels })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Midpoint levels `(2i - 1) / (2n)`, `i = 1..=n`.
pub fn make_levels(n: usize) -> Result<QuantileLevels> {
    if n == 0 {
        return Err(RadError::invalid(
            "number of quantile levels must be positive",
        ));
    }
    let denom = 2.0 * n as f64;
    let levels = (1..=n).map(|i| (2 * i - 1) as f64 / denom).collect();
    Ok(QuantileLevels { levels })
}

/// Quantile particles `q_i = Q(alpha_i)` of a cost distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalCostDistribution {
    particles: Vec<f64>,
    levels: QuantileLevels,
    source_size: usize,
}

impl EmpiricalCostDistribution {
    /// Builds a distribution from explicit particles; they must be sorted and
    /// match the number of levels.
    pub fn from_particles(
        particles: Vec<f64>,
        levels: QuantileLevels,
        source_size: usize,
    ) -> Result<Self> {
        if particles.len() != levels.len() {
            return Err(RadError::invalid(format!(
                "{} particles for {} levels",
                particles.len(),
                levels.len()
            )));
        }
        if particles.iter().any(|p| !p.is_finite()) {
            return Err(RadError::invalid("particles must be finite"));
        }
        if particles.windows(2).any(|w| w[0] > w[1]) {
            return Err(RadError::invalid("particles must be non-decreasing"));
        }
        Ok(Self {
            particles,
            levels,
            source_size,
        })
    }

    pub fn particles(&self) -> &[f64] {
        &self.particles
    }

    pub fn levels(&self) -> &QuantileLevels {
        &self.levels
    }

    pub fn source_size(&self) -> usize {
        self.source_size
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub(crate) fn same_levels(&self, other: &Self) -> bool {
        self.levels == other.levels
    }
}

fn check_level(q: f64) -> Result<()> {
    if q > 0.0 && q <= 1.0 {
        Ok(())
    } else {
        Err(RadError::invalid(format!(
            "quantile level {q} outside (0, 1]"
        )))
    }
}

/// 1-based nearest rank `ceil(q * m)`, treating products within rounding
/// distance of an integer as that integer.
fn nearest_rank(q: f64, m: usize) -> usize {
    let x = q * m as f64;
    let r = x.round();
    let rank = if (x - r).abs() <= RANK_EPS * x.max(1.0) {
        r
    } else {
        x.ceil()
    };
    (rank as usize).clamp(1, m)
}

/// Left-continuous nearest-rank quantile: the sorted sample at rank `ceil(q·M)`.
pub fn empirical_quantile(samples: &CostSamples, q: f64) -> Result<f64> {
    check_level(q)?;
    let v = samples.values();
    Ok(v[nearest_rank(q, v.len()) - 1])
}

/// Particles at the midpoint levels of size `n`.
pub fn quantile_particles(samples: &CostSamples, n: usize) -> Result<EmpiricalCostDistribution> {
    let levels = make_levels(n)?;
    particles_at(samples, levels)
}

/// Particles at arbitrary levels.
pub fn particles_at(
    samples: &CostSamples,
    levels: QuantileLevels,
) -> Result<EmpiricalCostDistribution> {
    let particles = levels
        .as_slice()
        .iter()
        .map(|&q| empirical_quantile(samples, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmpiricalCostDistribution {
        particles,
        levels,
        source_size: samples.len(),
    })
}

/// Fraction of samples `<= t`.
pub fn empirical_cdf(samples: &CostSamples, t: f64) -> f64 {
    let v = samples.values();
    let count = v.partition_point(|&x| x <= t);
    count as f64 / v.len() as f64
}

/// A finitely supported cost law: distinct ascending atoms with probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostLaw {
    atoms: Vec<(f64, f64)>,
}

impl CostLaw {
    /// Merges duplicate values (summing mass), drops zero-mass atoms and
    /// sorts. Total mass must be 1 within `1e-9`.
    pub fn new(mut atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms
            .iter()
            .any(|&(c, p)| !c.is_finite() || !p.is_finite() || p < 0.0)
        {
            return Err(RadError::invalid(
                "cost law atoms must be finite with p >= 0",
            ));
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (c, p) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += p,
                _ => merged.push((c, p)),
            }
        }
        merged.retain(|&(_, p)| p > 0.0);
        let total: f64 = merged.iter().map(|a| a.1).sum();
        if merged.is_empty() || (total - 1.0).abs() > 1e-9 {
            return Err(RadError::invalid(format!("cost law mass {total} != 1")));
        }
        Ok(Self { atoms: merged })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|&(c, p)| c * p).sum()
    }

    pub fn cdf(&self, t: f64) -> f64 {
        self.atoms
            .iter()
            .take_while(|a| a.0 <= t)
            .map(|a| a.1)
            .sum()
    }

    /// `min { c : F(c) >= q }`.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        check_level(q)?;
        let mut acc = 0.0;
        for &(c, p) in &self.atoms {
            acc += p;
            if acc >= q - MASS_EPS {
                return Ok(c);
            }
        }
        Ok(self.atoms[self.atoms.len() - 1].0)
    }

    /// Exact quantile particles of the law at the midpoint levels of size `n`.
    pub fn particles(&self, n: usize) -> Result<EmpiricalCostDistribution> {
        let levels = make_levels(n)?;
        let particles = levels
            .as_slice()
            .iter()
            .map(|&q| self.quantile(q))
            .collect::<Result<Vec<_>>>()?;
        Ok(EmpiricalCostDistribution {
            particles,
            levels,
            source_size: self.atoms.len(),
        })
    }
}
