//! Built-in invariant suite.
//!
//! Every property is checked on randomized instances drawn from a fixed
//! internal seed, so a pristine build always produces the same verdicts.
//! [`CheckHooks`] lets tests substitute a primitive to confirm that the
//! corresponding check fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{
    empirical_cdf, empirical_quantile, make_levels, quantile_particles, CostSamples,
    EmpiricalCostDistribution,
};
use crate::dominance::{fsd_dominates, fsd_loss};
use crate::evaluation::{matchup, paired_outcomes, safe_proportion};
use crate::oracle;
use crate::rng::StepStreams;
use crate::spectra::{
    discretize_weights, normal_cdf, normal_quantile, spectral_risk, weight, DiscreteWeights,
    Spectrum,
};
use crate::toyenv::{
    exact_cdf_gradient, exact_cost_law, exact_expected_cost, exact_expected_reward,
    exact_expected_rtilde, expected_score_gradient, sample_batch, SoftmaxPolicy, Table, ToyEnv,
};
use crate::trainer::{dual_update, rad_score, train, Mode, RadConfig, RunContext};
use crate::transport::{
    entropic_value, exact_fsd, particle_gradient, plan_cost, sinkhorn, solve_fsd, CostMatrix,
};

/// Seed of every randomized instance in the suite.
pub const CHECK_SEED: u64 = 0x5eed_cafe;

/// Names of the checks, in execution order.
pub const MANIFEST: [&str; 32] = [
    "quantile-monotonicity",
    "galois-connection",
    "full-particle-identity",
    "level-mass",
    "normal-cdf-accuracy",
    "normal-quantile-roundtrip",
    "spectrum-normalization",
    "spectrum-monotonicity",
    "cvar-cross-check",
    "translation-equivariance",
    "marginal-feasibility",
    "symmetric-plan",
    "ot-convergence",
    "particle-gradient-fd",
    "w1-decomposition",
    "proposition-identity",
    "sandwich-bounds",
    "corollary-bound",
    "zero-loss-characterization",
    "transport-consistency",
    "cdf-estimator-identity",
    "cdf-estimator-monte-carlo",
    "softmax-shift-invariance",
    "cost-law-mass",
    "score-gradient-identity",
    "constraint-term-identity",
    "rloo-unbiasedness",
    "dual-nonnegativity",
    "particle-gradient-sign",
    "trainer-determinism",
    "safe-rate-monotonicity",
    "matchup-consistency",
];

/// Replaceable primitives.
#[derive(Debug, Clone, Copy)]
pub struct CheckHooks {
    pub normal_cdf: fn(f64) -> f64,
}

impl Default for CheckHooks {
    fn default() -> Self {
        Self { normal_cdf }
    }
}

/// Verdict of one check; `detail` is empty on success.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Verdict = std::result::Result<(), String>;

/// Runs one named check. `None` for names not in [`MANIFEST`].
pub fn run_check(name: &str, hooks: &CheckHooks) -> Option<CheckOutcome> {
    let idx = MANIFEST.iter().position(|&n| n == name)?;
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED.wrapping_add(idx as u64));
    let verdict = match name {
        "quantile-monotonicity" => quantile_monotonicity(&mut rng),
        "galois-connection" => galois_connection(&mut rng),
        "full-particle-identity" => full_particle_identity(&mut rng),
        "level-mass" => level_mass(),
        "normal-cdf-accuracy" => normal_cdf_accuracy(hooks),
        "normal-quantile-roundtrip" => normal_quantile_roundtrip(),
        "spectrum-normalization" => spectrum_normalization(),
        "spectrum-monotonicity" => spectrum_monotonicity(&mut rng),
        "cvar-cross-check" => cvar_cross_check(&mut rng),
        "translation-equivariance" => translation_equivariance(&mut rng),
        "marginal-feasibility" => marginal_feasibility(&mut rng),
        "symmetric-plan" => symmetric_plan(&mut rng),
        "ot-convergence" => ot_convergence(&mut rng),
        "particle-gradient-fd" => particle_gradient_fd(&mut rng),
        "w1-decomposition" => w1_decomposition(&mut rng),
        "proposition-identity" => proposition_identity(&mut rng),
        "sandwich-bounds" => sandwich_bounds(&mut rng),
        "corollary-bound" => corollary_bound(&mut rng),
        "zero-loss-characterization" => zero_loss_characterization(&mut rng),
        "transport-consistency" => transport_consistency(&mut rng),
        "cdf-estimator-identity" => cdf_estimator_identity(&mut rng),
        "cdf-estimator-monte-carlo" => cdf_estimator_monte_carlo(),
        "softmax-shift-invariance" => softmax_shift_invariance(&mut rng),
        "cost-law-mass" => cost_law_mass(&mut rng),
        "score-gradient-identity" => score_gradient_identity(&mut rng),
        "constraint-term-identity" => constraint_term_identity(&mut rng),
        "rloo-unbiasedness" => rloo_unbiasedness(&mut rng),
        "dual-nonnegativity" => dual_nonnegativity(&mut rng),
        "particle-gradient-sign" => particle_gradient_sign(),
        "trainer-determinism" => trainer_determinism(),
        "safe-rate-monotonicity" => safe_rate_monotonicity(&mut rng),
        "matchup-consistency" => matchup_consistency(),
        _ => unreachable!("every manifest entry is dispatched"),
    };
    let (passed, detail) = match verdict {
        Ok(()) => (true, String::new()),
        Err(e) => (false, e),
    };
    Some(CheckOutcome {
        name: MANIFEST[idx],
        passed,
        detail,
    })
}

/// Runs the whole manifest.
pub fn run_checks(hooks: &CheckHooks) -> Vec<CheckOutcome> {
    MANIFEST
        .iter()
        .map(|name| run_check(name, hooks).expect("manifest names are known"))
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Verdict {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: crate::error::Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn sorted_values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut v = random_values(rng, n, lo, hi);
    v.sort_by(f64::total_cmp);
    v
}

/// Samples on a grid of step 0.25, so ties are common.
fn tied_samples(rng: &mut ChaCha8Rng, n: usize) -> CostSamples {
    let v = (0..n)
        .map(|_| (rng.random_range(-3.0..3.0f64) * 4.0).round() / 4.0)
        .collect();
    CostSamples::new(v).expect("non-empty finite samples")
}

fn dist(particles: Vec<f64>) -> EmpiricalCostDistribution {
    let n = particles.len();
    EmpiricalCostDistribution::from_particles(particles, make_levels(n).expect("n >= 1"), n)
        .expect("sorted finite particles")
}

fn random_policy(rng: &mut ChaCha8Rng, n_x: usize, n_y: usize) -> SoftmaxPolicy {
    let logits = (0..n_x)
        .map(|_| random_values(rng, n_y, -2.0, 2.0))
        .collect();
    SoftmaxPolicy::new(logits).expect("finite logits")
}

fn max_abs_diff(a: &Table, b: &Table) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max)
}

fn check_env() -> ToyEnv {
    ToyEnv::generate(CHECK_SEED, 3, 5, 16).expect("generator parameters are valid")
}

fn quantile_monotonicity(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let s = tied_samples(rng, n);
        let mut qs = random_values(rng, 20, 1e-9, 1.0);
        qs.sort_by(f64::total_cmp);
        let vals: Vec<f64> = qs
            .iter()
            .map(|&q| empirical_quantile(&s, q))
            .collect::<crate::error::Result<_>>()
            .map_err(|e| e.to_string())?;
        ensure(vals.windows(2).all(|w| w[0] <= w[1]), || {
            format!("quantiles {vals:?} not monotone at levels {qs:?}")
        })?;
    }
    Ok(())
}

fn galois_connection(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..50 {
        let n = rng.random_range(1..40);
        let s = tied_samples(rng, n);
        for q in random_values(rng, 20, 1e-9, 1.0).into_iter().chain([1.0]) {
            let v = lib(empirical_quantile(&s, q))?;
            ensure(empirical_cdf(&s, v) >= q, || format!("F(Q({q})) < {q}"))?;
        }
    }
    Ok(())
}

fn full_particle_identity(rng: &mut ChaCha8Rng) -> Verdict {
    for m in 1..=64 {
        let s = tied_samples(rng, m);
        let mut sorted = s.values().to_vec();
        sorted.sort_by(f64::total_cmp);
        let d = lib(quantile_particles(&s, m))?;
        ensure(d.particles() == sorted.as_slice(), || {
            format!("{m} particles of {m} samples differ from the sorted sample")
        })?;
    }
    Ok(())
}

fn level_mass() -> Verdict {
    for n in [1usize, 2, 3, 7, 16, 100, 1000] {
        let levels = lib(make_levels(n))?;
        let mass: f64 = levels.as_slice().iter().map(|_| 1.0 / n as f64).sum();
        ensure((mass - 1.0).abs() < 1e-12, || format!("n={n}: mass {mass}"))?;
    }
    Ok(())
}

fn normal_cdf_accuracy(hooks: &CheckHooks) -> Verdict {
    let mut worst = (0.0f64, 0.0);
    for k in 0..=1600 {
        let z = -8.0 + 0.01 * k as f64;
        let err = ((hooks.normal_cdf)(z) - oracle::normal_cdf_series(z)).abs();
        if !(err <= worst.0) {
            worst = (err, z);
        }
    }
    ensure(worst.0 <= 1e-9, || {
        format!("error {:e} at z = {}", worst.0, worst.1)
    })
}

fn normal_quantile_roundtrip() -> Verdict {
    for k in 0..=160 {
        let t = 10f64.powf(-8.0 + 0.05 * k as f64);
        for p in [t, 1.0 - t, 0.5 + 0.5 * t] {
            if !(1e-8..=1.0 - 1e-8).contains(&p) {
                continue;
            }
            let z = lib(normal_quantile(p))?;
            ensure((normal_cdf(z) - p).abs() <= 1e-8, || {
                format!("p = {p}: Φ(Φ⁻¹(p)) off")
            })?;
        }
    }
    Ok(())
}

fn spectrum_normalization() -> Verdict {
    let levels = lib(make_levels(10_000))?;
    for s in Spectrum::all_defaults() {
        let normalize = matches!(s, Spectrum::Wang { .. });
        let w = lib(discretize_weights(&s, &levels, normalize))?;
        let integral = w.as_slice().iter().sum::<f64>() / 1e4;
        let target = match s {
            Spectrum::Var { alpha, bandwidth } => {
                normal_cdf((1.0 - alpha) / bandwidth) - normal_cdf(-alpha / bandwidth)
            }
            _ => 1.0,
        };
        ensure((integral - target).abs() <= 1e-3, || {
            format!("{s}: integral {integral}, expected {target}")
        })?;
    }
    Ok(())
}

fn spectrum_monotonicity(rng: &mut ChaCha8Rng) -> Verdict {
    let monotone: Vec<Spectrum> = Spectrum::all_defaults()
        .into_iter()
        .filter(Spectrum::is_monotone)
        .collect();
    for _ in 0..500 {
        let a = rng.random_range(1e-6..1.0 - 1e-6);
        let b = rng.random_range(1e-6..1.0 - 1e-6);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        for s in &monotone {
            let (wl, wh) = (lib(weight(s, lo))?, lib(weight(s, hi))?);
            ensure(wl <= wh + 1e-12, || {
                format!("{s}: w({lo}) = {wl} > w({hi}) = {wh}")
            })?;
        }
    }
    Ok(())
}

fn cvar_cross_check(rng: &mut ChaCha8Rng) -> Verdict {
    for (alpha, n) in [(0.5, 4usize), (0.75, 20), (0.9, 20), (0.9, 50)] {
        for _ in 0..20 {
            let d = dist(sorted_values(rng, n, -5.0, 5.0));
            let w = lib(discretize_weights(
                &Spectrum::Cvar { alpha },
                d.levels(),
                false,
            ))?;
            let rho = lib(spectral_risk(&d, &w))?;
            let tail = ((1.0 - alpha) * n as f64).round() as usize;
            let direct = d.particles()[n - tail..].iter().sum::<f64>() / tail as f64;
            ensure((rho - direct).abs() <= 1e-12 * (1.0 + direct.abs()), || {
                format!("alpha {alpha}, n {n}: {rho} vs tail mean {direct}")
            })?;
        }
    }
    Ok(())
}

fn translation_equivariance(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..30 {
        let v = sorted_values(rng, 16, -5.0, 5.0);
        let c = rng.random_range(-5.0..5.0);
        let d = dist(v.clone());
        let shifted = dist(v.iter().map(|x| x + c).collect());
        for s in Spectrum::all_defaults() {
            let w = lib(discretize_weights(&s, d.levels(), true))?;
            let gap = lib(spectral_risk(&shifted, &w))? - lib(spectral_risk(&d, &w))?;
            ensure((gap - c).abs() <= 1e-12 * 100.0, || {
                format!("{s}: shift {c} moved ρ by {gap}")
            })?;
        }
    }
    Ok(())
}

fn random_marginal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = random_values(rng, n, 0.1, 1.0);
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    let s: f64 = v.iter().sum();
    v[0] += 1.0 - s;
    v
}

fn marginal_feasibility(rng: &mut ChaCha8Rng) -> Verdict {
    let tol = 1e-9;
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..12), rng.random_range(1..12));
        let cost = lib(CostMatrix::from_rows(
            (0..n).map(|_| random_values(rng, m, 0.0, 2.0)).collect(),
        ))?;
        let (a, b) = (random_marginal(rng, n), random_marginal(rng, m));
        let chi = [0.5, 0.05, 0.005][rng.random_range(0..3)];
        let p = lib(sinkhorn(&cost, &a, &b, chi, tol, 10_000))?;
        let rows = (0..n).map(|i| ((0..m).map(|j| p.get(i, j)).sum::<f64>() - a[i]).abs());
        let cols = (0..m).map(|j| ((0..n).map(|i| p.get(i, j)).sum::<f64>() - b[j]).abs());
        let worst = rows.chain(cols).fold(0.0f64, f64::max);
        ensure(worst <= tol, || {
            format!("{n}x{m} plan at chi {chi} violates marginals")
        })?;
    }
    Ok(())
}

fn symmetric_plan(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..10 {
        let n = rng.random_range(2..9);
        let mut c = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.random_range(0.0..1.0);
                c[i][j] = v;
                c[j][i] = v;
            }
        }
        let a = random_marginal(rng, n);
        let p = lib(sinkhorn(
            &lib(CostMatrix::from_rows(c))?,
            &a,
            &a,
            0.1,
            1e-12,
            10_000,
        ))?;
        for i in 0..n {
            for j in 0..n {
                ensure((p.get(i, j) - p.get(j, i)).abs() <= 1e-10, || {
                    format!("P[{i},{j}] != P[{j},{i}]")
                })?;
            }
        }
    }
    Ok(())
}

fn ot_convergence(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..10 {
        let x = sorted_values(rng, 64, 0.0, 1.0);
        let y = sorted_values(rng, 64, 0.0, 1.0);
        let exact = lib(exact_fsd(&x, &y))?;
        let mut last = f64::INFINITY;
        for chi in [0.1, 0.03, 0.01, 0.003, 0.001] {
            let (c, p) = lib(solve_fsd(&x, &y, chi, 1e-9, 10_000))?;
            let gap = (lib(plan_cost(&p, &c))? - exact).abs();
            ensure(gap <= last + 1e-9, || {
                format!("gap grew to {gap} at chi {chi}")
            })?;
            last = gap;
        }
        ensure(last <= 5e-3, || format!("gap {last} at chi 0.001"))?;
    }
    Ok(())
}

fn particle_gradient_fd(rng: &mut ChaCha8Rng) -> Verdict {
    let chi = 0.05;
    let value = |x: &[f64], y: &[f64]| -> std::result::Result<f64, String> {
        let (c, p) = lib(solve_fsd(x, y, chi, 1e-14, 100_000))?;
        lib(entropic_value(&p, &c, chi))
    };
    let mut checked = 0;
    while checked < 3 {
        let x = sorted_values(rng, 8, 0.0, 1.0);
        let y = sorted_values(rng, 8, 0.0, 1.0);
        if x.iter()
            .any(|xi| y.iter().any(|yj| (xi - yj).abs() <= 1e-3))
        {
            continue;
        }
        checked += 1;
        let (_, p) = lib(solve_fsd(&x, &y, chi, 1e-14, 100_000))?;
        let g = lib(particle_gradient(&p, &x, &y))?;
        for i in 0..8 {
            let h = 1e-5;
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (value(&up, &y)? - value(&down, &y)?) / (2.0 * h);
            ensure((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(1e-3), || {
                format!(
                    "coordinate {i}: envelope {} vs finite difference {fd}",
                    g[i]
                )
            })?;
        }
    }
    Ok(())
}

fn w1_decomposition(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..50 {
        let x = sorted_values(rng, 17, -2.0, 2.0);
        let y = sorted_values(rng, 17, -2.0, 2.0);
        let w1 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 17.0;
        let sum = lib(exact_fsd(&x, &y))? + lib(exact_fsd(&y, &x))?;
        ensure((sum - w1).abs() <= 1e-14, || format!("{sum} vs W1 {w1}"))?;
    }
    Ok(())
}

fn random_pair(
    rng: &mut ChaCha8Rng,
    n: usize,
) -> (EmpiricalCostDistribution, EmpiricalCostDistribution) {
    (
        dist(sorted_values(rng, n, -3.0, 3.0)),
        dist(sorted_values(rng, n, -3.0, 3.0)),
    )
}

fn proposition_identity(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..50 {
        let (x, y) = random_pair(rng, 20);
        for s in Spectrum::all_defaults() {
            for normalize in [true, false] {
                let w = lib(discretize_weights(&s, x.levels(), normalize))?;
                let lhs = lib(fsd_loss(&x, &y, &w))? - lib(fsd_loss(&y, &x, &w))?;
                let rhs = lib(spectral_risk(&y, &w))? - lib(spectral_risk(&x, &w))?;
                ensure((lhs - rhs).abs() <= 1e-12, || {
                    format!("{s}: {lhs} vs {rhs}")
                })?;
            }
        }
    }
    Ok(())
}

fn sandwich_bounds(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..50 {
        let (x, y) = random_pair(rng, 20);
        for s in Spectrum::all_defaults() {
            let w = lib(discretize_weights(&s, x.levels(), true))?;
            let gap = lib(spectral_risk(&y, &w))? - lib(spectral_risk(&x, &w))?;
            let (fwd, rev) = (lib(fsd_loss(&x, &y, &w))?, lib(fsd_loss(&y, &x, &w))?);
            ensure(-rev - 1e-12 <= gap && gap <= fwd + 1e-12, || {
                format!("{s}: {gap} outside [-{rev}, {fwd}]")
            })?;
        }
    }
    Ok(())
}

fn corollary_bound(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..50 {
        let x = sorted_values(rng, 16, -3.0, 3.0);
        let lift = random_values(rng, 16, 0.0, 1.0);
        let mut y: Vec<f64> = x.iter().zip(&lift).map(|(a, b)| a + b).collect();
        y.sort_by(f64::total_cmp);
        let (x, y) = (dist(x), dist(y));
        if !lib(fsd_dominates(&y, &x))? {
            return Err("lifted sample does not dominate".into());
        }
        for s in Spectrum::all_defaults() {
            let w = lib(discretize_weights(&s, x.levels(), true))?;
            let kappa = lib(fsd_loss(&x, &y, &w))?;
            let (rx, ry) = (lib(spectral_risk(&x, &w))?, lib(spectral_risk(&y, &w))?);
            ensure(rx <= ry - kappa + 1e-12, || {
                format!("{s}: {rx} > {ry} - {kappa}")
            })?;
        }
    }
    Ok(())
}

fn zero_loss_characterization(rng: &mut ChaCha8Rng) -> Verdict {
    let w = DiscreteWeights::uniform(8);
    for _ in 0..200 {
        let x = dist(sorted_values(rng, 8, 0.0, 1.0));
        let y = if rng.random_bool(0.5) {
            dist(sorted_values(rng, 8, 0.0, 1.0))
        } else {
            // sorting a pointwise-lowered sample keeps every order statistic lower
            let mut lowered: Vec<f64> = x
                .particles()
                .iter()
                .map(|v| v - rng.random_range(0.0..0.1))
                .collect();
            lowered.sort_by(f64::total_cmp);
            dist(lowered)
        };
        let zero = lib(fsd_loss(&x, &y, &w))? == 0.0;
        ensure(zero == lib(fsd_dominates(&x, &y))?, || {
            format!("zero loss {zero} disagrees with dominance")
        })?;
    }
    Ok(())
}

fn transport_consistency(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..50 {
        let (x, y) = random_pair(rng, 12);
        let a = lib(fsd_loss(&x, &y, &DiscreteWeights::uniform(12)))?;
        let b = lib(exact_fsd(x.particles(), y.particles()))?;
        ensure(a == b, || format!("{a} vs {b}"))?;
    }
    Ok(())
}

fn cdf_estimator_identity(rng: &mut ChaCha8Rng) -> Verdict {
    let env = check_env();
    for _ in 0..5 {
        let policy = random_policy(rng, 3, 5);
        for t in random_values(rng, 4, -2.0, 2.0) {
            let est = lib(expected_score_gradient(&env, &policy, |x, y| {
                if env.cost()[x][y] <= t {
                    1.0
                } else {
                    0.0
                }
            }))?;
            let exact = lib(exact_cdf_gradient(&env, &policy, t))?;
            let err = max_abs_diff(&est, &exact);
            ensure(err <= 1e-12, || format!("t = {t}: max error {err:e}"))?;
        }
    }
    Ok(())
}

fn cdf_estimator_monte_carlo() -> Verdict {
    let env = check_env();
    let policy = env.reference();
    let t = lib(exact_cost_law(&env, policy))?.mean();
    let exact = lib(exact_cdf_gradient(&env, policy, t))?;
    let n = 100_000;
    let eps = lib(sample_batch(
        &env,
        policy,
        n,
        1,
        false,
        StepStreams::new(CHECK_SEED, 0),
    ))?;
    let (nx, ny) = (env.n_contexts(), env.n_actions());
    let mut sum = vec![vec![0.0; ny]; nx];
    let mut sq = vec![vec![0.0; ny]; nx];
    for e in &eps {
        let mut one = vec![vec![0.0; ny]; nx];
        let ind = if e.cost <= t { 1.0 } else { 0.0 };
        lib(policy.add_score(&mut one, e.context, e.action, ind))?;
        for (x, row) in one.iter().enumerate() {
            for (y, v) in row.iter().enumerate() {
                sum[x][y] += v;
                sq[x][y] += v * v;
            }
        }
    }
    for x in 0..nx {
        for y in 0..ny {
            let mean = sum[x][y] / n as f64;
            let var = (sq[x][y] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            ensure((mean - exact[x][y]).abs() <= 4.0 * se + 1e-15, || {
                format!("({x},{y}): mean {mean} vs exact {} (se {se})", exact[x][y])
            })?;
        }
    }
    Ok(())
}

fn softmax_shift_invariance(rng: &mut ChaCha8Rng) -> Verdict {
    let env = check_env();
    for _ in 0..10 {
        let p = random_policy(rng, 3, 5);
        let shifts = random_values(rng, 3, -20.0, 20.0);
        let q = lib(SoftmaxPolicy::new(
            p.logits()
                .iter()
                .zip(&shifts)
                .map(|(row, s)| row.iter().map(|v| v + s).collect())
                .collect(),
        ))?;
        ensure(
            max_abs_diff(&p.probs_table(), &q.probs_table()) <= 1e-12,
            || "action probabilities moved".into(),
        )?;
        let (lp, lq) = (
            lib(exact_cost_law(&env, &p))?,
            lib(exact_cost_law(&env, &q))?,
        );
        let same_law = lp.atoms().len() == lq.atoms().len()
            && lp
                .atoms()
                .iter()
                .zip(lq.atoms())
                .all(|(a, b)| a.0 == b.0 && (a.1 - b.1).abs() <= 1e-12);
        ensure(same_law, || "cost law moved".into())?;
        let scalar = [
            (
                lib(exact_expected_reward(&env, &p))?,
                lib(exact_expected_reward(&env, &q))?,
            ),
            (
                lib(exact_expected_cost(&env, &p))?,
                lib(exact_expected_cost(&env, &q))?,
            ),
            (
                lib(exact_expected_rtilde(&env, &p, 0.1))?.0,
                lib(exact_expected_rtilde(&env, &q, 0.1))?.0,
            ),
        ];
        ensure(scalar.iter().all(|(a, b)| (a - b).abs() <= 1e-12), || {
            "expectations moved".into()
        })?;
        let t = rng.random_range(-1.0..1.0);
        let (gp, gq) = (
            lib(exact_cdf_gradient(&env, &p, t))?,
            lib(exact_cdf_gradient(&env, &q, t))?,
        );
        ensure(max_abs_diff(&gp, &gq) <= 1e-12, || {
            "CDF gradient moved".into()
        })?;
    }
    Ok(())
}

fn cost_law_mass(rng: &mut ChaCha8Rng) -> Verdict {
    let env = check_env();
    for _ in 0..20 {
        let p = random_policy(rng, 3, 5);
        let mass: f64 = lib(exact_cost_law(&env, &p))?
            .atoms()
            .iter()
            .map(|a| a.1)
            .sum();
        ensure((mass - 1.0).abs() <= 1e-12, || format!("mass {mass}"))?;
    }
    Ok(())
}

fn score_gradient_identity(rng: &mut ChaCha8Rng) -> Verdict {
    let env = check_env();
    let beta = 0.1;
    for _ in 0..5 {
        let policy = random_policy(rng, 3, 5);
        let rt = |x: usize, y: usize| {
            let lt = policy.log_prob(x, y).unwrap_or(f64::NAN);
            let lr = env.reference().log_prob(x, y).unwrap_or(f64::NAN);
            env.reward()[x][y] - beta * (lt - lr)
        };
        let est = lib(expected_score_gradient(&env, &policy, rt))?;
        let (_, exact) = lib(exact_expected_rtilde(&env, &policy, beta))?;
        let err = max_abs_diff(&est, &exact);
        ensure(err <= 1e-10, || format!("max error {err:e}"))?;
    }
    Ok(())
}

fn constraint_term_identity(rng: &mut ChaCha8Rng) -> Verdict {
    let env = check_env();
    for _ in 0..5 {
        let policy = random_policy(rng, 3, 5);
        let n = 8;
        let q = sorted_values(rng, n, -1.5, 1.5);
        let g: Vec<f64> = random_values(rng, n, -1.0 / n as f64, 0.0);
        let w = lib(discretize_weights(
            &Spectrum::Linear,
            &lib(make_levels(n))?,
            true,
        ))?;
        let lambda = rng.random_range(0.1..3.0);
        let est = lib(expected_score_gradient(&env, &policy, |x, y| {
            let c = env.cost()[x][y];
            lambda
                * q.iter()
                    .zip(&g)
                    .zip(w.as_slice())
                    .filter(|((&qi, _), _)| c <= qi)
                    .map(|((_, gi), wi)| wi * -gi)
                    .sum::<f64>()
        }))?;
        let mut composed = vec![vec![0.0; 5]; 3];
        for ((qi, gi), wi) in q.iter().zip(&g).zip(w.as_slice()) {
            let cdf = lib(exact_cdf_gradient(&env, &policy, *qi))?;
            for (row, crow) in composed.iter_mut().zip(&cdf) {
                for (v, cv) in row.iter_mut().zip(crow) {
                    *v += lambda * wi * -gi * cv;
                }
            }
        }
        let err = max_abs_diff(&est, &composed);
        ensure(err <= 1e-10, || format!("max error {err:e}"))?;
    }
    Ok(())
}

fn rloo_unbiasedness(rng: &mut ChaCha8Rng) -> Verdict {
    let env = check_env();
    for _ in 0..5 {
        let policy = random_policy(rng, 3, 5);
        let scores: Vec<Vec<f64>> = (0..3).map(|_| random_values(rng, 5, -2.0, 2.0)).collect();
        let probs = policy.probs_table();
        let mut acc = vec![vec![0.0; 5]; 3];
        for x in 0..3 {
            for y1 in 0..5 {
                for y2 in 0..5 {
                    let p = env.context_probs()[x] * probs[x][y1] * probs[x][y2];
                    lib(policy.add_score(&mut acc, x, y1, -p * scores[x][y2]))?;
                }
            }
        }
        let worst = acc.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(worst <= 1e-14, || format!("baseline correction {worst:e}"))?;
    }
    Ok(())
}

fn dual_nonnegativity(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..1000 {
        let l = rng.random_range(0.0..10.0);
        let hat = rng.random_range(-10.0..10.0);
        let kappa = rng.random_range(0.0..5.0);
        let lr = rng.random_range(1e-4..1.0);
        let next = dual_update(l, hat, kappa, lr);
        ensure(next >= 0.0, || {
            format!("λ = {next} from ({l}, {hat}, {kappa}, {lr})")
        })?;
    }
    Ok(())
}

fn particle_gradient_sign() -> Verdict {
    let env = check_env();
    let config = RadConfig::default();
    let ctx = lib(RunContext::new(&env, &config, Mode::Rad))?;
    for step in 0..10 {
        let eps = lib(sample_batch(
            &env,
            env.reference(),
            config.batch_prompts,
            config.samples_per_prompt,
            true,
            StepStreams::new(CHECK_SEED, step),
        ))?;
        let (theta, g) = lib(crate::trainer::batch_particles(&eps, &config, &ctx))?;
        ensure(g.iter().all(|&v| v <= 0.0), || {
            format!("positive gradient in {g:?}")
        })?;
        for e in &eps {
            let s = rad_score(e, theta.particles(), &g, &ctx.weights, 2.0, config.beta);
            let base = rad_score(e, theta.particles(), &g, &ctx.weights, 0.0, config.beta);
            ensure(s >= base, || "constraint term lowered a score".into())?;
        }
    }
    Ok(())
}

fn trainer_determinism() -> Verdict {
    let env = check_env();
    let config = RadConfig {
        steps: 20,
        seed: CHECK_SEED,
        ..RadConfig::default()
    };
    let a = lib(train(&env, &config, Mode::Rad))?;
    let b = lib(train(&env, &config, Mode::Rad))?;
    ensure(a == b, || "two identical runs differ".into())
}

fn safe_rate_monotonicity(rng: &mut ChaCha8Rng) -> Verdict {
    for _ in 0..200 {
        let n = rng.random_range(1..50);
        let costs = random_values(rng, n, -3.0, 3.0);
        let t1 = rng.random_range(-3.0..3.0);
        let t2 = t1 + rng.random_range(0.0..2.0);
        let (lo, hi) = (
            lib(safe_proportion(&costs, t1))?,
            lib(safe_proportion(&costs, t2))?,
        );
        ensure((0.0..=1.0).contains(&lo) && lo <= hi, || {
            format!("{lo} at {t1}, {hi} at {t2}")
        })?;
    }
    Ok(())
}

fn matchup_consistency() -> Verdict {
    let env = check_env();
    let mut rng = ChaCha8Rng::seed_from_u64(CHECK_SEED);
    let (blue, red) = (random_policy(&mut rng, 3, 5), random_policy(&mut rng, 3, 5));
    let spectra = Spectrum::all_defaults();
    let r = lib(matchup(&env, &blue, &red, &spectra, 200, 20, CHECK_SEED))?;
    ensure(
        r == lib(matchup(&env, &blue, &red, &spectra, 200, 20, CHECK_SEED))?,
        || "matchup is not deterministic".into(),
    )?;
    let out = lib(paired_outcomes(&env, &blue, &red, 200, CHECK_SEED))?;
    let bd = lib(quantile_particles(
        &lib(CostSamples::new(out.blue_costs))?,
        20,
    ))?;
    let rd = lib(quantile_particles(
        &lib(CostSamples::new(out.red_costs))?,
        20,
    ))?;
    for s in &spectra {
        let w = lib(discretize_weights(s, bd.levels(), false))?;
        let expected = lib(spectral_risk(&rd, &w))? - lib(spectral_risk(&bd, &w))?;
        let got = r.dominance[s.token()];
        ensure((got - expected).abs() <= 1e-9, || {
            format!("{s}: {got} vs {expected}")
        })?;
    }
    Ok(())
}
