//! Entropic optimal transport under the asymmetric cost `c(x, y) = (y - x)₊`.
//!
//! For one-dimensional equal-weight measures the unregularized optimum is the
//! sorted (quantile) coupling, so [`exact_fsd`] gives the FSD violation in
//! closed form. The entropic problem is solved with Sinkhorn iterations and
//! differentiated with respect to the source particles through the envelope
//! identity ([`particle_gradient`]).

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{RadError, Result};

pub const DEFAULT_CHI: f64 = 0.01;
pub const DEFAULT_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// Below this regularization the solver always iterates on log potentials.
const LOG_DOMAIN_CHI: f64 = 0.05;
const CHECK_EVERY: usize = 10;

/// Row-major `rows × cols` cost matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostMatrix {
    entries: Vec<f64>,
    rows: usize,
    cols: usize,
    particles: Option<(Vec<f64>, Vec<f64>)>,
}

impl CostMatrix {
    /// A general non-negative cost matrix.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(RadError::invalid(
                "cost matrix must be a non-empty rectangle",
            ));
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        if entries.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(RadError::invalid("costs must be finite and non-negative"));
        }
        Ok(Self {
            entries,
            rows: n,
            cols: m,
            particles: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Source and target particles when built by [`fsd_cost_matrix`].
    pub fn particles(&self) -> Option<(&[f64], &[f64])> {
        self.particles
            .as_ref()
            .map(|(x, y)| (x.as_slice(), y.as_slice()))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .chunks(self.cols)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// `C_ij = max(y_j - x_i, 0)`.
pub fn fsd_cost_matrix(x: &[f64], y: &[f64]) -> Result<CostMatrix> {
    if x.is_empty() || y.is_empty() {
        return Err(RadError::invalid("particle sets must be non-empty"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(RadError::invalid("particles must be finite"));
    }
    let entries = x
        .iter()
        .flat_map(|&xi| y.iter().map(move |&yj| (yj - xi).max(0.0)))
        .collect();
    Ok(CostMatrix {
        entries,
        rows: x.len(),
        cols: y.len(),
        particles: Some((x.to_vec(), y.to_vec())),
    })
}

/// An entropic coupling together with its solve diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    plan: Vec<f64>,
    rows: usize,
    cols: usize,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
    chi: f64,
    iterations_used: usize,
    marginal_violation: f64,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.plan[i * self.cols + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.plan
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    pub fn iterations_used(&self) -> usize {
        self.iterations_used
    }

    pub fn marginal_violation(&self) -> f64 {
        self.marginal_violation
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.plan.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    /// `H(P) = -Σ P ln P` with `0 ln 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .plan
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

/// Uniform marginal of length `n`.
pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_marginal(m: &[f64], len: usize, name: &str) -> Result<()> {
    if m.len() != len {
        return Err(RadError::invalid(format!(
            "{name} marginal has length {}, expected {len}",
            m.len()
        )));
    }
    if m.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(RadError::invalid(format!(
            "{name} marginal must be non-negative"
        )));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(RadError::invalid(format!(
            "{name} marginal sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// `exp(v)` is exactly zero below this.
const EXP_UNDERFLOW: f64 = -745.2;

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values
        .iter()
        .map(|v| v - max)
        .filter(|&d| d >= EXP_UNDERFLOW)
        .map(f64::exp)
        .sum();
    max + sum.ln()
}

/// Solves `min_P <P, C> - chi H(P)` over couplings of `a` and `b`.
///
/// Rows (columns) with bitwise identical costs are merged first and the
/// merged plan is split back in proportion to the marginals, which is exact.
///
/// Runs Sinkhorn iterations first: on log potentials (warm-started along a
/// decreasing regularization schedule) when `chi < 0.05` or when the Gibbs
/// kernel underflows, otherwise on the scalings of `K = exp(-C / chi)`. If the
/// marginals are not within `tol` after [`SINKHORN_PHASE`] iterations at the
/// target `chi`, the remaining budget is spent on Levenberg-damped Newton
/// steps on the optimality conditions with a backtracking and expanding line
/// search, each followed by one Sinkhorn sweep and counted as one iteration.
/// The marginal residual is checked every 10 Sinkhorn iterations and after
/// every Newton step.
pub fn sinkhorn(
    cost: &CostMatrix,
    a: &[f64],
    b: &[f64],
    chi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<TransportPlan> {
    check_marginal(a, cost.rows, "row")?;
    check_marginal(b, cost.cols, "column")?;
    if !(chi > 0.0 && chi.is_finite()) {
        return Err(RadError::invalid(format!(
            "regularization chi = {chi} must be positive"
        )));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(RadError::invalid(
            "tolerance and iteration budget must be positive",
        ));
    }
    // Atoms with identical cost rows (or columns) share one potential at the
    // optimum, so they are solved as a single atom and split by mass.
    let (row_of, n_rows) = group_identical(
        (0..cost.rows).map(|i| cost.entries[i * cost.cols..(i + 1) * cost.cols].to_vec()),
    );
    let (col_of, n_cols) = group_identical((0..cost.cols).map(|j| {
        (0..cost.rows)
            .map(|i| cost.entries[i * cost.cols + j])
            .collect()
    }));
    let mut merged_a = vec![0.0; n_rows];
    let mut merged_b = vec![0.0; n_cols];
    let mut merged_c = vec![0.0; n_rows * n_cols];
    for (i, &u) in row_of.iter().enumerate() {
        merged_a[u] += a[i];
        for (j, &v) in col_of.iter().enumerate() {
            merged_c[u * n_cols + v] = cost.entries[i * cost.cols + j];
        }
    }
    for (j, &v) in col_of.iter().enumerate() {
        merged_b[v] += b[j];
    }
    let merged = CostMatrix {
        entries: merged_c,
        rows: n_rows,
        cols: n_cols,
        particles: None,
    };
    let problem = Problem::new(&merged, &merged_a, &merged_b);
    let max_ratio = problem.c_max / chi;
    let mut state = if chi < LOG_DOMAIN_CHI || max_ratio > 700.0 {
        problem.log_domain_phase(chi, tol, max_iter)
    } else {
        problem.scaling_phase(chi, tol, max_iter)
    };
    if state.residual > tol && state.iterations < max_iter {
        problem.newton_phase(chi, tol, max_iter, &mut state);
    }
    let merged_plan = problem.plan(&state.f, &state.g, chi);
    let share = |mass: f64, total: f64| if total > 0.0 { mass / total } else { 0.0 };
    let mut plan = vec![0.0; cost.rows * cost.cols];
    for (i, &u) in row_of.iter().enumerate() {
        let ra = share(a[i], merged_a[u]);
        for (j, &v) in col_of.iter().enumerate() {
            plan[i * cost.cols + j] = merged_plan[u * n_cols + v] * ra * share(b[j], merged_b[v]);
        }
    }
    let residual = marginal_residual(&plan, cost.rows, cost.cols, a, b);
    if !(residual <= tol) {
        return Err(RadError::Convergence {
            iterations: state.iterations,
            residual,
        });
    }
    Ok(TransportPlan {
        plan,
        rows: cost.rows,
        cols: cost.cols,
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        chi,
        iterations_used: state.iterations,
        marginal_violation: residual,
    })
}

/// Labels equal items with the index of their first distinct occurrence.
fn group_identical(items: impl Iterator<Item = Vec<f64>>) -> (Vec<usize>, usize) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let labels = items
        .map(|item| {
            let key = item.iter().map(|v| v.to_bits()).collect();
            let next = seen.len();
            *seen.entry(key).or_insert(next)
        })
        .collect();
    (labels, seen.len())
}

/// Sinkhorn iterations allowed at the target regularization before Newton
/// polishing starts.
pub const SINKHORN_PHASE: usize = 200;
/// Iteration cap of each intermediate warm-start stage.
const STAGE_CAP: usize = 100;
const STAGE_TOL: f64 = 1e-3;
const MAX_HALVINGS: usize = 64;
const DAMPING: [f64; 6] = [0.0, 1e-12, 1e-9, 1e-6, 1e-3, 1.0];
const MAX_DOUBLINGS: usize = 30;

/// Dual potentials (in cost units) and progress of a solve.
struct SolveState {
    f: Vec<f64>,
    g: Vec<f64>,
    iterations: usize,
    residual: f64,
}

struct Problem<'a> {
    n: usize,
    m: usize,
    c: &'a [f64],
    c_t: Vec<f64>,
    a: &'a [f64],
    b: &'a [f64],
    log_a: Vec<f64>,
    log_b: Vec<f64>,
    c_max: f64,
}

impl<'a> Problem<'a> {
    fn new(cost: &'a CostMatrix, a: &'a [f64], b: &'a [f64]) -> Self {
        let (n, m) = (cost.rows, cost.cols);
        let c = &cost.entries[..];
        let mut c_t = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                c_t[j * n + i] = c[i * m + j];
            }
        }
        Self {
            n,
            m,
            c,
            c_t,
            a,
            b,
            log_a: a.iter().map(|p| p.ln()).collect(),
            log_b: b.iter().map(|p| p.ln()).collect(),
            c_max: c.iter().fold(0.0f64, |acc, &v| acc.max(v)),
        }
    }

    fn plan(&self, f: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.n * self.m];
        for i in 0..self.n {
            for j in 0..self.m {
                let e = (f[i] + g[j] - self.c[i * self.m + j]) / eps;
                p[i * self.m + j] = if e >= EXP_UNDERFLOW { e.exp() } else { 0.0 };
            }
        }
        p
    }

    fn residual(&self, plan: &[f64]) -> f64 {
        marginal_residual(plan, self.n, self.m, self.a, self.b)
    }

    /// One log-domain sweep: exact row marginals, then exact column marginals.
    fn sweep(&self, f: &mut [f64], g: &mut [f64], eps: f64) {
        let (n, m) = (self.n, self.m);
        let mut buf = vec![0.0; n.max(m)];
        for i in 0..n {
            let row = &self.c[i * m..(i + 1) * m];
            f[i] = if self.log_a[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                for ((v, gj), cij) in buf.iter_mut().zip(&*g).zip(row) {
                    *v = (gj - cij) / eps;
                }
                eps * (self.log_a[i] - log_sum_exp(&buf[..m]))
            };
        }
        for j in 0..m {
            let col = &self.c_t[j * n..(j + 1) * n];
            g[j] = if self.log_b[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                for ((v, fi), cij) in buf.iter_mut().zip(&*f).zip(col) {
                    *v = (fi - cij) / eps;
                }
                eps * (self.log_b[j] - log_sum_exp(&buf[..n]))
            };
        }
    }

    /// Sinkhorn on log potentials, warm-started along
    /// `eps = c_max, c_max/2, …` down to `chi`. The optimum at small `chi`
    /// has plan entries of order `exp(-gap/chi)`; reaching the matching
    /// potentials from zero takes exponentially many plain iterations.
    fn log_domain_phase(&self, chi: f64, tol: f64, max_iter: usize) -> SolveState {
        let mut schedule = Vec::new();
        let mut eps = self.c_max;
        while eps > chi {
            schedule.push(eps);
            eps *= 0.5;
        }
        schedule.push(chi);

        let mut st = SolveState {
            f: vec![0.0; self.n],
            g: vec![0.0; self.m],
            iterations: 0,
            residual: f64::INFINITY,
        };
        let last = schedule.len() - 1;
        for (stage, &eps) in schedule.iter().enumerate() {
            let (stage_tol, cap) = if stage == last {
                (tol, SINKHORN_PHASE)
            } else {
                (tol.max(STAGE_TOL), STAGE_CAP)
            };
            self.stage(&mut st, eps, stage_tol, cap, max_iter);
            if st.iterations >= max_iter {
                break;
            }
        }
        st.residual = self.residual(&self.plan(&st.f, &st.g, chi));
        st
    }

    /// Up to `cap` Sinkhorn iterations at fixed `eps`, run on scalings `u`,
    /// `v` of the stabilized kernel `exp((f_i + g_j - c_ij) / eps)`. This is
    /// the log-domain iteration with potentials `f + eps ln u`, `g + eps ln v`;
    /// the scalings are folded into the potentials when they leave
    /// `[1/ABSORB, ABSORB]` and when the stage ends. A row or column whose
    /// kernel sum underflows falls back to one log-domain sweep.
    fn stage(&self, st: &mut SolveState, eps: f64, stage_tol: f64, cap: usize, max_iter: usize) {
        const ABSORB: f64 = 1e30;
        let (n, m) = (self.n, self.m);
        let mut k = self.plan(&st.f, &st.g, eps);
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; m];
        let mut col = vec![0.0; m];
        let absorb = |st: &mut SolveState, u: &mut [f64], v: &mut [f64]| {
            for (f, u) in st.f.iter_mut().zip(u.iter_mut()) {
                *f += eps * u.ln();
                *u = 1.0;
            }
            for (g, v) in st.g.iter_mut().zip(v.iter_mut()) {
                *g += eps * v.ln();
                *v = 1.0;
            }
        };
        let scale = |mass: f64, sum: f64| if mass == 0.0 { 0.0 } else { mass / sum };
        let mut stage_iters = 0;
        while st.iterations < max_iter && stage_iters < cap {
            st.iterations += 1;
            stage_iters += 1;
            let (u_prev, v_prev) = (u.clone(), v.clone());
            for (i, ui) in u.iter_mut().enumerate() {
                let row = &k[i * m..(i + 1) * m];
                *ui = scale(
                    self.a[i],
                    row.iter().zip(&v).map(|(kij, vj)| kij * vj).sum(),
                );
            }
            col.iter_mut().for_each(|c| *c = 0.0);
            for (i, ui) in u.iter().enumerate() {
                for (c, kij) in col.iter_mut().zip(&k[i * m..(i + 1) * m]) {
                    *c += kij * ui;
                }
            }
            for (vj, (bj, cj)) in v.iter_mut().zip(self.b.iter().zip(&col)) {
                *vj = scale(*bj, *cj);
            }
            let in_range =
                |x: &f64| x.is_finite() && (*x == 0.0 || (1.0 / ABSORB..=ABSORB).contains(x));
            if !(u.iter().all(in_range) && v.iter().all(in_range)) {
                let blown = u.iter().chain(&v).any(|x| !x.is_finite())
                    || u.iter().zip(self.a).any(|(x, &p)| *x == 0.0 && p > 0.0)
                    || v.iter().zip(self.b).any(|(x, &p)| *x == 0.0 && p > 0.0);
                if blown {
                    u = u_prev;
                    v = v_prev;
                    absorb(st, &mut u, &mut v);
                    self.sweep(&mut st.f, &mut st.g, eps);
                } else {
                    absorb(st, &mut u, &mut v);
                }
                k = self.plan(&st.f, &st.g, eps);
            }
            if stage_iters % CHECK_EVERY == 0 || st.iterations == max_iter {
                let p: Vec<f64> = (0..n * m).map(|e| u[e / m] * k[e] * v[e % m]).collect();
                st.residual = self.residual(&p);
                if st.residual <= stage_tol {
                    break;
                }
            }
        }
        absorb(st, &mut u, &mut v);
    }

    /// Sinkhorn on the scalings `u`, `v` of the Gibbs kernel, returned as
    /// potentials `chi·ln u`, `chi·ln v`.
    fn scaling_phase(&self, chi: f64, tol: f64, max_iter: usize) -> SolveState {
        let (n, m) = (self.n, self.m);
        let k: Vec<f64> = self.c.iter().map(|c| (-c / chi).exp()).collect();
        let mut u = vec![1.0; n];
        let mut v = vec![1.0; m];
        let build = |u: &[f64], v: &[f64]| -> Vec<f64> {
            let mut p = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    p[i * m + j] = u[i] * k[i * m + j] * v[j];
                }
            }
            p
        };
        let budget = max_iter.min(SINKHORN_PHASE);
        let mut it = 0;
        while it < budget {
            it += 1;
            for i in 0..n {
                let kv: f64 = (0..m).map(|j| k[i * m + j] * v[j]).sum();
                u[i] = self.a[i] / kv;
            }
            for j in 0..m {
                let ktu: f64 = (0..n).map(|i| k[i * m + j] * u[i]).sum();
                v[j] = self.b[j] / ktu;
            }
            if (it % CHECK_EVERY == 0 || it == budget) && self.residual(&build(&u, &v)) <= tol {
                break;
            }
        }
        SolveState {
            f: u.iter().map(|x| chi * x.ln()).collect(),
            g: v.iter().map(|x| chi * x.ln()).collect(),
            iterations: it,
            residual: self.residual(&build(&u, &v)),
        }
    }

    /// Sum of absolute marginal violations of the plan at `chi`.
    fn violation_l1(&self, f: &[f64], g: &[f64], chi: f64) -> f64 {
        let p = self.plan(f, g, chi);
        let (n, m) = (self.n, self.m);
        let rows: f64 = (0..n)
            .map(|i| (p[i * m..(i + 1) * m].iter().sum::<f64>() - self.a[i]).abs())
            .sum();
        let cols: f64 = (0..m)
            .map(|j| ((0..n).map(|i| p[i * m + j]).sum::<f64>() - self.b[j]).abs())
            .sum();
        rows + cols
    }

    /// Damped Newton steps on the dual optimality conditions `P1 = a`,
    /// `Pᵀ1 = b`, with the gauge `δg_last = 0`. The Jacobian is
    /// `(1/chi)·[[diag(P1), P], [Pᵀ, diag(Pᵀ1)]]`; steps are halved until the
    /// summed marginal violation decreases. After a rejected step the next
    /// 10 iterations are plain sweeps.
    fn newton_phase(&self, chi: f64, tol: f64, max_iter: usize, st: &mut SolveState) {
        let (n, m) = (self.n, self.m);
        let usable = self.a.iter().chain(self.b).all(|&p| p > 0.0)
            && st.f.iter().chain(&st.g).all(|v| v.is_finite());
        let dim = n + m - 1;
        // sweeps to run before retrying after a rejected Newton step
        let mut pause = 0;
        while st.iterations < max_iter {
            st.iterations += 1;
            if usable && pause == 0 && !self.newton_step(chi, dim, st) {
                pause = CHECK_EVERY;
            }
            pause = pause.saturating_sub(1);
            self.sweep(&mut st.f, &mut st.g, chi);
            st.residual = self.residual(&self.plan(&st.f, &st.g, chi));
            if st.residual <= tol {
                return;
            }
        }
    }

    /// One damped Newton step; `false` when no decreasing step exists.
    ///
    /// The Jacobian is nearly singular when the plan splits into weakly
    /// linked blocks, and the solve then returns a huge component along the
    /// near-null direction. Levenberg-Marquardt damping `J + mu diag(J)` with
    /// increasing `mu` suppresses it until a step decreases the violation.
    fn newton_step(&self, chi: f64, dim: usize, st: &mut SolveState) -> bool {
        let (n, m) = (self.n, self.m);
        let p = self.plan(&st.f, &st.g, chi);
        let mut rhs = DVector::zeros(dim);
        let mut jac = DMatrix::zeros(dim, dim);
        for i in 0..n {
            let r: f64 = p[i * m..(i + 1) * m].iter().sum();
            rhs[i] = self.a[i] - r;
            jac[(i, i)] = r / chi;
        }
        for j in 0..m - 1 {
            let s: f64 = (0..n).map(|i| p[i * m + j]).sum();
            rhs[n + j] = self.b[j] - s;
            jac[(n + j, n + j)] = s / chi;
            for i in 0..n {
                jac[(i, n + j)] = p[i * m + j] / chi;
                jac[(n + j, i)] = p[i * m + j] / chi;
            }
        }
        let merit0 = self.violation_l1(&st.f, &st.g, chi);
        for mu in DAMPING {
            let mut damped = jac.clone();
            for k in 0..dim {
                damped[(k, k)] *= 1.0 + mu;
            }
            let Some(d) = solve_refined(&damped, &rhs) else {
                continue;
            };
            if let Some((f, g)) = self.line_search(chi, st, &d, merit0) {
                st.f = f;
                st.g = g;
                return true;
            }
        }
        false
    }

    /// Backtracking search on the L1 marginal violation along `d`; a full
    /// step is extended by doubling while the violation keeps decreasing.
    fn line_search(
        &self,
        chi: f64,
        st: &SolveState,
        d: &DVector<f64>,
        merit0: f64,
    ) -> Option<(Vec<f64>, Vec<f64>)> {
        let (n, m) = (self.n, self.m);
        let trial = |t: f64| {
            let f: Vec<f64> = (0..n).map(|i| st.f[i] + t * d[i]).collect();
            let g: Vec<f64> = (0..m)
                .map(|j| {
                    if j + 1 < m {
                        st.g[j] + t * d[n + j]
                    } else {
                        st.g[j]
                    }
                })
                .collect();
            let merit = self.violation_l1(&f, &g, chi);
            (
                if merit.is_finite() {
                    merit
                } else {
                    f64::INFINITY
                },
                f,
                g,
            )
        };
        let mut t = 1.0;
        for _ in 0..MAX_HALVINGS {
            let (merit, f, g) = trial(t);
            if merit <= (1.0 - 1e-4 * t) * merit0 {
                let mut best = (merit, f, g);
                // A weakly linked atom pair moves its potentials by about
                // `chi` per full step.
                if t == 1.0 {
                    for _ in 0..MAX_DOUBLINGS {
                        t *= 2.0;
                        let next = trial(t);
                        if next.0 >= best.0 {
                            break;
                        }
                        best = next;
                    }
                }
                return Some((best.1, best.2));
            }
            t *= 0.5;
        }
        None
    }
}

/// LU solve with one step of iterative refinement.
fn solve_refined(jac: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = jac.clone().lu();
    let mut d = lu.solve(rhs)?;
    if let Some(fix) = lu.solve(&(rhs - jac * &d)) {
        d += fix;
    }
    d.iter().all(|v| v.is_finite()).then_some(d)
}

fn marginal_residual(plan: &[f64], rows: usize, cols: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..rows {
        let s: f64 = plan[i * cols..(i + 1) * cols].iter().sum();
        worst = worst.max((s - a[i]).abs());
    }
    for j in 0..cols {
        let s: f64 = (0..rows).map(|i| plan[i * cols + j]).sum();
        worst = worst.max((s - b[j]).abs());
    }
    if worst.is_nan() {
        f64::INFINITY
    } else {
        worst
    }
}

fn check_shapes(plan: &TransportPlan, cost: &CostMatrix) -> Result<()> {
    if plan.rows != cost.rows || plan.cols != cost.cols {
        return Err(RadError::invalid(format!(
            "plan is {}x{} but cost is {}x{}",
            plan.rows, plan.cols, cost.rows, cost.cols
        )));
    }
    Ok(())
}

/// `<P, C>`.
pub fn plan_cost(plan: &TransportPlan, cost: &CostMatrix) -> Result<f64> {
    check_shapes(plan, cost)?;
    Ok(plan
        .plan
        .iter()
        .zip(&cost.entries)
        .map(|(p, c)| p * c)
        .sum())
}

/// `<P, C> - chi H(P)`.
pub fn entropic_value(plan: &TransportPlan, cost: &CostMatrix, chi: f64) -> Result<f64> {
    Ok(plan_cost(plan, cost)? - chi * plan.entropy())
}

fn is_sorted(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// Unregularized FSD violation of equal-count sorted particles:
/// `(1/N) Σ (y_i - x_i)₊`, the value of the quantile coupling.
pub fn exact_fsd(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(RadError::invalid(format!(
            "exact FSD needs equal non-zero lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !is_sorted(x) || !is_sorted(y) {
        return Err(RadError::invalid("exact FSD needs sorted particles"));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (b - a).max(0.0)).sum::<f64>() / x.len() as f64)
}

/// `∂(entropic value)/∂x_i = -Σ_j P_ij 1[y_j > x_i]`, using the right
/// derivative (zero) at the kink `y_j = x_i`.
pub fn particle_gradient(plan: &TransportPlan, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if plan.rows != x.len() || plan.cols != y.len() {
        return Err(RadError::invalid(format!(
            "plan is {}x{} but particles are {} and {}",
            plan.rows,
            plan.cols,
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter()
        .enumerate()
        .map(|(i, &xi)| {
            -y.iter()
                .enumerate()
                .filter(|&(_, &yj)| yj > xi)
                .map(|(j, _)| plan.get(i, j))
                .sum::<f64>()
        })
        .collect())
}

/// Solves the equal-weight entropic FSD problem between `x` and `y`.
pub fn solve_fsd(
    x: &[f64],
    y: &[f64],
    chi: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(CostMatrix, TransportPlan)> {
    let cost = fsd_cost_matrix(x, y)?;
    let plan = sinkhorn(
        &cost,
        &uniform_marginal(x.len()),
        &uniform_marginal(y.len()),
        chi,
        tol,
        max_iter,
    )?;
    Ok((cost, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sorted_uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }

    #[test]
    fn cost_matrix_examples() {
        assert_eq!(
            fsd_cost_matrix(&[0.0], &[1.0]).unwrap().to_rows(),
            vec![vec![1.0]]
        );
        assert_eq!(
            fsd_cost_matrix(&[5.0], &[1.0]).unwrap().to_rows(),
            vec![vec![0.0]]
        );
        assert_eq!(
            fsd_cost_matrix(&[0.0, 2.0], &[1.0, 3.0]).unwrap().to_rows(),
            vec![vec![1.0, 3.0], vec![0.0, 1.0]]
        );
        assert!(fsd_cost_matrix(&[], &[1.0]).is_err());
    }

    #[test]
    fn single_atom_plan() {
        for chi in [1.0, 0.01, 1e-4] {
            let c = CostMatrix::from_rows(vec![vec![3.7]]).unwrap();
            let p = sinkhorn(&c, &[1.0], &[1.0], chi, 1e-12, 100).unwrap();
            assert_eq!(p.to_rows(), vec![vec![1.0]]);
        }
    }

    #[test]
    fn zero_cost_plan_is_uniform() {
        let c = CostMatrix::from_rows(vec![vec![0.0; 2]; 2]).unwrap();
        let p = sinkhorn(&c, &[0.5; 2], &[0.5; 2], 0.01, 1e-12, 1000).unwrap();
        for e in p.entries() {
            assert!((e - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_matches_bisection_oracle() {
        let (x, y) = ([0.0, 1.0], [0.0, 1.0]);
        let (cost, plan) = solve_fsd(&x, &y, 0.01, 1e-13, 10_000).unwrap();
        let c = cost.to_rows();
        let expected = oracle::entropic_plan_2x2(
            [[c[0][0], c[0][1]], [c[1][0], c[1][1]]],
            [0.5; 2],
            [0.5; 2],
            0.01,
        );
        for (got, want) in plan.entries().iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(plan_cost(&plan, &cost).unwrap() <= 1e-3);
        assert!(plan.get(0, 0) > plan.get(0, 1));
    }

    #[test]
    fn scaling_and_log_domain_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = sorted_uniform(&mut rng, 6);
        let y = sorted_uniform(&mut rng, 5);
        let cost = fsd_cost_matrix(&x, &y).unwrap();
        let (a, b) = (uniform_marginal(6), uniform_marginal(5));
        let problem = Problem::new(&cost, &a, &b);
        let s1 = problem.scaling_phase(0.2, 1e-13, 10_000);
        let s2 = problem.log_domain_phase(0.2, 1e-13, 10_000);
        assert!(s1.residual <= 1e-13 && s2.residual <= 1e-13);
        let (p1, p2) = (
            problem.plan(&s1.f, &s1.g, 0.2),
            problem.plan(&s2.f, &s2.g, 0.2),
        );
        for (u, v) in p1.iter().zip(&p2) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn newton_polish_reaches_tolerance_on_tied_particles() {
        // Pooled batch particles with ties against reference particles: plain
        // Sinkhorn stalls near 1e-5 here after 20000 sweeps.
        let y = [
            -1.4219, -1.4219, -0.9851, -0.9851, -0.9197, 0.0231, 0.171, 0.2036, 0.2359, 0.3767,
            0.3767, 0.3788, 0.7091, 0.7749, 0.8231, 1.9514,
        ];
        let x = [
            -1.4219, -1.4219, -0.9851, -0.9197, -0.9197, -0.3158, 0.171, 0.171, 0.2036, 0.3767,
            0.3767, 0.3788, 0.7091, 0.7749, 0.8231, 1.9514,
        ];
        let cost = fsd_cost_matrix(&x, &y).unwrap();
        let (a, b) = (uniform_marginal(16), uniform_marginal(16));
        let problem = Problem::new(&cost, &a, &b);
        assert!(problem.log_domain_phase(0.01, 1e-9, 10_000).residual > 1e-9);
        let plan = sinkhorn(&cost, &a, &b, 0.01, 1e-9, 10_000).unwrap();
        assert!(plan.marginal_violation() <= 1e-9);
        assert!(plan.iterations_used() < 1000);
        let v = plan_cost(&plan, &cost).unwrap();
        let exact = exact_fsd(&x, &y).unwrap();
        assert!(v >= exact - 1e-12 && v - exact < 0.05);
    }

    #[test]
    fn entropic_value_examples() {
        let c = CostMatrix::from_rows(vec![vec![2.0]]).unwrap();
        let p = sinkhorn(&c, &[1.0], &[1.0], 0.5, 1e-12, 10).unwrap();
        assert_eq!(plan_cost(&p, &c).unwrap(), 2.0);
        assert_eq!(entropic_value(&p, &c, 0.5).unwrap(), 2.0);
        let z = CostMatrix::from_rows(vec![vec![0.0; 2]; 2]).unwrap();
        let p = sinkhorn(&z, &[0.5; 2], &[0.5; 2], 0.01, 1e-12, 1000).unwrap();
        let v = entropic_value(&p, &z, 0.01).unwrap();
        assert!((v + 0.01 * 4f64.ln()).abs() < 1e-12);
        assert!((v + 0.0138629).abs() < 1e-7);
        let c0 = CostMatrix::from_rows(vec![vec![0.0]]).unwrap();
        let p = sinkhorn(&c0, &[1.0], &[1.0], 0.5, 1e-12, 10).unwrap();
        assert_eq!(plan_cost(&p, &c0).unwrap(), 0.0);
    }

    #[test]
    fn exact_fsd_examples() {
        assert_eq!(exact_fsd(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(exact_fsd(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(exact_fsd(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 0.5);
        assert!(exact_fsd(&[0.0], &[1.0, 2.0]).is_err());
        assert!(exact_fsd(&[1.0, 0.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exact_fsd_is_the_optimal_coupling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            for _ in 0..10 {
                let x = sorted_uniform(&mut rng, n);
                let y = sorted_uniform(&mut rng, n);
                let brute = oracle::brute_force_ot(&x, &y, |a, b| (b - a).max(0.0));
                assert!((exact_fsd(&x, &y).unwrap() - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wasserstein_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = sorted_uniform(&mut rng, 17);
            let y = sorted_uniform(&mut rng, 17);
            let w1 = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / 17.0;
            let sum = exact_fsd(&x, &y).unwrap() + exact_fsd(&y, &x).unwrap();
            assert!((sum - w1).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_examples() {
        let (_, p) = solve_fsd(&[0.0], &[1.0], 0.01, 1e-12, 10).unwrap();
        assert_eq!(particle_gradient(&p, &[0.0], &[1.0]).unwrap(), vec![-1.0]);
        let (_, p) = solve_fsd(&[5.0], &[1.0], 0.01, 1e-12, 10).unwrap();
        assert_eq!(particle_gradient(&p, &[5.0], &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let chi = 0.05;
        let value = |x: &[f64], y: &[f64]| {
            let (c, p) = solve_fsd(x, y, chi, 1e-14, 100_000).unwrap();
            entropic_value(&p, &c, chi).unwrap()
        };
        let mut checked = 0;
        while checked < 5 {
            let x = sorted_uniform(&mut rng, 8);
            let y = sorted_uniform(&mut rng, 8);
            if x.iter()
                .any(|xi| y.iter().any(|yj| (xi - yj).abs() <= 1e-3))
            {
                continue;
            }
            checked += 1;
            let (_, p) = solve_fsd(&x, &y, chi, 1e-14, 100_000).unwrap();
            let g = particle_gradient(&p, &x, &y).unwrap();
            for i in 0..8 {
                let fd = oracle::central_difference(
                    |t| {
                        let mut xs = x.clone();
                        xs[i] = t;
                        value(&xs, &y)
                    },
                    x[i],
                    1e-5,
                );
                assert!(
                    (g[i] - fd).abs() <= 1e-4 * g[i].abs().max(1e-3),
                    "{} vs {fd}",
                    g[i]
                );
                let row: f64 = (0..8).map(|j| p.get(i, j)).sum();
                assert!(g[i] <= 0.0 && g[i] >= -row - 1e-15);
            }
        }
    }

    #[test]
    fn symmetric_instances_give_symmetric_plans() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 7;
        let mut c = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.random::<f64>();
                c[i][j] = v;
                c[j][i] = v;
            }
        }
        let mut a: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.1).collect();
        let s: f64 = a.iter().sum();
        a.iter_mut().for_each(|v| *v /= s);
        let s: f64 = a.iter().sum();
        a[0] += 1.0 - s;
        let cost = CostMatrix::from_rows(c).unwrap();
        let p = sinkhorn(&cost, &a, &a, 0.1, 1e-12, 10_000).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert!((p.get(i, j) - p.get(j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_marginals() {
        let c = CostMatrix::from_rows(vec![vec![0.0; 2]; 2]).unwrap();
        assert!(matches!(
            sinkhorn(&c, &[0.5, 0.6], &[0.5, 0.5], 0.1, 1e-9, 10),
            Err(RadError::InvalidArgument(_))
        ));
        assert!(sinkhorn(&c, &[0.5, 0.5], &[1.0], 0.1, 1e-9, 10).is_err());
        assert!(sinkhorn(&c, &[0.5, 0.5], &[0.5, 0.5], 0.0, 1e-9, 10).is_err());
    }

    #[test]
    fn reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sorted_uniform(&mut rng, 30);
        let y = sorted_uniform(&mut rng, 30);
        let cost = fsd_cost_matrix(&x, &y).unwrap();
        let m = uniform_marginal(30);
        match sinkhorn(&cost, &m, &m, 0.001, 1e-15, 3) {
            Err(RadError::Convergence {
                iterations,
                residual,
            }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-15);
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn marginals_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for chi in [0.5, 0.05, 0.01, 0.003] {
            let x = sorted_uniform(&mut rng, 12);
            let y = sorted_uniform(&mut rng, 9);
            let (_, p) = solve_fsd(&x, &y, chi, 1e-10, 100_000).unwrap();
            assert!(p.marginal_violation() <= 1e-10);
            assert!(p.entries().iter().all(|&e| e >= 0.0));
            assert!(
                marginal_residual(p.entries(), 12, 9, p.row_marginal(), p.col_marginal()) <= 1e-10
            );
        }
    }
}
