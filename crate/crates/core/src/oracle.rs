//! Independent reference computations.
//!
//! Nothing in here shares code with the routines it is used to check: the
//! normal CDF is summed from series, optimal transport is brute-forced over
//! permutations, entropic plans of 2×2 problems are found by bisection and
//! derivatives come from central differences.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/√π · e^{-x²} · Σ 2^n x^{2n+1} / (1·3·…·(2n+1)); all terms positive.
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 / PI.sqrt() * (-x2).exp() * sum
}

fn erfc_continued_fraction(x: f64) -> f64 {
    // erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + …)))), x > 0.
    let mut tail = x;
    for k in (1..=300).rev() {
        tail = x + (k as f64 / 2.0) / tail;
    }
    (-x * x).exp() / PI.sqrt() / tail
}

fn erfc_reference(x: f64) -> f64 {
    if x < 0.0 {
        2.0 - erfc_reference(-x)
    } else if x < 3.0 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

/// Standard normal CDF evaluated from the erf series / erfc continued fraction.
pub fn normal_cdf_series(z: f64) -> f64 {
    0.5 * erfc_reference(-z * FRAC_1_SQRT_2)
}

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn for_each_permutation(n: usize, visit: &mut impl FnMut(&[usize])) {
    // Heap's algorithm.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Exact equal-weight optimal transport cost between `x` and `y` under
/// `cost`, by enumerating every permutation (Birkhoff). Use for `n <= 8`.
pub fn brute_force_ot(x: &[f64], y: &[f64], cost: impl Fn(f64, f64) -> f64) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let mut best = f64::INFINITY;
    for_each_permutation(n, &mut |perm| {
        let total: f64 = perm
            .iter()
            .enumerate()
            .map(|(i, &j)| cost(x[i], y[j]))
            .sum();
        best = best.min(total);
    });
    best / n as f64
}

/// Entropic optimal plan of a 2×2 problem, row-major. The plan has one free
/// entry `t = P11`; optimality means
/// `ln(P11 P22 / (P12 P21)) = -(C11 + C22 - C12 - C21) / chi`, which is
/// monotone in `t` and solved here by bisection.
pub fn entropic_plan_2x2(c: [[f64; 2]; 2], a: [f64; 2], b: [f64; 2], chi: f64) -> [f64; 4] {
    let target = -(c[0][0] + c[1][1] - c[0][1] - c[1][0]) / chi;
    let lo0 = (a[0] + b[0] - 1.0).max(0.0);
    let hi0 = a[0].min(b[0]);
    let plan = |t: f64| [t, a[0] - t, b[0] - t, 1.0 - a[0] - b[0] + t];
    let g = |t: f64| {
        let p = plan(t);
        (p[0].ln() + p[3].ln() - p[1].ln() - p[2].ln()) - target
    };
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    plan(0.5 * (lo + hi))
}
