//! Independent oracles for the optimizer tests. Nothing here calls the
//! library's solver.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varband::{ProblemSpec, UncertainCovariance};

pub fn quad(sigma: &DMatrix<f64>, b: &[f64]) -> f64 {
    let v = DVector::from_column_slice(b);
    v.dot(&(sigma * &v))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum of `b'Sb` over simplex points with coordinates in multiples of
/// `1/steps` and `mu'b >= r0`, by visiting every grid point.
pub fn grid_min_naive(sigma: &DMatrix<f64>, mu: &[f64], r0: f64, steps: usize) -> f64 {
    let n = mu.len();
    let mut counts = vec![0usize; n];
    let mut best = f64::INFINITY;
    #[allow(clippy::too_many_arguments)]
    fn rec(
        k: usize,
        left: usize,
        counts: &mut [usize],
        steps: usize,
        sigma: &DMatrix<f64>,
        mu: &[f64],
        r0: f64,
        best: &mut f64,
    ) {
        if k == counts.len() - 1 {
            counts[k] = left;
            let b: Vec<f64> = counts.iter().map(|&c| c as f64 / steps as f64).collect();
            if dot(&b, mu) >= r0 {
                *best = best.min(quad(sigma, &b));
            }
            return;
        }
        for c in 0..=left {
            counts[k] = c;
            rec(k + 1, left - c, counts, steps, sigma, mu, r0, best);
        }
    }
    rec(0, steps, &mut counts, steps, sigma, mu, r0, &mut best);
    best
}

/// Same minimum as [`grid_min_naive`], but the last two coordinates are
/// handled in closed form: with the others fixed, the objective is a convex
/// quadratic in the grid index `j` of coordinate `n-2`, so its minimum over
/// the feasible index interval sits at the floor or ceiling of the clamped
/// continuous minimiser.
pub fn grid_min(sigma: &DMatrix<f64>, mu: &[f64], r0: f64, steps: usize) -> f64 {
    let n = mu.len();
    assert!(n >= 2);
    let h = 1.0 / steps as f64;
    let mut counts = vec![0usize; n];
    let mut best = f64::INFINITY;
    let (p, q) = (n - 2, n - 1);
    // f(j) along b_p = j h, b_q = (m - j) h with the rest fixed.
    let a2 = sigma[(p, p)] - 2.0 * sigma[(p, q)] + sigma[(q, q)];

    fn outer(
        k: usize,
        left: usize,
        counts: &mut [usize],
        visit: &mut dyn FnMut(&[usize], usize),
    ) {
        if k == counts.len() - 2 {
            visit(counts, left);
            return;
        }
        for c in 0..=left {
            counts[k] = c;
            outer(k + 1, left - c, counts, visit);
        }
    }

    let mut visit = |counts: &[usize], m: usize| {
        let mut b = vec![0.0; n];
        for i in 0..p {
            b[i] = counts[i] as f64 * h;
        }
        let point = |j: usize, b: &mut Vec<f64>| {
            b[p] = j as f64 * h;
            b[q] = (m - j) as f64 * h;
        };
        let feasible = |j: usize, b: &mut Vec<f64>| {
            point(j, b);
            dot(b, mu) >= r0
        };
        // Feasible indices form an interval; find it from the linear
        // constraint and then correct rounding by direct checks.
        let base: f64 = (0..p).map(|i| mu[i] * b[i]).sum::<f64>() + mu[q] * m as f64 * h;
        let slope = (mu[p] - mu[q]) * h;
        let (mut lo, mut hi) = (0usize, m);
        if slope > 0.0 {
            let need = ((r0 - base) / slope).ceil();
            lo = need.clamp(0.0, m as f64 + 1.0) as usize;
        } else if slope < 0.0 {
            let allow = ((r0 - base) / slope).floor();
            if allow < 0.0 {
                return;
            }
            hi = (allow as usize).min(m);
        } else if base < r0 && !feasible(0, &mut b) {
            return;
        }
        while lo > 0 && feasible(lo - 1, &mut b) {
            lo -= 1;
        }
        while lo <= hi && !feasible(lo, &mut b) {
            lo += 1;
        }
        while hi < m && feasible(hi + 1, &mut b) {
            hi += 1;
        }
        while hi >= lo && !feasible(hi, &mut b) {
            if hi == 0 {
                return;
            }
            hi -= 1;
        }
        if lo > hi {
            return;
        }
        // f(j) = a2 h^2 j^2 + a1 h j + const; continuous minimiser j*.
        point(0, &mut b);
        let g = sigma * DVector::from_column_slice(&b);
        let a1 = 2.0 * (g[p] - g[q]);
        let jstar = if a2 > 0.0 { -a1 / (2.0 * a2 * h) } else { 0.0 };
        let clamp = |x: f64| x.clamp(lo as f64, hi as f64);
        let mut cands = vec![lo, hi, clamp(jstar.floor()) as usize, clamp(jstar.ceil()) as usize];
        cands.dedup();
        for j in cands {
            if feasible(j, &mut b) {
                best = best.min(quad(sigma, &b));
            }
        }
    };
    outer(0, steps, &mut counts, &mut visit);
    best
}

/// Upper bound on `grid_min - f(beta)` for the `1/steps` grid.
///
/// Mixing `beta` with the highest-return vertex by `t` buys return slack
/// `t (max mu - r0)`; rounding to the grid moves at most `n h` in L1 and
/// costs at most `spread * n h / 2` of return. So a feasible grid point lies
/// within L1 distance `D = 2t + n h` of `beta`, and convexity gives
/// `f(g) - f(beta) <= |grad f(beta)|_inf D + lambda_max D^2`.
pub fn grid_gap_bound(sigma: &DMatrix<f64>, mu: &[f64], r0: f64, beta: &[f64], steps: usize) -> f64 {
    let n = mu.len() as f64;
    let h = 1.0 / steps as f64;
    let max = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    let slack = max - r0;
    let t = if spread == 0.0 { 0.0 } else { spread * n * h / (2.0 * slack) };
    assert!(t <= 1.0, "return slack too small for the grid bound");
    let d = 2.0 * t + n * h;
    let grad = sigma * DVector::from_column_slice(beta) * 2.0;
    let lmax = sigma.clone().symmetric_eigenvalues().max();
    grad.amax() * d + lmax * d * d
}

/// Solve the long-only problem by trying every support set and both states
/// of the return constraint, keeping KKT points. Exact for small `n`.
pub fn kkt_enumeration(sigma: &DMatrix<f64>, mu: &[f64], r0: f64) -> Vec<f64> {
    let n = mu.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let k = idx.len();
        for with_return in [false, true] {
            let m = k + 1 + usize::from(with_return);
            let mut a = DMatrix::zeros(m, m);
            let mut rhs = DVector::zeros(m);
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    a[(r, c)] = 2.0 * sigma[(i, j)];
                }
                a[(r, k)] = 1.0;
                a[(k, r)] = 1.0;
                if with_return {
                    a[(r, k + 1)] = -mu[i];
                    a[(k + 1, r)] = mu[i];
                }
            }
            rhs[k] = 1.0;
            if with_return {
                rhs[k + 1] = r0;
            }
            let lu = a.clone().lu();
            let Some(mut sol) = lu.solve(&rhs) else { continue };
            // Nearly parallel budget and return rows make the plain solve
            // miss the constraints by ~1e-14; refine against the residual.
            for _ in 0..2 {
                if let Some(d) = lu.solve(&(&rhs - &a * &sol)) {
                    sol += d;
                }
            }
            // LU can return garbage for singular bordered systems.
            if sol.iter().any(|v| !v.is_finite()) || (&a * &sol - &rhs).amax() > 1e-9 {
                continue;
            }
            let mut beta = vec![0.0; n];
            for (r, &i) in idx.iter().enumerate() {
                beta[i] = sol[r];
            }
            let l1 = sol[k];
            let l2 = if with_return { sol[k + 1] } else { 0.0 };
            let tol = 1e-10;
            if beta.iter().any(|&b| b < -tol)
                || (beta.iter().sum::<f64>() - 1.0).abs() > 1e-9
                || dot(&beta, mu) < r0 - tol
                || l2 < -tol
            {
                continue;
            }
            let g = sigma * DVector::from_column_slice(&beta) * 2.0;
            let dual_ok = (0..n)
                .filter(|i| !idx.contains(i))
                .all(|i| g[i] + l1 - l2 * mu[i] >= -tol);
            if !dual_ok {
                continue;
            }
            let f = quad(sigma, &beta);
            if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                best = Some((f, beta));
            }
        }
    }
    best.expect("a feasible problem has a KKT point").1
}

pub struct Instance {
    pub v_lower: DMatrix<f64>,
    pub v_upper: DMatrix<f64>,
    pub mu: Vec<f64>,
    pub r0: f64,
}

impl Instance {
    pub fn problem(&self, w: f64) -> ProblemSpec {
        let cov = UncertainCovariance::new(self.v_lower.clone(), self.v_upper.clone()).unwrap();
        ProblemSpec::new(self.mu.clone(), self.r0, cov, w).unwrap()
    }
}

/// Positive definite pair with `V_lo <= V_hi` entrywise and a return target
/// leaving at least a tenth of the return spread as slack.
pub fn random_instance(seed: u64, n: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let delta = 0.05;
    let v_lower = &a * a.transpose() + DMatrix::identity(n, n) * delta;
    let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..0.7));
    let v_upper = &v_lower + &c * c.transpose() + DMatrix::identity(n, n) * delta;
    let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..1.0)).collect();
    let max = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = mu.iter().copied().fold(f64::INFINITY, f64::min);
    let r0 = min + rng.random_range(0.0..0.9) * (max - min);
    Instance { v_lower, v_upper, mu, r0 }
}
