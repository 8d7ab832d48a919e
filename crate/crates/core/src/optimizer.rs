//! Long-only minimum-variance portfolio under a blended covariance.
//!
//! The problem is
//!
//! ```text
//! min  b' S b,   S = w * V_lo + (1 - w) * V_hi
//! s.t. 1'b = 1,  mu'b >= r0,  b >= 0
//! ```
//!
//! Multipliers follow the Lagrangian
//! `L = b'Sb + l1 (1'b - 1) + l2 (r0 - mu'b) - g'b` with `l2 >= 0`, `g >= 0`,
//! so stationarity reads `2 S b + l1 1 - l2 mu - g = 0`.
//!
//! On a working set `A` the subproblem solutions satisfy
//! `S_AA b_A = c1 1_A + c2 mu_A`; the coefficients `(c1, c2)` returned by
//! [`solve_equality_and_return`] relate to the Lagrangian multipliers by
//! `l1 = -2 c1` and `l2 = 2 c2`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{needs_repair, UncertainCovariance};

/// Activity tolerance for primal and dual sign decisions.
pub const ACTIVITY_TOL: f64 = 1e-10;

/// Relative threshold under which the 2x2 Gram system counts as singular.
const GRAM_RCOND: f64 = 1e-12;

const FALLBACK_MAX_ITERS: usize = 200_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    /// Expected per-period returns.
    pub mu: Vec<f64>,
    /// Minimum acceptable expected portfolio return.
    pub r0: f64,
    pub cov: UncertainCovariance,
    /// Weight on the lower covariance bound, in `[0, 1]`.
    pub w: f64,
}

impl ProblemSpec {
    pub fn new(mu: Vec<f64>, r0: f64, cov: UncertainCovariance, w: f64) -> Result<Self> {
        let p = Self { mu, r0, cov, w };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_w(self.w)?;
        let n = self.mu.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no assets".into()));
        }
        if self.cov.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} expected returns but covariance is {}x{}",
                n,
                self.cov.dim(),
                self.cov.dim()
            )));
        }
        if !self.r0.is_finite() || self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite return input".into()));
        }
        let max_mu = max_of(&self.mu);
        if self.r0 > max_mu {
            return Err(Error::Infeasible { r0: self.r0, max_mu });
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    /// The blended covariance `w V_lo + (1 - w) V_hi`.
    pub fn sigma(&self) -> Result<DMatrix<f64>> {
        blend_covariance(&self.cov, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    ActiveSet,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioSolution {
    pub beta: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: Vec<f64>,
    /// Working set at termination, ascending.
    pub active_set: Vec<usize>,
    pub sigma2_lower: f64,
    pub sigma2_upper: f64,
    pub objective: f64,
    pub method: SolveMethod,
    pub iterations: usize,
}

fn check_w(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!("w must lie in [0,1], got {w}")));
    }
    Ok(())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `w V_lo + (1 - w) V_hi`.
pub fn blend_covariance(cov: &UncertainCovariance, w: f64) -> Result<DMatrix<f64>> {
    check_w(w)?;
    Ok(&cov.v_lower * w + &cov.v_upper * (1.0 - w))
}

/// `(b'V_lo b, b'V_hi b)`.
pub fn risk_interval(beta: &[f64], cov: &UncertainCovariance) -> (f64, f64) {
    let b = DVector::from_column_slice(beta);
    (
        cov.v_lower.dot(&(&b * b.transpose())),
        cov.v_upper.dot(&(&b * b.transpose())),
    )
}

fn cholesky_solver(sigma_aa: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    sigma_aa
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("Cholesky factorisation failed on the active block".into()))
}

/// Minimiser of `b'S b` subject to `1'b = 1` only: `S^-1 1 / (1'S^-1 1)`.
pub fn solve_equality_only(sigma_aa: &DMatrix<f64>) -> Result<DVector<f64>> {
    let chol = cholesky_solver(sigma_aa)?;
    let x = chol.solve(&DVector::from_element(sigma_aa.nrows(), 1.0));
    let s = x.sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Singular(format!("1'S^-1 1 = {s}")));
    }
    Ok(x / s)
}

/// Minimiser of `b'S b` subject to `1'b = 1` and `mu'b = r0`.
///
/// Returns `(b, c1, c2)` with `S b = c1 1 + c2 mu`, where `(c1, c2)` solve
/// the Gram system `[[1'S^-1 1, 1'S^-1 mu], [mu'S^-1 1, mu'S^-1 mu]] c = (1, r0)`.
pub fn solve_equality_and_return(
    sigma_aa: &DMatrix<f64>,
    mu_a: &DVector<f64>,
    r0: f64,
) -> Result<(DVector<f64>, f64, f64)> {
    let chol = cholesky_solver(sigma_aa)?;
    let x_one = chol.solve(&DVector::from_element(sigma_aa.nrows(), 1.0));
    let x_mu = chol.solve(mu_a);
    let a = x_one.sum();
    let b = x_mu.sum();
    let c = mu_a.dot(&x_mu);
    let det = a * c - b * b;
    if !(det > GRAM_RCOND * (a * c).abs()) {
        return Err(Error::DegenerateReturnConstraint);
    }
    let solve_gram = |u: f64, v: f64| ((c * u - b * v) / det, (a * v - b * u) / det);
    let (mut c1, mut c2) = solve_gram(1.0, r0);
    let mut beta = &x_one * c1 + &x_mu * c2;
    // The Gram matrix is ill-conditioned when returns are nearly equal;
    // refine on the constraint residuals.
    for _ in 0..2 {
        let (d1, d2) = solve_gram(1.0 - beta.sum(), r0 - mu_a.dot(&beta));
        if d1 == 0.0 && d2 == 0.0 {
            break;
        }
        c1 += d1;
        c2 += d2;
        beta += &x_one * d1 + &x_mu * d2;
    }
    Ok((beta, c1, c2))
}

struct SubSolution {
    beta_a: DVector<f64>,
    c1: f64,
    c2: f64,
    return_bound: bool,
}

enum SubOutcome {
    Solved(SubSolution),
    /// The return target cannot be met on the current working set.
    Unreachable,
}

fn solve_working_set(
    sigma: &DMatrix<f64>,
    mu: &[f64],
    r0: f64,
    idx: &[usize],
    return_bound: bool,
) -> Result<SubOutcome> {
    let sigma_aa = sigma.select_rows(idx).select_columns(idx);
    let mu_a = DVector::from_iterator(idx.len(), idx.iter().map(|&i| mu[i]));
    let eq_only = |s: &DMatrix<f64>| -> Result<SubSolution> {
        let beta_a = solve_equality_only(s)?;
        let c1 = (s * &beta_a)[0];
        Ok(SubSolution {
            beta_a,
            c1,
            c2: 0.0,
            return_bound: false,
        })
    };
    if !return_bound {
        return eq_only(&sigma_aa).map(SubOutcome::Solved);
    }
    match solve_equality_and_return(&sigma_aa, &mu_a, r0) {
        Ok((beta_a, c1, c2)) => Ok(SubOutcome::Solved(SubSolution {
            beta_a,
            c1,
            c2,
            return_bound: true,
        })),
        Err(Error::DegenerateReturnConstraint) => {
            // All active returns equal: the constraint is either redundant
            // or cannot be met on this set.
            if mu_a[0] >= r0 - ACTIVITY_TOL {
                eq_only(&sigma_aa).map(SubOutcome::Solved)
            } else {
                Ok(SubOutcome::Unreachable)
            }
        }
        Err(e) => Err(e),
    }
}

fn return_tol(r0: f64) -> f64 {
    ACTIVITY_TOL * r0.abs().max(1.0)
}

enum LoopOutcome {
    Converged(PortfolioSolution),
    /// Iteration cap reached or a working set with no usable subproblem.
    GaveUp,
}

/// Working-set iteration: drop the most negative weight, release the return
/// constraint if its multiplier turns negative, readmit the smallest-index
/// asset with a negative nonnegativity multiplier.
fn run_active_set(
    p: &ProblemSpec,
    sigma: &DMatrix<f64>,
    mut active: Vec<bool>,
    mut return_bound: bool,
    cap: usize,
) -> Result<LoopOutcome> {
    let n = p.n();
    let mu = &p.mu;
    let r_tol = return_tol(p.r0);
    for iter in 0..cap {
        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        if idx.is_empty() {
            return Ok(LoopOutcome::GaveUp);
        }
        let sub = match solve_working_set(sigma, mu, p.r0, &idx, return_bound)? {
            SubOutcome::Solved(s) => s,
            SubOutcome::Unreachable => return Ok(LoopOutcome::GaveUp),
        };
        let mut beta = vec![0.0; n];
        for (k, &i) in idx.iter().enumerate() {
            beta[i] = sub.beta_a[k];
        }

        let achieved: f64 = beta.iter().zip(mu).map(|(b, m)| b * m).sum();
        if !sub.return_bound && achieved < p.r0 - r_tol {
            return_bound = true;
            continue;
        }

        // Most negative weight first, smallest index on ties.
        let drop = idx
            .iter()
            .copied()
            .filter(|&i| beta[i] < -ACTIVITY_TOL)
            .fold(None, |best: Option<usize>, i| match best {
                Some(j) if beta[j] <= beta[i] => Some(j),
                _ => Some(i),
            });
        if let Some(j) = drop {
            active[j] = false;
            continue;
        }

        let lambda1 = -2.0 * sub.c1;
        let lambda2 = 2.0 * sub.c2;
        if sub.return_bound && lambda2 < -ACTIVITY_TOL {
            return_bound = false;
            continue;
        }

        let b = DVector::from_column_slice(&beta);
        let sb = sigma * &b;
        let gamma: Vec<f64> = (0..n)
            .map(|i| {
                if active[i] {
                    0.0
                } else {
                    2.0 * (sb[i] - sub.c1 - sub.c2 * mu[i])
                }
            })
            .collect();
        if let Some(i) = (0..n).find(|&i| !active[i] && gamma[i] < -ACTIVITY_TOL) {
            active[i] = true;
            continue;
        }

        let (sigma2_lower, sigma2_upper) = risk_interval(&beta, &p.cov);
        return Ok(LoopOutcome::Converged(PortfolioSolution {
            objective: b.dot(&sb),
            beta,
            lambda1,
            lambda2: if sub.return_bound { lambda2 } else { 0.0 },
            gamma,
            active_set: idx,
            sigma2_lower,
            sigma2_upper,
            method: SolveMethod::ActiveSet,
            iterations: iter + 1,
        }));
    }
    Ok(LoopOutcome::GaveUp)
}

/// Iteration cap for the working-set loop.
pub fn iteration_cap(n: usize) -> usize {
    4 * n + 16
}

/// Solve by the working-set method, starting from all assets active and the
/// return constraint released. Delegates to [`fallback_solve`] if the loop
/// stalls.
pub fn active_set_solve(p: &ProblemSpec) -> Result<PortfolioSolution> {
    p.validate()?;
    let sigma = p.sigma()?;
    match run_active_set(p, &sigma, vec![true; p.n()], false, iteration_cap(p.n()))? {
        LoopOutcome::Converged(s) if primal_feasible(p, &s.beta) => Ok(s),
        LoopOutcome::Converged(_) => {
            log::debug!("active-set solution lost feasibility to rounding; switching to projected gradient");
            fallback_solve(p)
        }
        LoopOutcome::GaveUp => {
            log::debug!("active-set loop stalled; switching to projected gradient");
            fallback_solve(p)
        }
    }
}

/// Feasibility up to `1e-9`; ill-conditioned blocks can break the budget
/// constraint even though the working-set logic succeeded.
fn primal_feasible(p: &ProblemSpec, beta: &[f64]) -> bool {
    const TOL: f64 = 1e-9;
    (beta.iter().sum::<f64>() - 1.0).abs() <= TOL
        && beta.iter().all(|&b| b >= -TOL)
        && dot(beta, &p.mu) >= p.r0 - TOL * p.r0.abs().max(1.0)
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(y: &[f64]) -> Vec<f64> {
    let mut sorted = y.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if v - t > 0.0 {
            theta = t;
        }
    }
    y.iter().map(|v| (v - theta).max(0.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projection onto `{b : 1'b = 1, b >= 0, mu'b >= r0}`.
///
/// The minimiser is `P_simplex(y + t mu)` for the smallest `t >= 0` meeting
/// the return bound; `mu'P_simplex(y + t mu)` is nondecreasing in `t`, so `t`
/// is found by bisection.
fn project_feasible(y: &[f64], mu: &[f64], r0: f64) -> Vec<f64> {
    let base = project_simplex(y);
    if dot(&base, mu) >= r0 {
        return base;
    }
    let shifted = |t: f64| -> Vec<f64> {
        let z: Vec<f64> = y.iter().zip(mu).map(|(a, m)| a + t * m).collect();
        project_simplex(&z)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut tries = 0;
    while dot(&shifted(hi), mu) < r0 && tries < 200 {
        lo = hi;
        hi *= 2.0;
        tries += 1;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if dot(&shifted(mid), mu) >= r0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    shifted(hi)
}

/// Projected-gradient solve on the feasible set with step `1 / L`,
/// `L = 2 lambda_max(S)`, followed by a working-set polish started from the
/// support of the iterate.
pub fn fallback_solve(p: &ProblemSpec) -> Result<PortfolioSolution> {
    p.validate()?;
    let n = p.n();
    let sigma = p.sigma()?;
    let lipschitz = 2.0 * sigma.clone().symmetric_eigenvalues().max();
    if !(lipschitz > 0.0) {
        return Err(Error::Singular("blended covariance has no positive eigenvalue".into()));
    }
    let step = 1.0 / lipschitz;

    let mut beta = project_feasible(&vec![1.0 / n as f64; n], &p.mu, p.r0);
    let mut iterations = 0;
    for k in 0..FALLBACK_MAX_ITERS {
        iterations = k + 1;
        let b = DVector::from_column_slice(&beta);
        let grad = (&sigma * &b) * 2.0;
        let y: Vec<f64> = beta.iter().zip(grad.iter()).map(|(x, g)| x - step * g).collect();
        let next = project_feasible(&y, &p.mu, p.r0);
        let change = next
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beta = next;
        if change < 1e-15 {
            break;
        }
    }

    // Polish: exact solve on the identified support.
    let support: Vec<bool> = beta.iter().map(|&b| b > 1e-9).collect();
    let binding = (dot(&beta, &p.mu) - p.r0).abs() <= 1e-9 * p.r0.abs().max(1.0);
    for return_bound in [binding, !binding] {
        if let LoopOutcome::Converged(mut s) =
            run_active_set(p, &sigma, support.clone(), return_bound, iteration_cap(n))?
        {
            if !primal_feasible(p, &s.beta) {
                continue;
            }
            s.method = SolveMethod::Fallback;
            s.iterations += iterations;
            return Ok(s);
        }
    }

    // Polish failed: report the projected-gradient iterate with multipliers
    // fitted by least squares on its support.
    log::warn!("fallback polish failed; returning projected-gradient iterate");
    let b = DVector::from_column_slice(&beta);
    let sb = &sigma * &b;
    let idx: Vec<usize> = (0..n).filter(|&i| support[i]).collect();
    let design = DMatrix::from_fn(idx.len(), 2, |r, c| if c == 0 { 1.0 } else { p.mu[idx[r]] });
    let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&i| sb[i]));
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::SolverFailed(e.to_string()))?;
    let (c1, c2) = (coef[0], coef[1].max(0.0));
    let gamma = (0..n)
        .map(|i| {
            if support[i] {
                0.0
            } else {
                2.0 * (sb[i] - c1 - c2 * p.mu[i])
            }
        })
        .collect();
    let (sigma2_lower, sigma2_upper) = risk_interval(&beta, &p.cov);
    Ok(PortfolioSolution {
        objective: b.dot(&sb),
        beta,
        lambda1: -2.0 * c1,
        lambda2: 2.0 * c2,
        gamma,
        active_set: idx,
        sigma2_lower,
        sigma2_upper,
        method: SolveMethod::Fallback,
        iterations,
    })
}

/// Largest violation among stationarity, primal feasibility, dual
/// feasibility and complementary slackness.
pub fn kkt_residual(p: &ProblemSpec, s: &PortfolioSolution) -> f64 {
    let n = p.n();
    if s.beta.len() != n || s.gamma.len() != n {
        return f64::INFINITY;
    }
    let Ok(sigma) = p.sigma() else {
        return f64::INFINITY;
    };
    let b = DVector::from_column_slice(&s.beta);
    let sb = &sigma * &b;
    let achieved = dot(&s.beta, &p.mu);
    let mut worst = 0.0f64;
    for i in 0..n {
        let stationarity = 2.0 * sb[i] + s.lambda1 - s.lambda2 * p.mu[i] - s.gamma[i];
        worst = worst
            .max(stationarity.abs())
            .max(-s.beta[i])
            .max(-s.gamma[i])
            .max((s.gamma[i] * s.beta[i]).abs());
    }
    worst
        .max((s.beta.iter().sum::<f64>() - 1.0).abs())
        .max(p.r0 - achieved)
        .max(-s.lambda2)
        .max((s.lambda2 * (p.r0 - achieved)).abs())
}

/// Which recovery branches fired while solving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SolveTrace {
    /// A covariance bound was lifted to positive definiteness.
    pub repaired: bool,
    /// The projected-gradient solver produced the answer.
    pub fallback: bool,
}

/// Positive-definiteness test, repair when needed, active-set solve, and
/// projected-gradient fallback on failure.
pub fn solve_with_safeguards(
    mut p: ProblemSpec,
    eps_scale: f64,
) -> Result<(PortfolioSolution, ProblemSpec, SolveTrace)> {
    p.validate()?;
    let mut trace = SolveTrace::default();
    let pd_failure = needs_repair(&p.cov.v_lower, eps_scale)? || needs_repair(&p.cov.v_upper, eps_scale)?;
    if pd_failure {
        trace.repaired = p.cov.ensure_positive_definite(eps_scale)?;
    }
    let solution = match active_set_solve(&p) {
        Ok(s) => s,
        Err(Error::Singular(msg)) => {
            log::debug!("active-set solve failed ({msg}); repairing and retrying");
            let mut repaired = p.cov.clone();
            // Blends of two PD matrices are PD, so lifting both bounds
            // guarantees a factorisable subproblem.
            repaired.v_lower = crate::estimator::psd_repair(&repaired.v_lower, eps_scale.max(1e-6))?;
            repaired.v_upper = crate::estimator::psd_repair(&repaired.v_upper, eps_scale.max(1e-6))?;
            repaired.repaired = true;
            p.cov = repaired;
            trace.repaired = true;
            match active_set_solve(&p) {
                Ok(s) => s,
                Err(_) => fallback_solve(&p)?,
            }
        }
        Err(e) => return Err(e),
    };
    trace.fallback = solution.method == SolveMethod::Fallback;
    Ok((solution, p, trace))
}
