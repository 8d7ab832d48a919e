//! Sweeping the risk factor `w` and checking the shape of the resulting
//! `(b'V_lo b, b'V_hi b)` curve.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::DEFAULT_EPS_SCALE;
use crate::optimizer::{active_set_solve, kkt_residual, ProblemSpec, SolveMethod};
use crate::par;

/// Absolute margin a variance must improve by to count as strictly better.
pub const DOMINANCE_TOL: f64 = 1e-10;

/// Relative slack for "no worse": rounding noise only. A real increase
/// smaller than [`DOMINANCE_TOL`] still counts as worse, so nearly flat
/// frontiers are not misreported.
const TIE_RTOL: f64 = 1e-12;

fn no_worse(a: f64, b: f64) -> bool {
    a <= b + TIE_RTOL * a.abs().max(b.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub w: f64,
    pub beta: Vec<f64>,
    pub sigma2_lower: f64,
    pub sigma2_upper: f64,
    /// Blended objective `V(w)` at the optimum.
    pub objective: f64,
    pub kkt_residual: f64,
    pub method: SolveMethod,
}

/// Grid `w_k = k / (grid - 1)`.
pub fn w_grid(grid: usize) -> Result<Vec<f64>> {
    if grid < 2 {
        return Err(Error::InvalidArgument(format!("grid needs at least 2 points, got {grid}")));
    }
    let last = (grid - 1) as f64;
    Ok((0..grid).map(|k| k as f64 / last).collect())
}

/// Solve at every grid value of `w`. The `w` stored in `template` is ignored.
///
/// Bounds that are not positive definite are repaired once up front, so every
/// grid point sees the same covariance pair.
pub fn sweep_frontier(template: &ProblemSpec, grid: usize) -> Result<Vec<FrontierPoint>> {
    let ws = w_grid(grid)?;
    let mut base = template.clone();
    base.w = 0.0;
    base.validate()?;
    if base.cov.ensure_positive_definite(DEFAULT_EPS_SCALE)? {
        log::warn!("covariance bounds repaired before the frontier sweep");
    }
    par::map_slice(&ws, |&w| {
        let p = ProblemSpec { w, ..base.clone() };
        let s = active_set_solve(&p)?;
        Ok(FrontierPoint {
            w,
            kkt_residual: kkt_residual(&p, &s),
            beta: s.beta,
            sigma2_lower: s.sigma2_lower,
            sigma2_upper: s.sigma2_upper,
            objective: s.objective,
            method: s.method,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DominanceViolation {
    /// Index of the dominating point.
    pub better: usize,
    /// Index of the dominated point.
    pub worse: usize,
}

/// All ordered pairs `(a, b)` where `a` is no worse than `b` in both
/// variances (up to rounding) and better in one by more than
/// [`DOMINANCE_TOL`].
pub fn check_nondominance(points: &[FrontierPoint]) -> Vec<DominanceViolation> {
    let mut out = Vec::new();
    for (a, pa) in points.iter().enumerate() {
        for (b, pb) in points.iter().enumerate() {
            if a == b {
                continue;
            }
            let no_worse =
                no_worse(pa.sigma2_lower, pb.sigma2_lower) && no_worse(pa.sigma2_upper, pb.sigma2_upper);
            let strictly = pa.sigma2_lower < pb.sigma2_lower - DOMINANCE_TOL
                || pa.sigma2_upper < pb.sigma2_upper - DOMINANCE_TOL;
            if no_worse && strictly {
                out.push(DominanceViolation { better: a, worse: b });
            }
        }
    }
    out
}

/// Largest height of an interior point above the chord through its
/// neighbours, with points ordered by `sigma2_lower`. Zero for convex curves.
pub fn check_convexity(points: &[FrontierPoint]) -> Result<f64> {
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.sigma2_lower, p.sigma2_upper)).collect();
    convexity_defect(&xy)
}

/// [`check_convexity`] on raw `(x, y)` pairs.
pub fn convexity_defect(xy: &[(f64, f64)]) -> Result<f64> {
    if xy.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "convexity check needs at least 3 points, got {}",
            xy.len()
        )));
    }
    let mut sorted = xy.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut worst = 0.0f64;
    for win in sorted.windows(3) {
        let [(x0, y0), (x1, y1), (x2, y2)] = [win[0], win[1], win[2]];
        if x2 <= x0 {
            continue;
        }
        let chord = y0 + (y2 - y0) * (x1 - x0) / (x2 - x0);
        worst = worst.max(y1 - chord);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveScan {
    /// Grid value of `w` minimising `V(w)`, smallest `w` on ties.
    pub argmin_w: f64,
    pub min_objective: f64,
    /// Largest amount by which `V` falls below the chord of its grid
    /// neighbours. Zero when `V` is concave on the grid.
    pub concavity_defect: f64,
}

/// Scan `V(w)` over the solved grid. Points must be sorted by `w`.
pub fn scan_objective_over_w(points: &[FrontierPoint]) -> Result<ObjectiveScan> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "objective scan needs at least 3 points, got {}",
            points.len()
        )));
    }
    if points.windows(2).any(|p| p[1].w <= p[0].w) {
        return Err(Error::InvalidArgument("frontier points must have strictly increasing w".into()));
    }
    let min = points.iter().map(|p| p.objective).fold(f64::INFINITY, f64::min);
    let tie = 1e-12 * min.abs().max(f64::MIN_POSITIVE);
    let arg = points.iter().find(|p| p.objective <= min + tie).expect("nonempty");
    let mut defect = 0.0f64;
    for win in points.windows(3) {
        let (a, b, c) = (&win[0], &win[1], &win[2]);
        let t = (b.w - a.w) / (c.w - a.w);
        let chord = a.objective + t * (c.objective - a.objective);
        defect = defect.max(chord - b.objective);
    }
    Ok(ObjectiveScan {
        argmin_w: arg.w,
        min_objective: min,
        concavity_defect: defect,
    })
}

/// Summary written next to a frontier CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrontierDiagnostics {
    pub points: usize,
    pub dominance_violations: Vec<DominanceViolation>,
    pub convexity_defect: f64,
    pub argmin_w: f64,
    pub objective_concavity_defect: f64,
    pub max_kkt_residual: f64,
    pub fallback_points: usize,
    pub repaired: bool,
}

pub fn diagnose(points: &[FrontierPoint], repaired: bool) -> Result<FrontierDiagnostics> {
    let scan = scan_objective_over_w(points)?;
    Ok(FrontierDiagnostics {
        points: points.len(),
        dominance_violations: check_nondominance(points),
        convexity_defect: check_convexity(points)?,
        argmin_w: scan.argmin_w,
        objective_concavity_defect: scan.concavity_defect,
        max_kkt_residual: points.iter().map(|p| p.kkt_residual).fold(0.0, f64::max),
        fallback_points: points.iter().filter(|p| p.method == SolveMethod::Fallback).count(),
        repaired,
    })
}
