//! Moving-block estimation of mean and variance bounds.
//!
//! A series of length `T` is scanned as `m = T - n1 + 1` overlapping blocks
//! of length `n1`. Mean bounds are the extreme block means, the lower
//! variance is the smallest block sample variance, and the upper variance is
//! the largest block mean square of the series after each disjoint
//! `n2`-chunk has been demeaned. Cross-moment bounds apply the mean-bound
//! estimator to the product series `x_i * x_j`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::ReturnPanel;
use crate::par;

/// Default relative eigenvalue floor used by [`psd_repair`].
pub const DEFAULT_EPS_SCALE: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Rolling block length.
    pub n1: usize,
    /// Disjoint mini-block length used to demean before the upper variance.
    pub n2: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { n1: 60, n2: 20 }
    }
}

impl BlockConfig {
    pub fn new(n1: usize, n2: usize) -> Result<Self> {
        let cfg = Self { n1, n2 };
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.n1 < 2 {
            return Err(Error::InvalidArgument(format!(
                "block length n1 must be >= 2, got {}",
                self.n1
            )));
        }
        if self.n2 == 0 || self.n2 > self.n1 {
            return Err(Error::InvalidArgument(format!(
                "mini-block length n2 must lie in [1, n1={}], got {}",
                self.n1, self.n2
            )));
        }
        Ok(())
    }

    /// Check the configuration against a series of length `t`.
    pub fn validate(&self, t: usize) -> Result<()> {
        self.check()?;
        if self.n1 > t {
            return Err(Error::InvalidArgument(format!(
                "block length n1={} exceeds series length {t}",
                self.n1
            )));
        }
        Ok(())
    }

    /// Number of rolling blocks for a series of length `t`.
    pub fn blocks(&self, t: usize) -> usize {
        t + 1 - self.n1
    }
}

/// Point mean, mean bounds and variance bounds of one asset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GNormalParams {
    pub mu: f64,
    pub mu_lower: f64,
    pub mu_upper: f64,
    pub var_lower: f64,
    pub var_upper: f64,
}

/// Elementwise lower and upper covariance bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertainCovariance {
    pub v_lower: DMatrix<f64>,
    pub v_upper: DMatrix<f64>,
    /// Set once either matrix has been through [`psd_repair`].
    pub repaired: bool,
}

impl UncertainCovariance {
    /// Validate shapes, symmetry and elementwise ordering.
    pub fn new(v_lower: DMatrix<f64>, v_upper: DMatrix<f64>) -> Result<Self> {
        let cov = Self::from_estimates(v_lower, v_upper)?;
        if let Some((i, j)) = cov.ordering_violation() {
            return Err(Error::InvalidArgument(format!(
                "lower bound {} exceeds upper bound {} at entry ({i}, {j})",
                cov.v_lower[(i, j)],
                cov.v_upper[(i, j)]
            )));
        }
        Ok(cov)
    }

    /// Validate shapes and symmetry only. Estimated bounds come from separate
    /// estimators and may cross; crossings are logged.
    pub fn from_estimates(v_lower: DMatrix<f64>, v_upper: DMatrix<f64>) -> Result<Self> {
        let n = v_lower.nrows();
        if !v_lower.is_square() || v_upper.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "covariance bounds must be square and equal-sized, got {:?} and {:?}",
                v_lower.shape(),
                v_upper.shape()
            )));
        }
        for m in [&v_lower, &v_upper] {
            let asym = max_asymmetry(m);
            if asym > SYMMETRY_TOL * scale_of(m) {
                return Err(Error::NotSymmetric(asym));
            }
        }
        let cov = Self {
            v_lower,
            v_upper,
            repaired: false,
        };
        if let Some((i, j)) = cov.ordering_violation() {
            log::warn!(
                "entry ({i}, {j}): lower bound {} exceeds upper bound {}",
                cov.v_lower[(i, j)],
                cov.v_upper[(i, j)]
            );
        }
        Ok(cov)
    }

    /// First entry `(row, col)` where the lower bound exceeds the upper bound.
    pub fn ordering_violation(&self) -> Option<(usize, usize)> {
        let n = self.dim();
        let scale = scale_of(&self.v_lower).max(scale_of(&self.v_upper));
        self.v_lower
            .iter()
            .zip(self.v_upper.iter())
            .position(|(lo, hi)| *lo > *hi + 1e-12 * scale)
            .map(|k| (k % n, k / n))
    }

    /// Both bounds equal to `v`: no uncertainty.
    pub fn degenerate(v: DMatrix<f64>) -> Result<Self> {
        Self::new(v.clone(), v)
    }

    pub fn dim(&self) -> usize {
        self.v_lower.nrows()
    }

    /// Smallest eigenvalues of `(v_lower, v_upper)`.
    pub fn min_eigenvalues(&self) -> Result<(f64, f64)> {
        Ok((psd_check(&self.v_lower)?, psd_check(&self.v_upper)?))
    }

    /// Repair whichever bound falls below the eigenvalue floor. Returns
    /// whether anything changed.
    ///
    /// Clipping raises eigenvalues, so a repaired lower bound can exceed the
    /// upper bound in individual entries by about the size of the clip.
    pub fn ensure_positive_definite(&mut self, eps_scale: f64) -> Result<bool> {
        let mut changed = false;
        for m in [&mut self.v_lower, &mut self.v_upper] {
            if needs_repair(m, eps_scale)? {
                *m = psd_repair(m, eps_scale)?;
                changed = true;
            }
        }
        self.repaired |= changed;
        Ok(changed)
    }
}

fn scale_of(m: &DMatrix<f64>) -> f64 {
    m.amax().max(1.0)
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Sums of every length-`len` window. The running sum is recomputed from
/// scratch every `len` steps so rounding drift stays bounded.
fn window_sums(values: &[f64], len: usize) -> Vec<f64> {
    let m = values.len() + 1 - len;
    let mut out = Vec::with_capacity(m);
    let mut sum = 0.0;
    for l in 0..m {
        if l % len == 0 {
            sum = values[l..l + len].iter().sum();
        } else {
            sum += values[l + len - 1] - values[l - 1];
        }
        out.push(sum);
    }
    out
}

fn check_block_len(t: usize, n1: usize) -> Result<()> {
    if n1 < 2 {
        return Err(Error::InvalidArgument(format!(
            "block length must be >= 2, got {n1}"
        )));
    }
    if n1 > t {
        return Err(Error::InvalidArgument(format!(
            "block length {n1} exceeds series length {t}"
        )));
    }
    Ok(())
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Means of the `T - n1 + 1` overlapping blocks of length `n1`.
pub fn block_means(x: &[f64], n1: usize) -> Result<Vec<f64>> {
    check_block_len(x.len(), n1)?;
    // Shift by the first value: constant series come out exact.
    let shift = x[0];
    let shifted: Vec<f64> = x.iter().map(|v| v - shift).collect();
    let len = n1 as f64;
    Ok(window_sums(&shifted, n1)
        .into_iter()
        .map(|s| shift + s / len)
        .collect())
}

/// `(mu, mu_lower, mu_upper)`: the full-sample mean and the extreme block
/// means.
pub fn estimate_mean_bounds(x: &[f64], cfg: &BlockConfig) -> Result<(f64, f64, f64)> {
    cfg.validate(x.len())?;
    let means = block_means(x, cfg.n1)?;
    let (lo, hi) = min_max(&means);
    let mu = x.iter().sum::<f64>() / x.len() as f64;
    Ok((mu, lo, hi))
}

/// Smallest block sample variance (divisor `n1 - 1`, each block centred on
/// its own mean).
pub fn estimate_lower_variance(x: &[f64], cfg: &BlockConfig) -> Result<f64> {
    cfg.validate(x.len())?;
    let n1 = cfg.n1;
    let shift = x[0];
    let y: Vec<f64> = x.iter().map(|v| v - shift).collect();
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let s1 = window_sums(&y, n1);
    let s2 = window_sums(&y2, n1);
    let len = n1 as f64;
    let var = s1
        .iter()
        .zip(&s2)
        .map(|(a, b)| ((b - a * a / len) / (len - 1.0)).max(0.0))
        .fold(f64::INFINITY, f64::min);
    Ok(var)
}

/// Subtract from each value the mean of its disjoint `n2`-chunk. A trailing
/// partial chunk is demeaned by its own mean.
pub fn demean_miniblocks(x: &[f64], n2: usize) -> Result<Vec<f64>> {
    if n2 == 0 {
        return Err(Error::InvalidArgument("mini-block length must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(x.len());
    for chunk in x.chunks(n2) {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        out.extend(chunk.iter().map(|v| v - mean));
    }
    Ok(out)
}

/// Largest rolling-block mean square (divisor `n1 - 1`) of the
/// mini-block-demeaned series.
pub fn estimate_upper_variance(x: &[f64], cfg: &BlockConfig) -> Result<f64> {
    cfg.validate(x.len())?;
    let squares: Vec<f64> = demean_miniblocks(x, cfg.n2)?
        .into_iter()
        .map(|v| v * v)
        .collect();
    let denom = (cfg.n1 - 1) as f64;
    Ok(window_sums(&squares, cfg.n1)
        .into_iter()
        .map(|s| s.max(0.0) / denom)
        .fold(0.0, f64::max))
}

/// Lower and upper cross-moment bounds: extreme block means of
/// `xi * xj`, minus `mu_i * mu_j`.
pub fn estimate_cross_bounds(
    xi: &[f64],
    xj: &[f64],
    mu_i: f64,
    mu_j: f64,
    cfg: &BlockConfig,
) -> Result<(f64, f64)> {
    if xi.len() != xj.len() {
        return Err(Error::DimensionMismatch(format!(
            "series lengths differ: {} vs {}",
            xi.len(),
            xj.len()
        )));
    }
    cfg.validate(xi.len())?;
    let product: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a * b).collect();
    let (lo, hi) = min_max(&block_means(&product, cfg.n1)?);
    let centre = mu_i * mu_j;
    Ok((lo - centre, hi - centre))
}

/// All per-asset estimates for one series.
pub fn estimate_params(x: &[f64], cfg: &BlockConfig) -> Result<GNormalParams> {
    let (mu, mu_lower, mu_upper) = estimate_mean_bounds(x, cfg)?;
    if !(mu_lower <= mu && mu <= mu_upper) {
        log::warn!("full-sample mean {mu} outside block-mean range [{mu_lower}, {mu_upper}]");
    }
    Ok(GNormalParams {
        mu,
        mu_lower,
        mu_upper,
        var_lower: estimate_lower_variance(x, cfg)?,
        var_upper: estimate_upper_variance(x, cfg)?,
    })
}

/// Estimate per-asset parameters and the covariance bound pair from column
/// slices of equal length. Off-diagonal entries are computed once per pair
/// and mirrored.
pub fn estimate_from_columns(
    columns: &[&[f64]],
    cfg: &BlockConfig,
) -> Result<(Vec<GNormalParams>, UncertainCovariance)> {
    let n = columns.len();
    if n == 0 {
        return Err(Error::EmptyPanel);
    }
    let t = columns[0].len();
    if columns.iter().any(|c| c.len() != t) {
        return Err(Error::DimensionMismatch("columns differ in length".into()));
    }
    cfg.validate(t)?;

    let params = par::map_slice(columns, |c| estimate_params(c, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let cross = par::map_slice(&pairs, |&(i, j)| {
        estimate_cross_bounds(columns[i], columns[j], params[i].mu, params[j].mu, cfg)
    });

    let mut lower = DMatrix::zeros(n, n);
    let mut upper = DMatrix::zeros(n, n);
    for (i, p) in params.iter().enumerate() {
        lower[(i, i)] = p.var_lower;
        upper[(i, i)] = p.var_upper;
    }
    for (&(i, j), bounds) in pairs.iter().zip(cross) {
        let (lo, hi) = bounds?;
        lower[(i, j)] = lo;
        lower[(j, i)] = lo;
        upper[(i, j)] = hi;
        upper[(j, i)] = hi;
    }
    Ok((params, UncertainCovariance::from_estimates(lower, upper)?))
}

pub fn build_uncertain_covariance(
    panel: &ReturnPanel,
    cfg: &BlockConfig,
) -> Result<(Vec<GNormalParams>, UncertainCovariance)> {
    estimate_from_columns(&panel.columns(0, panel.n_periods()), cfg)
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {:?}",
            m.shape()
        )));
    }
    let asym = max_asymmetry(m);
    if asym > SYMMETRY_TOL * scale_of(m) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn psd_check(m: &DMatrix<f64>) -> Result<f64> {
    check_symmetric(m)?;
    if m.nrows() == 0 {
        return Err(Error::EmptyPanel);
    }
    Ok(m.clone().symmetric_eigenvalues().min())
}

/// Eigenvalue floor `eps_scale * max(sum(max(l, 0)) / n, 1e-12)`.
///
/// For positive semidefinite inputs the sum is the trace. Using only the
/// positive part keeps the floor (nearly) unchanged after a repair, so
/// repairing twice is the same as repairing once.
fn eigen_floor(eigenvalues: &[f64], eps_scale: f64) -> f64 {
    let n = eigenvalues.len() as f64;
    let positive: f64 = eigenvalues.iter().map(|l| l.max(0.0)).sum();
    eps_scale * (positive / n).max(1e-12)
}

/// The floor, if some eigenvalue lies below it by more than rounding noise.
/// The slack keeps a freshly repaired matrix from being flagged again.
fn below_floor(eigs: &[f64], eps_scale: f64) -> Option<f64> {
    let floor = eigen_floor(eigs, eps_scale);
    let spread = eigs.iter().fold(0.0f64, |a, l| a.max(l.abs()));
    let slack = 64.0 * f64::EPSILON * spread;
    eigs.iter().any(|&l| l < floor - slack).then_some(floor)
}

/// Whether [`psd_repair`] would modify `m`.
pub fn needs_repair(m: &DMatrix<f64>, eps_scale: f64) -> Result<bool> {
    check_symmetric(m)?;
    let eig = m.clone().symmetric_eigenvalues();
    Ok(below_floor(eig.as_slice(), eps_scale).is_some())
}

/// Nearest (in Frobenius norm) matrix whose eigenvalues are all at least the
/// floor: eigenvalues below the floor are raised to it and the matrix is
/// rebuilt. Matrices already above the floor are returned unchanged.
pub fn psd_repair(m: &DMatrix<f64>, eps_scale: f64) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "expected a square matrix, got {:?}",
            m.shape()
        )));
    }
    if !(eps_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps_scale must be positive, got {eps_scale}"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let SymmetricEigen {
        eigenvectors,
        mut eigenvalues,
    } = SymmetricEigen::new(sym);
    let Some(floor) = below_floor(eigenvalues.as_slice(), eps_scale) else {
        return Ok(m.clone());
    };
    eigenvalues.apply(|l| *l = l.max(floor));
    let rebuilt = &eigenvectors * DMatrix::from_diagonal(&eigenvalues) * eigenvectors.transpose();
    Ok((&rebuilt + rebuilt.transpose()) * 0.5)
}
