//! Rolling-window out-of-sample evaluation.
//!
//! On each out-of-sample day `t` the model is re-estimated on the trailing
//! `window` days `[t - window, t - 1]`, solved, and the weights are applied
//! to the returns of day `t`. Rebalancing is daily.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    estimate_from_columns, needs_repair, psd_repair, BlockConfig, UncertainCovariance, DEFAULT_EPS_SCALE,
};
use crate::market_data::ReturnPanel;
use crate::optimizer::{solve_with_safeguards, ProblemSpec};
use crate::par;

pub const TRADING_DAYS: f64 = 252.0;

/// Tolerance for weight rows to count as simplex points in [`turnover`].
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum R0Rule {
    Fixed(f64),
    /// Mean of the in-window asset means; always attainable.
    EqualWeightMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestConfig {
    pub window: usize,
    /// Out-of-sample days to evaluate; `None` runs to the end of the panel.
    pub horizon: Option<usize>,
    /// Risk factors to evaluate in one pass.
    pub ws: Vec<f64>,
    pub r0_rule: R0Rule,
    pub block: BlockConfig,
    pub baseline: bool,
    /// Use the sample covariance as both bounds, collapsing the model onto
    /// the baseline.
    pub inject_sample_covariance: bool,
    pub eps_scale: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            window: 252,
            horizon: None,
            ws: vec![1.0],
            r0_rule: R0Rule::EqualWeightMean,
            block: BlockConfig::default(),
            baseline: true,
            inject_sample_covariance: false,
            eps_scale: DEFAULT_EPS_SCALE,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self, t: usize) -> Result<()> {
        if self.ws.is_empty() {
            return Err(Error::InvalidArgument("no risk factor given".into()));
        }
        if let Some(w) = self.ws.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::InvalidArgument(format!("w must lie in [0,1], got {w}")));
        }
        if self.window < 2 || self.window < self.block.n1 {
            return Err(Error::InvalidArgument(format!(
                "window {} must be at least 2 and at least n1 = {}",
                self.window, self.block.n1
            )));
        }
        if self.window + 1 > t {
            return Err(Error::InvalidArgument(format!(
                "window {} leaves no out-of-sample day in {} periods",
                self.window, t
            )));
        }
        if self.horizon == Some(0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        self.block.validate(self.window)
    }

    pub fn out_of_sample_days(&self, t: usize) -> usize {
        let available = t.saturating_sub(self.window);
        self.horizon.map_or(available, |h| h.min(available))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Final wealth.
    pub cw: f64,
    /// Annualised Sharpe ratio; `None` with fewer than two returns or zero
    /// variance.
    pub sr: Option<f64>,
    /// Maximum drawdown as a non-positive fraction.
    pub md: f64,
    /// Mean and sample standard deviation of `0.5 * |b_t - b_{t-1}|_1`.
    pub turnover_mean: Option<f64>,
    pub turnover_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRun {
    /// Risk factor, absent for the baseline.
    pub w: Option<f64>,
    /// Weights held on each out-of-sample day.
    pub weights: Vec<Vec<f64>>,
    pub returns: Vec<f64>,
    /// Starts at 1.0, one entry longer than `returns`.
    pub wealth: Vec<f64>,
    pub metrics: Metrics,
    /// Days on which the solve failed and the previous weights were kept.
    pub carried_days: Vec<usize>,
    /// Days on which a covariance bound was repaired.
    pub repaired_days: usize,
    /// Days solved by the projected-gradient fallback.
    pub fallback_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestReport {
    pub assets: Vec<String>,
    pub window: usize,
    pub r0_rule: R0Rule,
    /// Last in-sample date; the wealth paths start here.
    pub start_date: NaiveDate,
    /// Out-of-sample dates.
    pub dates: Vec<NaiveDate>,
    /// Return target used on each day.
    pub r0: Vec<f64>,
    pub models: Vec<ModelRun>,
    pub baseline: Option<ModelRun>,
}

/// Sample covariance with divisor `T - 1`, repaired if not positive
/// definite. Returns the matrix and whether it was repaired.
pub fn mv_baseline_covariance(columns: &[&[f64]], eps_scale: f64) -> Result<(DMatrix<f64>, bool)> {
    let n = columns.len();
    if n == 0 {
        return Err(Error::EmptyPanel);
    }
    let t = columns[0].len();
    if t < 2 {
        return Err(Error::InvalidArgument("sample covariance needs at least 2 periods".into()));
    }
    if columns.iter().any(|c| c.len() != t) {
        return Err(Error::DimensionMismatch("columns differ in length".into()));
    }
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / t as f64).collect();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = columns[i]
                .iter()
                .zip(columns[j])
                .map(|(a, b)| (a - means[i]) * (b - means[j]))
                .sum();
            let v = s / (t - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if needs_repair(&cov, eps_scale)? {
        log::debug!("sample covariance is not positive definite; repairing");
        Ok((psd_repair(&cov, eps_scale)?, true))
    } else {
        Ok((cov, false))
    }
}

/// `W_0 = 1`, `W_t = W_{t-1} (1 + r_t)`.
pub fn cumulative_wealth(returns: &[f64]) -> Result<Vec<f64>> {
    let mut path = Vec::with_capacity(returns.len() + 1);
    let mut w = 1.0;
    path.push(w);
    for &r in returns {
        if !(r > -1.0) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!("return {r} would wipe out wealth")));
        }
        w *= 1.0 + r;
        path.push(w);
    }
    Ok(path)
}

/// `mean(r - rf) / sd(r) * sqrt(periods_per_year)` with the `N - 1` divisor.
pub fn sharpe_ratio(returns: &[f64], rf: f64, periods_per_year: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::InvalidArgument("Sharpe ratio needs at least 2 returns".into()));
    }
    if returns.iter().all(|&r| r == returns[0]) {
        return Err(Error::ZeroVariance);
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((mean - rf) / sd * periods_per_year.sqrt())
}

/// `-max_t (1 - W_t / max_{s<=t} W_s)`.
pub fn max_drawdown(wealth: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &w in wealth {
        peak = peak.max(w);
        worst = worst.max(1.0 - w / peak);
    }
    if worst == 0.0 {
        0.0
    } else {
        -worst
    }
}

/// Mean and sample standard deviation of per-rebalance turnover
/// `0.5 * sum_i |b_{t,i} - b_{t-1,i}|`. A single rebalance has zero spread.
pub fn turnover(weights: &[Vec<f64>]) -> Result<(f64, f64)> {
    if weights.len() < 2 {
        return Err(Error::InvalidArgument("turnover needs at least 2 weight rows".into()));
    }
    let n = weights[0].len();
    for (t, row) in weights.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch(format!("weight row {t} has {} entries", row.len())));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&b| b < -SIMPLEX_TOL) {
            return Err(Error::InvalidArgument(format!("weight row {t} is not on the simplex")));
        }
    }
    let taus: Vec<f64> = weights
        .windows(2)
        .map(|p| 0.5 * p[0].iter().zip(&p[1]).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .collect();
    let m = taus.len() as f64;
    let mean = taus.iter().sum::<f64>() / m;
    let sd = if taus.len() < 2 {
        0.0
    } else {
        (taus.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (m - 1.0)).sqrt()
    };
    Ok((mean, sd))
}

fn metrics(returns: &[f64], weights: &[Vec<f64>]) -> Result<Metrics> {
    let wealth = cumulative_wealth(returns)?;
    let sr = match sharpe_ratio(returns, 0.0, TRADING_DAYS) {
        Ok(v) => Some(v),
        Err(Error::ZeroVariance) | Err(Error::InvalidArgument(_)) => None,
        Err(e) => return Err(e),
    };
    let (turnover_mean, turnover_std) = if weights.len() >= 2 {
        let (m, s) = turnover(weights)?;
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    Ok(Metrics {
        cw: *wealth.last().expect("wealth path is nonempty"),
        sr,
        md: max_drawdown(&wealth),
        turnover_mean,
        turnover_std,
    })
}

/// Outcome of one model on one day.
#[derive(Debug, Clone)]
enum DaySolve {
    Solved { beta: Vec<f64>, repaired: bool, fallback: bool },
    Failed(String),
}

struct DayResult {
    r0: f64,
    models: Vec<DaySolve>,
    baseline: Option<DaySolve>,
}

fn solve_day(p: ProblemSpec, eps_scale: f64, repaired_input: bool) -> Result<DaySolve> {
    match solve_with_safeguards(p, eps_scale) {
        Ok((s, _, trace)) => Ok(DaySolve::Solved {
            beta: s.beta,
            repaired: trace.repaired || repaired_input,
            fallback: trace.fallback,
        }),
        Err(e @ (Error::Infeasible { .. } | Error::SolverFailed(_) | Error::Singular(_))) => {
            Ok(DaySolve::Failed(e.to_string()))
        }
        Err(e) => Err(e),
    }
}

fn run_day(panel: &ReturnPanel, cfg: &BacktestConfig, t: usize) -> Result<DayResult> {
    let cols = panel.columns(t - cfg.window, t);
    let (params, estimated) = estimate_from_columns(&cols, &cfg.block)?;
    let mu: Vec<f64> = params.iter().map(|p| p.mu).collect();
    let r0 = match cfg.r0_rule {
        R0Rule::Fixed(v) => v,
        // Rounding can push the average of equal means above their common
        // value.
        R0Rule::EqualWeightMean => (mu.iter().sum::<f64>() / mu.len() as f64)
            .min(mu.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
    };
    let sample = if cfg.baseline || cfg.inject_sample_covariance {
        Some(mv_baseline_covariance(&cols, cfg.eps_scale)?)
    } else {
        None
    };
    let (cov, cov_repaired) = match (&sample, cfg.inject_sample_covariance) {
        (Some((v, rep)), true) => (UncertainCovariance::degenerate(v.clone())?, *rep),
        _ => (estimated, false),
    };
    let models = cfg
        .ws
        .iter()
        .map(|&w| {
            let p = ProblemSpec { mu: mu.clone(), r0, cov: cov.clone(), w };
            solve_day(p, cfg.eps_scale, cov_repaired)
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = match (&sample, cfg.baseline) {
        (Some((v, rep)), true) => {
            let p = ProblemSpec {
                mu,
                r0,
                cov: UncertainCovariance::degenerate(v.clone())?,
                w: 1.0,
            };
            Some(solve_day(p, cfg.eps_scale, *rep)?)
        }
        _ => None,
    };
    Ok(DayResult { r0, models, baseline })
}

/// Turn per-day solves into a model run, carrying weights forward over
/// failed days (equal weights if the first day fails).
fn assemble(
    panel: &ReturnPanel,
    first_day: usize,
    w: Option<f64>,
    days: &[&DaySolve],
) -> Result<ModelRun> {
    let n = panel.n_assets();
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(days.len());
    let mut carried_days = Vec::new();
    let mut repaired_days = 0;
    let mut fallback_days = 0;
    for (k, day) in days.iter().enumerate() {
        match day {
            DaySolve::Solved { beta, repaired, fallback } => {
                weights.push(beta.clone());
                repaired_days += usize::from(*repaired);
                fallback_days += usize::from(*fallback);
            }
            DaySolve::Failed(reason) => {
                log::warn!("day {}: {reason}; keeping previous weights", first_day + k);
                carried_days.push(k);
                let prev = weights.last().cloned().unwrap_or_else(|| vec![1.0 / n as f64; n]);
                weights.push(prev);
            }
        }
    }
    let returns: Vec<f64> = weights
        .iter()
        .enumerate()
        .map(|(k, beta)| {
            (0..n)
                .map(|i| beta[i] * panel.returns[(first_day + k, i)])
                .sum()
        })
        .collect();
    let metrics = metrics(&returns, &weights)?;
    Ok(ModelRun {
        w,
        wealth: cumulative_wealth(&returns)?,
        weights,
        returns,
        metrics,
        carried_days,
        repaired_days,
        fallback_days,
    })
}

pub fn rolling_backtest(panel: &ReturnPanel, cfg: &BacktestConfig) -> Result<BacktestReport> {
    let t = panel.n_periods();
    cfg.validate(t)?;
    let count = cfg.out_of_sample_days(t);
    let first = cfg.window;
    let days = par::map_range(count, |k| run_day(panel, cfg, first + k))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let models = cfg
        .ws
        .iter()
        .enumerate()
        .map(|(m, &w)| {
            let per_day: Vec<&DaySolve> = days.iter().map(|d| &d.models[m]).collect();
            assemble(panel, first, Some(w), &per_day)
        })
        .collect::<Result<Vec<_>>>()?;
    let baseline = if cfg.baseline {
        let per_day: Vec<&DaySolve> = days
            .iter()
            .map(|d| d.baseline.as_ref().expect("baseline solved when enabled"))
            .collect();
        Some(assemble(panel, first, None, &per_day)?)
    } else {
        None
    };

    Ok(BacktestReport {
        assets: panel.assets.clone(),
        window: cfg.window,
        r0_rule: cfg.r0_rule,
        start_date: panel.dates[first - 1],
        dates: panel.dates[first..first + count].to_vec(),
        r0: days.iter().map(|d| d.r0).collect(),
        models,
        baseline,
    })
}

/// One row of the comparison table. The baseline block is shared by all rows
/// and filled on the first row only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub w: f64,
    pub sle_cw: f64,
    pub sle_sr: Option<f64>,
    pub sle_md: f64,
    pub mv_cw: Option<f64>,
    pub mv_sr: Option<f64>,
    pub mv_md: Option<f64>,
}

pub fn compare_models(report: &BacktestReport) -> Result<Vec<TableRow>> {
    let baseline = report
        .baseline
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("comparison needs the baseline model".into()))?;
    if report.models.is_empty() {
        return Err(Error::InvalidArgument("no risk factor in the report".into()));
    }
    Ok(report
        .models
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let first = k == 0;
            TableRow {
                w: m.w.unwrap_or(f64::NAN),
                sle_cw: m.metrics.cw,
                sle_sr: m.metrics.sr,
                sle_md: m.metrics.md,
                mv_cw: first.then_some(baseline.metrics.cw),
                mv_sr: if first { baseline.metrics.sr } else { None },
                mv_md: first.then_some(baseline.metrics.md),
            }
        })
        .collect())
}
