//! On-disk formats: parameter files, solution and backtest reports as JSON,
//! frontier and comparison tables as CSV.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! rendering the same value twice gives identical bytes.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::backtest::{compare_models, BacktestReport, ModelRun, TableRow};
use crate::error::{Error, Result};
use crate::estimator::{BlockConfig, GNormalParams, UncertainCovariance};
use crate::frontier::FrontierPoint;
use crate::optimizer::{PortfolioSolution, SolveTrace};

pub const PARAMS_SCHEMA: &str = "varband.params/1";
pub const SOLUTION_SCHEMA: &str = "varband.solution/1";
pub const BACKTEST_SCHEMA: &str = "varband.backtest/1";

pub const TABLE_HEADER: [&str; 7] = ["w", "sle_cw", "sle_sr", "sle_md", "mv_cw", "mv_sr", "mv_md"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetParams {
    pub name: String,
    pub mu: f64,
    pub mu_lower: f64,
    pub mu_upper: f64,
    pub var_lower: f64,
    pub var_upper: f64,
}

/// Estimated parameters as written by `estimate` and read by `optimize`,
/// `frontier`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub schema: String,
    pub n1: usize,
    pub n2: usize,
    pub periods: usize,
    pub assets: Vec<AssetParams>,
    /// Row-major.
    pub v_lower: Vec<Vec<f64>>,
    pub v_upper: Vec<Vec<f64>>,
    pub repaired: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::DimensionMismatch(format!("{what} is not square")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ParamsDocument {
    pub fn new(
        names: &[String],
        params: &[GNormalParams],
        cov: &UncertainCovariance,
        cfg: &BlockConfig,
        periods: usize,
    ) -> Self {
        let mut warnings = Vec::new();
        let assets = names
            .iter()
            .zip(params)
            .map(|(name, p)| {
                if p.mu < p.mu_lower || p.mu > p.mu_upper {
                    warnings.push(format!("{name}: mean lies outside its block bounds"));
                }
                AssetParams {
                    name: name.clone(),
                    mu: p.mu,
                    mu_lower: p.mu_lower,
                    mu_upper: p.mu_upper,
                    var_lower: p.var_lower,
                    var_upper: p.var_upper,
                }
            })
            .collect();
        if let Some((i, j)) = cov.ordering_violation() {
            warnings.push(format!("covariance bounds cross at entry ({i}, {j})"));
        }
        Self {
            schema: PARAMS_SCHEMA.to_string(),
            n1: cfg.n1,
            n2: cfg.n2,
            periods,
            assets,
            v_lower: rows_of(&cov.v_lower),
            v_upper: rows_of(&cov.v_upper),
            repaired: cov.repaired,
            warnings,
        }
    }

    pub fn mu(&self) -> Vec<f64> {
        self.assets.iter().map(|a| a.mu).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.assets.iter().map(|a| a.name.clone()).collect()
    }

    pub fn covariance(&self) -> Result<UncertainCovariance> {
        if self.schema != PARAMS_SCHEMA {
            return Err(Error::Malformed(format!("unsupported params schema {:?}", self.schema)));
        }
        let lo = matrix_from_rows(&self.v_lower, "v_lower")?;
        let hi = matrix_from_rows(&self.v_upper, "v_upper")?;
        if lo.nrows() != self.assets.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} assets but {}x{} covariance bounds",
                self.assets.len(),
                lo.nrows(),
                lo.nrows()
            )));
        }
        let mut cov = UncertainCovariance::from_estimates(lo, hi)?;
        cov.repaired = self.repaired;
        Ok(cov)
    }
}

/// Output of the `optimize` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolutionDocument {
    pub schema: &'static str,
    pub w: f64,
    pub r0: f64,
    pub beta: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: Vec<f64>,
    pub active_set: Vec<usize>,
    pub sigma2_lower: f64,
    pub sigma2_upper: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub solver: crate::optimizer::SolveMethod,
    pub repaired: bool,
}

impl SolutionDocument {
    pub fn new(s: &PortfolioSolution, w: f64, r0: f64, kkt: f64, trace: SolveTrace) -> Self {
        Self {
            schema: SOLUTION_SCHEMA,
            w,
            r0,
            beta: s.beta.clone(),
            lambda1: s.lambda1,
            lambda2: s.lambda2,
            gamma: s.gamma.clone(),
            active_set: s.active_set.clone(),
            sigma2_lower: s.sigma2_lower,
            sigma2_upper: s.sigma2_upper,
            objective: s.objective,
            kkt_residual: kkt,
            solver: s.method,
            repaired: trace.repaired,
        }
    }
}

/// Unit conventions stated alongside every backtest report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conventions {
    pub rebalancing: &'static str,
    pub sharpe: &'static str,
    pub max_drawdown: &'static str,
    pub turnover: &'static str,
}

pub const CONVENTIONS: Conventions = Conventions {
    rebalancing: "daily; weights estimated on the preceding window are applied to the next day",
    sharpe: "mean / sample sd (N-1) * sqrt(252), risk-free rate 0",
    max_drawdown: "negative fraction of the running peak",
    turnover: "0.5 * L1 distance between consecutive weight vectors, as a fraction",
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestDocument<'a> {
    pub schema: &'static str,
    pub conventions: Conventions,
    pub table: Vec<TableRow>,
    #[serde(flatten)]
    pub report: &'a BacktestReport,
}

pub fn backtest_document(report: &BacktestReport) -> Result<BacktestDocument<'_>> {
    let table = if report.baseline.is_some() {
        compare_models(report)?
    } else {
        report
            .models
            .iter()
            .map(|m| TableRow {
                w: m.w.unwrap_or(f64::NAN),
                sle_cw: m.metrics.cw,
                sle_sr: m.metrics.sr,
                sle_md: m.metrics.md,
                mv_cw: None,
                mv_sr: None,
                mv_md: None,
            })
            .collect()
    };
    Ok(BacktestDocument {
        schema: BACKTEST_SCHEMA,
        conventions: CONVENTIONS,
        table,
        report,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize, W: Write>(value: &T, mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io("<json output>", e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Comparison table with one row per `w` and the baseline block on the
/// first row.
pub fn write_table_csv<W: Write>(rows: &[TableRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(TABLE_HEADER)?;
    for r in rows {
        wtr.write_record([
            r.w.to_string(),
            r.sle_cw.to_string(),
            opt(r.sle_sr),
            r.sle_md.to_string(),
            opt(r.mv_cw),
            opt(r.mv_sr),
            opt(r.mv_md),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv output>", e))
}

/// `date,wealth_sle,wealth_mv`. With several risk factors the model columns
/// are named `wealth_sle_w<w>`; without a baseline the last column is left
/// out.
pub fn write_wealth_csv<W: Write>(report: &BacktestReport, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    let label = |m: &ModelRun| match (report.models.len(), m.w) {
        (1, _) | (_, None) => "wealth_sle".to_string(),
        (_, Some(w)) => format!("wealth_sle_w{w}"),
    };
    header.extend(report.models.iter().map(label));
    if report.baseline.is_some() {
        header.push("wealth_mv".into());
    }
    wtr.write_record(&header)?;
    let dates = std::iter::once(report.start_date).chain(report.dates.iter().copied());
    for (k, date) in dates.enumerate() {
        let mut row = vec![date.format("%Y-%m-%d").to_string()];
        row.extend(report.models.iter().map(|m| m.wealth[k].to_string()));
        if let Some(b) = &report.baseline {
            row.push(b.wealth[k].to_string());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv output>", e))
}

/// `w,sigma2_lower,sigma2_upper,objective,beta_1..beta_n`, sorted by `w`.
pub fn write_frontier_csv<W: Write>(points: &[FrontierPoint], out: W) -> Result<()> {
    let n = points.first().map_or(0, |p| p.beta.len());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["w", "sigma2_lower", "sigma2_upper", "objective"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=n).map(|i| format!("beta_{i}")));
    wtr.write_record(&header)?;
    let mut sorted: Vec<&FrontierPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.w.total_cmp(&b.w));
    for p in sorted {
        let mut row = vec![
            p.w.to_string(),
            p.sigma2_lower.to_string(),
            p.sigma2_upper.to_string(),
            p.objective.to_string(),
        ];
        row.extend(p.beta.iter().map(|b| b.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv output>", e))
}
