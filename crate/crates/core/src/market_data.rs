//! Wide-CSV ingestion of price and return panels.
//!
//! Files have a header row `date,ASSET1,...,ASSETn` followed by one row per
//! trading day with ISO-8601 dates. Rows with a missing or non-numeric cell
//! are dropped as a whole (never imputed) and counted.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

const DATE_FORMAT: &str = "%Y-%m-%d";

/// Returns with absolute value above this are flagged by [`validate_panel`].
pub const SUSPICIOUS_MAGNITUDE: f64 = 1.0;

/// CSV dialect for wide panels.
#[derive(Debug, Clone, Copy)]
pub struct WideCsv {
    pub delimiter: u8,
}

impl Default for WideCsv {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

/// Adjusted closing prices, one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// `T x n`, strictly positive.
    pub prices: DMatrix<f64>,
}

/// Simple per-period returns, one column per asset.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    /// `T x n`, every entry `> -1`.
    pub returns: DMatrix<f64>,
}

/// A parsed panel plus the number of rows discarded while cleaning.
#[derive(Debug, Clone)]
pub struct Loaded<P> {
    pub panel: P,
    pub dropped_rows: usize,
}

impl PricePanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, prices: DMatrix<f64>) -> Result<Self> {
        check_shape(&dates, &assets, &prices)?;
        check_increasing(&dates)?;
        if prices.nrows() < 2 {
            return Err(Error::Malformed(format!(
                "need at least 2 price rows, got {}",
                prices.nrows()
            )));
        }
        if let Some(p) = prices.iter().find(|p| !(**p > 0.0)) {
            return Err(Error::Malformed(format!("non-positive price {p}")));
        }
        Ok(Self {
            dates,
            assets,
            prices,
        })
    }

    pub fn n_periods(&self) -> usize {
        self.prices.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.prices.ncols()
    }
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, returns: DMatrix<f64>) -> Result<Self> {
        check_shape(&dates, &assets, &returns)?;
        check_increasing(&dates)?;
        if let Some(r) = returns.iter().find(|r| !(**r > -1.0) || !r.is_finite()) {
            return Err(Error::Malformed(format!("return {r} is not a finite value > -1")));
        }
        Ok(Self {
            dates,
            assets,
            returns,
        })
    }

    pub fn n_periods(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    /// The full return series of asset `i`.
    pub fn series(&self, i: usize) -> &[f64] {
        let t = self.n_periods();
        &self.returns.as_slice()[i * t..(i + 1) * t]
    }

    /// All columns as slices restricted to rows `start..end`.
    pub fn columns(&self, start: usize, end: usize) -> Vec<&[f64]> {
        (0..self.n_assets())
            .map(|i| &self.series(i)[start..end])
            .collect()
    }
}

fn check_shape(dates: &[NaiveDate], assets: &[String], values: &DMatrix<f64>) -> Result<()> {
    if values.ncols() != assets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} columns but {} asset labels",
            values.ncols(),
            assets.len()
        )));
    }
    if values.nrows() != dates.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} dates",
            values.nrows(),
            dates.len()
        )));
    }
    Ok(())
}

fn check_increasing(dates: &[NaiveDate]) -> Result<()> {
    for pair in dates.windows(2) {
        if pair[1] == pair[0] {
            return Err(Error::DuplicateDates(pair[0].to_string()));
        }
        if pair[1] < pair[0] {
            return Err(Error::Malformed(format!(
                "dates not increasing: {} after {}",
                pair[1], pair[0]
            )));
        }
    }
    Ok(())
}

struct RawTable {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    /// Row-major cells, already cleaned.
    rows: Vec<Vec<f64>>,
    dropped: usize,
}

fn read_wide<R: Read>(reader: R, format: WideCsv) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Malformed(
            "header must contain a date column and at least one asset".into(),
        ));
    }
    let assets: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();

    let mut parsed: Vec<(NaiveDate, Vec<f64>)> = Vec::new();
    let mut dropped = 0usize;
    for record in rdr.records() {
        let record = record?;
        let date = record
            .get(0)
            .and_then(|d| NaiveDate::parse_from_str(d, DATE_FORMAT).ok());
        let values: Option<Vec<f64>> = (1..=assets.len())
            .map(|j| {
                record
                    .get(j)
                    .filter(|c| !c.is_empty())
                    .and_then(|c| c.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        match (date, values) {
            (Some(d), Some(v)) => parsed.push((d, v)),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} row(s) with missing or non-numeric cells");
    }

    parsed.sort_by_key(|(d, _)| *d);
    if let Some(pair) = parsed.windows(2).find(|p| p[0].0 == p[1].0) {
        return Err(Error::DuplicateDates(pair[0].0.to_string()));
    }
    let (dates, rows) = parsed.into_iter().unzip();
    Ok(RawTable {
        dates,
        assets,
        rows,
        dropped,
    })
}

fn to_matrix(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c])
}

/// Parse a wide price CSV from any reader.
pub fn read_prices<R: Read>(reader: R, format: WideCsv) -> Result<Loaded<PricePanel>> {
    let raw = read_wide(reader, format)?;
    if raw.rows.len() < 2 {
        return Err(Error::Malformed(format!(
            "fewer than 2 usable rows ({} found)",
            raw.rows.len()
        )));
    }
    let prices = to_matrix(&raw.rows, raw.assets.len());
    Ok(Loaded {
        panel: PricePanel::new(raw.dates, raw.assets, prices)?,
        dropped_rows: raw.dropped,
    })
}

/// Load a wide price CSV. Rows with missing cells are dropped; dates are
/// sorted ascending.
pub fn load_prices(path: impl AsRef<Path>, format: WideCsv) -> Result<Loaded<PricePanel>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_prices(file, format)
}

pub fn read_returns<R: Read>(reader: R, format: WideCsv) -> Result<Loaded<ReturnPanel>> {
    let raw = read_wide(reader, format)?;
    if raw.rows.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let returns = to_matrix(&raw.rows, raw.assets.len());
    Ok(Loaded {
        panel: ReturnPanel::new(raw.dates, raw.assets, returns)?,
        dropped_rows: raw.dropped,
    })
}

/// Load a wide return CSV (same layout as prices).
pub fn load_returns(path: impl AsRef<Path>, format: WideCsv) -> Result<Loaded<ReturnPanel>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_returns(file, format)
}

/// `r_t = (P_{t+1} - P_t) / P_t`. Each return is labelled with the date on
/// which it is realised (the later of the two prices).
pub fn prices_to_returns(p: &PricePanel) -> Result<ReturnPanel> {
    let t = p.n_periods();
    if t < 2 {
        return Err(Error::Malformed("need at least 2 prices".into()));
    }
    if let Some(bad) = p.prices.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Malformed(format!("non-positive price {bad}")));
    }
    let returns = DMatrix::from_fn(t - 1, p.n_assets(), |r, c| {
        let prev = p.prices[(r, c)];
        (p.prices[(r + 1, c)] - prev) / prev
    });
    ReturnPanel::new(p.dates[1..].to_vec(), p.assets.clone(), returns)
}

/// Write a return panel in the same wide layout it is read from. Values use
/// the shortest representation that round-trips exactly.
pub fn write_returns<W: Write>(panel: &ReturnPanel, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_owned()];
    header.extend(panel.assets.iter().cloned());
    wtr.write_record(&header)?;
    for (r, date) in panel.dates.iter().enumerate() {
        let mut row = vec![date.format(DATE_FORMAT).to_string()];
        row.extend((0..panel.n_assets()).map(|c| panel.returns[(r, c)].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AssetSummary {
    pub asset: String,
    pub count: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SuspiciousReturn {
    pub date: NaiveDate,
    pub asset: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ValidationReport {
    pub assets: Vec<AssetSummary>,
    pub suspicious: Vec<SuspiciousReturn>,
}

/// Summarise a return panel and flag returns with `|r| > 1`.
pub fn validate_panel(r: &ReturnPanel) -> Result<ValidationReport> {
    if r.n_periods() == 0 || r.n_assets() == 0 {
        return Err(Error::EmptyPanel);
    }
    let mut suspicious = Vec::new();
    let assets = (0..r.n_assets())
        .map(|i| {
            let s = r.series(i);
            for (t, &v) in s.iter().enumerate() {
                if v.abs() > SUSPICIOUS_MAGNITUDE {
                    suspicious.push(SuspiciousReturn {
                        date: r.dates[t],
                        asset: r.assets[i].clone(),
                        value: v,
                    });
                }
            }
            AssetSummary {
                asset: r.assets[i].clone(),
                count: s.len(),
                min: s.iter().copied().fold(f64::INFINITY, f64::min),
                max: s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    Ok(ValidationReport { assets, suspicious })
}

/// Consecutive daily labels starting at 2000-01-03, for generated panels.
pub fn synthetic_dates(len: usize) -> Vec<NaiveDate> {
    let start = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date");
    start.iter_days().take(len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn prices(csv: &str) -> Result<Loaded<PricePanel>> {
        read_prices(csv.as_bytes(), WideCsv::default())
    }

    fn single_asset(p: &[f64]) -> PricePanel {
        PricePanel::new(
            synthetic_dates(p.len()),
            vec!["A".into()],
            DMatrix::from_column_slice(p.len(), 1, p),
        )
        .unwrap()
    }

    #[test]
    fn parses_three_rows() {
        let loaded = prices("date,A\n2024-01-02,100\n2024-01-03,110\n2024-01-04,99\n").unwrap();
        assert_eq!(loaded.panel.n_periods(), 3);
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(loaded.panel.prices[(2, 0)], 99.0);
    }

    #[test]
    fn drops_rows_with_blank_cells() {
        let loaded =
            prices("date,A,B\n2024-01-02,100,5\n2024-01-03,,6\n2024-01-04,99,7\n").unwrap();
        assert_eq!(loaded.panel.n_periods(), 2);
        assert_eq!(loaded.dropped_rows, 1);
        let loaded = prices("date,A\n2024-01-02,100\n2024-01-03,abc\n2024-01-04,99\n").unwrap();
        assert_eq!(loaded.dropped_rows, 1);
    }

    #[test]
    fn sorts_dates_and_rejects_duplicates() {
        let loaded = prices("date,A\n2024-01-04,3\n2024-01-02,1\n2024-01-03,2\n").unwrap();
        assert_eq!(loaded.panel.prices.as_slice(), &[1.0, 2.0, 3.0]);
        let err = prices("date,A\n2024-01-02,1\n2024-01-02,2\n2024-01-03,2\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateDates(_)));
        assert!(err.to_string().contains("duplicate dates"));
    }

    #[test]
    fn needs_two_usable_rows() {
        assert!(prices("date,A\n2024-01-02,1\n2024-01-03,\n").is_err());
        assert!(load_prices("/nonexistent/prices.csv", WideCsv::default()).is_err());
    }

    #[test]
    fn simple_returns() {
        let r = prices_to_returns(&single_asset(&[100.0, 110.0, 99.0])).unwrap();
        assert_relative_eq!(r.returns[(0, 0)], 0.10, epsilon = 1e-15);
        assert_relative_eq!(r.returns[(1, 0)], -0.10, epsilon = 1e-15);
        assert_eq!(r.dates.len(), 2);

        let r = prices_to_returns(&single_asset(&[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(r.returns.as_slice(), &[0.0, 0.0]);
        let r = prices_to_returns(&single_asset(&[1.0, 2.0])).unwrap();
        assert_eq!(r.returns.as_slice(), &[1.0]);
    }

    #[test]
    fn rejects_non_positive_prices() {
        let p = PricePanel {
            dates: synthetic_dates(2),
            assets: vec!["A".into()],
            prices: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        };
        assert!(prices_to_returns(&p).is_err());
        assert!(prices("date,A\n2024-01-02,1\n2024-01-03,-2\n").is_err());
    }

    #[test]
    fn validation_flags() {
        let mk = |v: &[f64]| {
            ReturnPanel::new(
                synthetic_dates(v.len()),
                vec!["A".into()],
                DMatrix::from_column_slice(v.len(), 1, v),
            )
            .unwrap()
        };
        let rep = validate_panel(&mk(&[-0.1, 0.05, 0.1])).unwrap();
        assert!(rep.suspicious.is_empty());
        assert_eq!(rep.assets[0].count, 3);
        assert_eq!(rep.assets[0].min, -0.1);
        let rep = validate_panel(&mk(&[0.01, 3.0])).unwrap();
        assert_eq!(rep.suspicious.len(), 1);
        assert_eq!(rep.suspicious[0].value, 3.0);

        let empty = ReturnPanel::new(vec![], vec!["A".into()], DMatrix::zeros(0, 1)).unwrap();
        assert!(matches!(validate_panel(&empty), Err(Error::EmptyPanel)));
    }

    #[test]
    fn returns_csv_round_trip() {
        let r = prices_to_returns(&single_asset(&[100.0, 101.3, 99.7, 120.1])).unwrap();
        let mut buf = Vec::new();
        write_returns(&r, &mut buf).unwrap();
        let back = read_returns(buf.as_slice(), WideCsv::default()).unwrap().panel;
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn compounding_reconstructs_prices(
            start in 0.01f64..1e4,
            ratios in proptest::collection::vec(0.5f64..2.0, 1..60)
        ) {
            // Per-period moves are bounded: near-total losses make 1 + r
            // cancel and the round trip loses digits.
            let mut p = vec![start];
            for q in &ratios {
                p.push(p[p.len() - 1] * q);
            }
            let r = prices_to_returns(&single_asset(&p)).unwrap();
            prop_assert_eq!(r.n_periods(), p.len() - 1);
            let mut level = p[0];
            for (t, ret) in r.series(0).iter().enumerate() {
                level *= 1.0 + ret;
                prop_assert!(((level - p[t + 1]) / p[t + 1]).abs() <= 1e-12);
            }
        }
    }
}
