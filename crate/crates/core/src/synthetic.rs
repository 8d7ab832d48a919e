//! Regime-switching Gaussian return series.
//!
//! A series is split into `K` regimes of `n0` periods. Regime `k` draws
//! i.i.d. normals with a common mean and its own variance; the first regime
//! uses the lower variance bound, the last the upper bound, and the ones in
//! between a uniform draw from the interval.
//!
//! Random numbers come from ChaCha20 seeded with `seed_from_u64`. Panel
//! columns get independent seeds `splitmix64(master ^ column)`. The pair is
//! identified by [`RNG_ALGORITHM`]; changing either bumps the version.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{synthetic_dates, ReturnPanel};
use crate::par;

pub const RNG_ALGORITHM: &str = "chacha20-splitmix64/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub mu: f64,
    pub var_lower: f64,
    pub var_upper: f64,
    /// Number of regimes.
    #[serde(rename = "K")]
    pub k: usize,
    /// Periods per regime.
    pub n0: usize,
    pub seed: u64,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(Error::InvalidArgument("mu must be finite".into()));
        }
        if !(self.var_lower > 0.0 && self.var_lower <= self.var_upper && self.var_upper.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < var_lower <= var_upper, got [{}, {}]",
                self.var_lower, self.var_upper
            )));
        }
        if self.k < 1 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if self.n0 < 2 {
            return Err(Error::InvalidArgument("n0 must be at least 2".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.k * self.n0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-regime variances as drawn by [`generate_series`].
    pub fn regime_variances(&self) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(draw_variances(self, &mut ChaCha20Rng::seed_from_u64(self.seed)))
    }
}

/// One column of a panel file: everything but the shared layout and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub mu: f64,
    pub var_lower: f64,
    pub var_upper: f64,
}

/// Layout of a simulated panel, as stored in spec files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub n0: usize,
    #[serde(default)]
    pub seed: u64,
    pub assets: Vec<AssetSpec>,
}

impl PanelSpec {
    /// Column specs with sub-seeds derived from `self.seed`.
    pub fn regime_specs(&self) -> Vec<RegimeSpec> {
        self.assets
            .iter()
            .enumerate()
            .map(|(i, a)| RegimeSpec {
                mu: a.mu,
                var_lower: a.var_lower,
                var_upper: a.var_upper,
                k: self.k,
                n0: self.n0,
                seed: column_seed(self.seed, i),
            })
            .collect()
    }

    pub fn asset_names(&self) -> Vec<String> {
        self.assets
            .iter()
            .enumerate()
            .map(|(i, a)| a.name.clone().unwrap_or_else(|| format!("X({})", i + 1)))
            .collect()
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn column_seed(master: u64, column: usize) -> u64 {
    splitmix64(master ^ column as u64)
}

fn draw_variances(spec: &RegimeSpec, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let (lo, hi) = (spec.var_lower, spec.var_upper);
    (0..spec.k)
        .map(|k| {
            if k == 0 {
                lo
            } else if k == spec.k - 1 {
                hi
            } else {
                lo + (hi - lo) * rng.random::<f64>()
            }
        })
        .collect()
}

pub fn generate_series(spec: &RegimeSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let variances = draw_variances(spec, &mut rng);
    let mut out = Vec::with_capacity(spec.len());
    for var in variances {
        let normal = Normal::new(spec.mu, var.sqrt())
            .map_err(|e| Error::InvalidArgument(format!("normal distribution: {e}")))?;
        out.extend((0..spec.n0).map(|_| normal.sample(&mut rng)));
    }
    Ok(out)
}

/// Independent columns, each generated from its own spec, labelled with
/// consecutive synthetic dates.
pub fn generate_panel(specs: &[RegimeSpec], names: &[String]) -> Result<ReturnPanel> {
    if specs.is_empty() {
        return Err(Error::EmptyPanel);
    }
    if names.len() != specs.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} specs but {} names",
            specs.len(),
            names.len()
        )));
    }
    let t = specs[0].len();
    if specs.iter().any(|s| s.len() != t) {
        return Err(Error::DimensionMismatch("specs imply different series lengths".into()));
    }
    let cols = par::map_slice(specs, generate_series)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let data = DMatrix::from_fn(t, specs.len(), |r, c| cols[c][r]);
    ReturnPanel::new(synthetic_dates(t), names.to_vec(), data)
}

pub fn generate_from_spec(spec: &PanelSpec) -> Result<ReturnPanel> {
    generate_panel(&spec.regime_specs(), &spec.asset_names())
}
