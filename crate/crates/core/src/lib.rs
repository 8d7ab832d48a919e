//! Long-only mean-variance portfolio selection when the covariance matrix is
//! only known to lie between a lower and an upper bound.
//!
//! The pipeline is:
//!
//! 1. [`market_data`]: load prices or returns from wide CSV files.
//! 2. [`estimator`]: moving-block estimates of mean bounds, lower/upper
//!    variances and cross-moment bounds, assembled into an
//!    [`UncertainCovariance`] pair and repaired to positive definiteness.
//! 3. [`optimizer`]: minimise `w * b'V_lo b + (1 - w) * b'V_hi b` on the
//!    simplex subject to a minimum expected return, with an active-set
//!    solver and a projected-gradient fallback.
//! 4. [`frontier`]: sweep `w` over `[0, 1]` and check the geometry of the
//!    resulting trade-off curve.
//! 5. [`backtest`]: rolling-window out-of-sample evaluation against the
//!    classical single-covariance model.
//!
//! [`synthetic`] generates regime-switching Gaussian panels for testing, and
//! [`report`] serialises results into the on-disk formats used by the CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backtest;
pub mod error;
pub mod estimator;
pub mod frontier;
pub mod market_data;
pub mod optimizer;
pub mod par;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};
pub use estimator::{BlockConfig, GNormalParams, UncertainCovariance};
pub use market_data::{PricePanel, ReturnPanel};
pub use optimizer::{PortfolioSolution, ProblemSpec};
