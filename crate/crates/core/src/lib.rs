//! Seeded federated-learning simulator built around a matrix-autoregressive
//! pre-aggregation filter.
//!
//! Each round the server arranges the (sampled) local models into a matrix,
//! forecasts it from the previous rounds with a MAR(1) model fit by
//! alternating least squares, scores every client by its forecast error and
//! forwards only the `k` most predictable updates to the aggregator.
//!
//! Module map:
//!
//! - [`linalg`]: dense matrix kernel (pivoted Cholesky, power iteration).
//! - [`mar`]: MAR(1) estimation and forecasting.
//! - [`filter`]: anomaly scores, top-k selection, history amendment.
//! - [`aggregators`]: FedAvg, FedMedian, Trimmed Mean, Multi-Krum, Bulyan, DnC.
//! - [`attacks`]: GAUSS, LIE, OPT, AGR Min-Max and the MAR-aware adaptive attack.
//! - [`sim`]: data, local training and the round/experiment driver.
//! - [`metrics`]: detection precision/recall, TDMI, Welch's t-test, selection odds.
//! - [`harness`]: the `run` / `sweep` / `analyze` commands behind the CLI.

pub mod aggregators;
pub mod attacks;
pub mod error;
pub mod harness;
pub mod filter;
pub mod linalg;
pub mod mar;
pub mod metrics;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
pub use filter::{ClientId, UpdateMatrix};
pub use linalg::Matrix;
