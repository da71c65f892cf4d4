//! Consensus estimation for multi-model ensembles.
//!
//! Teams in a model intercomparison each estimate the same underlying
//! quantity, stratified into factor combinations (e.g. season x region) with
//! replicates inside each stratum. This crate models the outputs as a
//! heteroskedastic random-effects ANOVA: every team gets its own variance
//! per stratum, strata with similar variability share parameters, and the
//! parameters are estimated by penalized restricted maximum likelihood. The
//! fitted model yields minimum-variance weighted consensus estimates and
//! predictions with honest uncertainty, in contrast to the unweighted
//! ensemble average.
//!
//! The pieces, in pipeline order:
//!
//! - [`data`]: ingestion into the canonical [`data::EnsembleDataset`].
//! - [`grouping`]: robust variability clustering into variance-sharing
//!   groups.
//! - [`estimation`]: penalized REML fit of the variance parameters.
//! - [`inference`]: weighted consensus estimates, predictions, weights, and
//!   intervals.
//! - [`diagnostics`]: standardized errors, quantile-quantile exports, and
//!   spatial/temporal aggregation.
//! - [`bma`]: verification-informed posterior model weights.
//! - [`sim`]: synthetic-ensemble generation and Monte Carlo studies.
//! - [`pipeline`]: the command-line surface over everything above.

// Negated float comparisons like `!(x > 0.0)` are deliberate: they reject
// NaN, which the non-negated forms would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bma;
pub mod covariance;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimation;
pub mod grouping;
pub mod inference;
pub mod numeric;
pub mod optimize;
pub mod pipeline;
pub mod sim;

pub use data::{EnsembleDataset, FactorKey, VerificationSet};
pub use error::{Error, Result};
pub use estimation::{fit, EstimationConfig, FitResult};
pub use grouping::GroupingScheme;
pub use inference::{consensus, ConsensusResult};
