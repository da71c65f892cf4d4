//! Verification-informed posterior model weights.
//!
//! The consensus weights act as a prior over teams; verification data enter
//! through a Gaussian likelihood on the team outputs at the verified cells.
//! Everything is computed in log space with max-subtraction, since the prior
//! product over hundreds of cells underflows long before the weights stop
//! being meaningful.

use serde::Serialize;

use crate::data::{EnsembleDataset, VerificationSet};
use crate::error::{Error, Result};
use crate::inference::ConsensusResult;

#[derive(Debug, Clone, Serialize)]
pub struct BmaResult {
    pub teams: Vec<String>,
    /// Posterior weight per team; nonnegative, sums to one.
    pub nu: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub log_likelihood: Vec<f64>,
    /// (verification index, team index) pairs skipped because the team was
    /// absent at the verified cell.
    pub skipped: Vec<(usize, usize)>,
}

/// Posterior team weights: prior proportional to the product of each team's
/// consensus weights over all cells, likelihood from squared verification
/// misfits scaled by the measurement-error variances.
pub fn bma_weights(
    consensus: &ConsensusResult,
    dataset: &EnsembleDataset,
    verification: &VerificationSet,
) -> Result<BmaResult> {
    let teams = dataset.team_count();
    let mut log_prior = vec![0.0; teams];
    for cell in &consensus.cells {
        for (r, &j) in cell.present.iter().enumerate() {
            let w = cell.weights[r];
            if !(w > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "posterior weighting needs positive prior weights; \
                     team {j} has weight {w} at factor {}",
                    cell.factor
                )));
            }
            log_prior[j] += w.ln();
        }
    }

    let mut log_likelihood = vec![0.0; teams];
    let mut skipped = Vec::new();
    for (k, obs) in verification.observations.iter().enumerate() {
        for j in 0..teams {
            match dataset.value(obs.factor, obs.replicate, j) {
                Some(y) => {
                    let misfit = obs.value - y;
                    log_likelihood[j] -= misfit * misfit / (2.0 * obs.variance);
                }
                None => skipped.push((k, j)),
            }
        }
    }

    let scores: Vec<f64> = log_prior
        .iter()
        .zip(&log_likelihood)
        .map(|(p, l)| p + l)
        .collect();
    let peak = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let unnormalized: Vec<f64> = scores.iter().map(|s| (s - peak).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    let nu: Vec<f64> = unnormalized.iter().map(|v| v / total).collect();
    Ok(BmaResult {
        teams: dataset.teams().to_vec(),
        nu,
        log_prior,
        log_likelihood,
        skipped,
    })
}
