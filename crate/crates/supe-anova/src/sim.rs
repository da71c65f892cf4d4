//! Synthetic ensembles from the generative model, plus the Monte Carlo
//! studies that check coverage, efficiency, and parameter recovery.
//!
//! Randomness is organized as counter-based streams: one ChaCha stream per
//! (replication, cell), so per-cell draws are identical whether cells are
//! generated serially or in parallel, and whole replications can be
//! regenerated independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{cell_covariance_from, rho_len, ParameterSet};
use crate::data::{EnsembleDataset, EnsembleRow, FactorKey};
use crate::error::{Error, Result};
use crate::estimation::{fit, EstimationConfig};
use crate::grouping::GroupingScheme;
use crate::inference::{blue_mu, blup_y, intervals, unweighted_mean, IntervalLevel};

/// Dimensions, true parameters, and seeding for a synthetic ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub teams: usize,
    /// Replicate count per factor; its length is the factor count.
    pub replicates: Vec<usize>,
    /// Climatological mean per factor.
    pub mu: Vec<f64>,
    /// Replicate-deviation variance per factor.
    pub tau2: Vec<f64>,
    /// Team variances per factor.
    pub sigma2: Vec<Vec<f64>>,
    /// Packed team correlations per factor; empty for uncorrelated.
    #[serde(default)]
    pub rho: Vec<Vec<f64>>,
    pub seed: u64,
    /// Replication count for the Monte Carlo studies.
    #[serde(default = "default_replications")]
    pub replications: usize,
}

fn default_replications() -> usize {
    1000
}

impl SimulationSpec {
    /// Uniform dimensions with shared parameters across factors.
    pub fn uniform(
        factors: usize,
        replicates: usize,
        mu: f64,
        tau2: f64,
        sigma2: Vec<f64>,
        seed: u64,
    ) -> Self {
        SimulationSpec {
            teams: sigma2.len(),
            replicates: vec![replicates; factors],
            mu: vec![mu; factors],
            tau2: vec![tau2; factors],
            sigma2: vec![sigma2; factors],
            rho: Vec::new(),
            seed,
            replications: default_replications(),
        }
    }

    pub fn factor_count(&self) -> usize {
        self.replicates.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor_count();
        if f == 0 || self.teams == 0 {
            return Err(Error::InvalidParameter(
                "simulation needs at least one factor and one team".into(),
            ));
        }
        if self.mu.len() != f || self.tau2.len() != f || self.sigma2.len() != f {
            return Err(Error::InvalidParameter(format!(
                "simulation parameter lengths must match {f} factors"
            )));
        }
        if self.replicates.iter().any(|&i| i == 0) {
            return Err(Error::InvalidParameter(
                "every factor needs at least one replicate".into(),
            ));
        }
        for s in &self.sigma2 {
            if s.len() != self.teams {
                return Err(Error::InvalidParameter(format!(
                    "sigma2 rows must have {} entries",
                    self.teams
                )));
            }
            if s.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidParameter("sigma2 must be >= 0".into()));
            }
        }
        if !self.rho.is_empty() {
            if self.rho.len() != f {
                return Err(Error::InvalidParameter(format!(
                    "rho must have {f} rows or be empty"
                )));
            }
            for r in &self.rho {
                if !r.is_empty() && r.len() != rho_len(self.teams) {
                    return Err(Error::InvalidParameter(
                        "rho rows must be packed team pairs".into(),
                    ));
                }
            }
        }
        if self.tau2.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidParameter("tau2 must be >= 0".into()));
        }
        Ok(())
    }

    fn rho_row(&self, f: usize) -> &[f64] {
        if self.rho.is_empty() {
            &[]
        } else {
            &self.rho[f]
        }
    }

    /// The true parameters bound to a dataset produced by `simulate`.
    /// Zero team variances are not representable in a parameter set, so this
    /// errors for degenerate specs (which `simulate` itself allows).
    pub fn parameter_set(&self, dataset: &EnsembleDataset) -> Result<ParameterSet> {
        ParameterSet::per_factor(
            dataset,
            self.tau2.clone(),
            self.sigma2.clone(),
            if self.rho.is_empty() {
                Vec::new()
            } else {
                self.rho.clone()
            },
        )
    }
}

/// A simulated ensemble with its latent truth.
#[derive(Debug, Clone)]
pub struct SimulatedEnsemble {
    pub dataset: EnsembleDataset,
    /// Latent consensus per (factor, replicate), factor-major.
    pub latent: Vec<Vec<f64>>,
    /// Latent replicate deviation per (factor, replicate).
    pub alpha: Vec<Vec<f64>>,
}

/// Draws one ensemble from the generative model.
pub fn simulate(spec: &SimulationSpec) -> Result<SimulatedEnsemble> {
    simulate_replication(spec, 0)
}

/// Draws the `rep`-th independent replication.
pub fn simulate_replication(spec: &SimulationSpec, rep: u64) -> Result<SimulatedEnsemble> {
    spec.validate()?;
    let factors = spec.factor_count();
    let total_cells: usize = spec.replicates.iter().sum();

    // Cholesky of the deviation covariance per factor (reused across cells).
    let mut eta_chol = Vec::with_capacity(factors);
    for f in 0..factors {
        let present: Vec<usize> = (0..spec.teams).collect();
        let sigma_eta = cell_covariance_from(0.0, &spec.sigma2[f], spec.rho_row(f), &present);
        let chol = if spec.sigma2[f].iter().all(|&s| s == 0.0) {
            None
        } else {
            Some(
                nalgebra::Cholesky::new(sigma_eta)
                    .ok_or(Error::NotPositiveDefinite { factor: f })?,
            )
        };
        eta_chol.push(chol);
    }

    let cell_jobs: Vec<(usize, usize, u64)> = {
        let mut jobs = Vec::with_capacity(total_cells);
        let mut counter = 0u64;
        for (f, &i_count) in spec.replicates.iter().enumerate() {
            for i in 0..i_count {
                jobs.push((f, i, counter));
                counter += 1;
            }
        }
        jobs
    };

    let cells: Vec<(f64, f64, Vec<f64>)> = cell_jobs
        .par_iter()
        .map(|&(f, _i, counter)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(rep.wrapping_mul(total_cells as u64).wrapping_add(counter) + 1);
            let z_alpha: f64 =
                <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let alpha = z_alpha * spec.tau2[f].sqrt();
            let z: Vec<f64> = (0..spec.teams)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            let eta: Vec<f64> = match &eta_chol[f] {
                Some(chol) => {
                    let zv = nalgebra::DVector::from_vec(z);
                    (chol.l() * zv).iter().copied().collect()
                }
                None => vec![0.0; spec.teams],
            };
            let latent = spec.mu[f] + alpha;
            (alpha, latent, eta)
        })
        .collect();

    // Fixed-width labels keep the dataset's lexicographic order equal to
    // the generation order, so the latent arrays align with its indices.
    let mut rows = Vec::with_capacity(total_cells * spec.teams);
    let mut latent = vec![Vec::new(); factors];
    let mut alpha = vec![Vec::new(); factors];
    for (&(f, i, _), (a, y, eta)) in cell_jobs.iter().zip(&cells) {
        latent[f].push(*y);
        alpha[f].push(*a);
        for (j, e) in eta.iter().enumerate() {
            rows.push(EnsembleRow {
                team: format!("t{j:03}"),
                factor: FactorKey::single("factor", &format!("f{f:04}")),
                replicate: format!("{i:08}"),
                value: y + e,
            });
        }
    }
    let dataset = EnsembleDataset::from_rows(rows, None)?;
    Ok(SimulatedEnsemble {
        dataset,
        latent,
        alpha,
    })
}

/// Whether a coverage study predicts with the generating parameters or with
/// parameters re-estimated from each replication.
#[derive(Debug, Clone)]
pub enum CoverageMode {
    Oracle,
    PlugIn(EstimationConfig),
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub level: String,
    pub mode: String,
    pub covered: usize,
    pub total: usize,
    pub coverage: f64,
    /// Binomial Monte Carlo standard error at the nominal rate.
    pub monte_carlo_se: f64,
}

/// Fraction of (replication, cell) pairs whose latent consensus falls inside
/// the prediction interval.
pub fn coverage_study(
    spec: &SimulationSpec,
    level: IntervalLevel,
    mode: CoverageMode,
) -> Result<CoverageReport> {
    spec.validate()?;
    let reps = spec.replications;
    let per_rep: Vec<Result<(usize, usize)>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let ensemble = simulate_replication(spec, rep)?;
            let ds = &ensemble.dataset;
            let (params, mu) = match &mode {
                CoverageMode::Oracle => (spec.parameter_set(ds)?, spec.mu.clone()),
                CoverageMode::PlugIn(config) => {
                    let fitted = fit(ds, &GroupingScheme::identity(ds), config)?;
                    let mu_hat = blue_mu(ds, &fitted.params)?.mu;
                    (fitted.params, mu_hat)
                }
            };
            let blup = blup_y(ds, &params, &mu)?;
            let mut covered = 0;
            let mut total = 0;
            let mut cell_idx = 0;
            for f in 0..ds.factor_count() {
                for i in 0..ds.replicate_count(f) {
                    let (lo, hi) = intervals(
                        blup.y_star[cell_idx],
                        blup.mspe[cell_idx].max(0.0).sqrt(),
                        level,
                    )?;
                    let truth = ensemble.latent[f][i];
                    if truth >= lo && truth <= hi {
                        covered += 1;
                    }
                    total += 1;
                    cell_idx += 1;
                }
            }
            Ok((covered, total))
        })
        .collect();

    let mut covered = 0;
    let mut total = 0;
    for r in per_rep {
        let (c, t) = r?;
        covered += c;
        total += t;
    }
    let coverage = covered as f64 / total as f64;
    let nominal = match level {
        IntervalLevel::OneSigma => 0.682_689_492_137_085_9,
        IntervalLevel::TwoSigma => 0.954_499_736_103_642,
        IntervalLevel::NinetyFive => 0.950_004_209_703_559,
    };
    Ok(CoverageReport {
        level: format!("{level:?}"),
        mode: match mode {
            CoverageMode::Oracle => "oracle".into(),
            CoverageMode::PlugIn(_) => "plug_in".into(),
        },
        covered,
        total,
        coverage,
        monte_carlo_se: (nominal * (1.0 - nominal) / total as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyReport {
    /// Analytic var(unweighted mean) / var(weighted estimate), per factor.
    pub analytic_ratio: Vec<f64>,
    /// The same ratio from simulated estimator variances.
    pub empirical_ratio: Vec<f64>,
    pub draws: usize,
}

/// Variance ratio of the unweighted mean against the optimally weighted
/// estimate, analytically and over simulated replications.
pub fn efficiency_study(spec: &SimulationSpec, draws: usize) -> Result<EfficiencyReport> {
    spec.validate()?;
    let probe = simulate_replication(spec, 0)?;
    let params = spec.parameter_set(&probe.dataset)?;
    let unweighted = unweighted_mean(&probe.dataset, &params)?;
    let blue = blue_mu(&probe.dataset, &params)?;
    let analytic_ratio: Vec<f64> = unweighted
        .factor_variance
        .iter()
        .zip(&blue.mu_var)
        .map(|(u, b)| u / b)
        .collect();

    let factors = spec.factor_count();
    let estimates: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..draws as u64)
        .into_par_iter()
        .map(|rep| {
            let ensemble = simulate_replication(spec, rep)?;
            let blue = blue_mu(&ensemble.dataset, &params)?;
            let unweighted = unweighted_mean(&ensemble.dataset, &params)?;
            Ok((blue.mu, unweighted.factor_means))
        })
        .collect();

    let mut sum_b = vec![0.0; factors];
    let mut sumsq_b = vec![0.0; factors];
    let mut sum_u = vec![0.0; factors];
    let mut sumsq_u = vec![0.0; factors];
    for estimate in estimates {
        let (b, u) = estimate?;
        for f in 0..factors {
            sum_b[f] += b[f];
            sumsq_b[f] += b[f] * b[f];
            sum_u[f] += u[f];
            sumsq_u[f] += u[f] * u[f];
        }
    }
    let n = draws as f64;
    let empirical_ratio: Vec<f64> = (0..factors)
        .map(|f| {
            let var_b = sumsq_b[f] / n - (sum_b[f] / n).powi(2);
            let var_u = sumsq_u[f] / n - (sum_u[f] / n).powi(2);
            var_u / var_b
        })
        .collect();
    Ok(EfficiencyReport {
        analytic_ratio,
        empirical_ratio,
        draws,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryReport {
    /// One relative error per (seed, variance parameter).
    pub relative_errors: Vec<f64>,
    pub median_relative_error: f64,
}

/// Refits the model on `seeds` independent replications and reports the
/// relative errors of all variance estimates against the generating values.
pub fn recovery_study(
    spec: &SimulationSpec,
    seeds: usize,
    config: &EstimationConfig,
) -> Result<RecoveryReport> {
    spec.validate()?;
    let per_seed: Vec<Result<Vec<f64>>> = (0..seeds as u64)
        .into_par_iter()
        .map(|rep| {
            let ensemble = simulate_replication(spec, rep)?;
            let fitted = fit(
                &ensemble.dataset,
                &GroupingScheme::identity(&ensemble.dataset),
                config,
            )?;
            let mut errors = Vec::new();
            for f in 0..spec.factor_count() {
                let tau2_hat = fitted.params.tau2(f);
                errors.push((tau2_hat - spec.tau2[f]).abs() / spec.tau2[f]);
                for (j, &s_true) in spec.sigma2[f].iter().enumerate() {
                    let s_hat = fitted.params.sigma2(f)[j];
                    errors.push((s_hat - s_true).abs() / s_true);
                }
            }
            Ok(errors)
        })
        .collect();
    let mut relative_errors = Vec::new();
    for seed_errors in per_seed {
        relative_errors.extend(seed_errors?);
    }
    let median_relative_error = crate::grouping::median(&relative_errors);
    Ok(RecoveryReport {
        relative_errors,
        median_relative_error,
    })
}
