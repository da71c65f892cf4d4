//! Variance-parameter estimation: the restricted likelihood, the
//! inverse-gamma penalty, penalty-shape calibration, and the penalized
//! maximization that produces the fitted parameters.
//!
//! The restricted likelihood decomposes over factors and the penalty over
//! groups, so each variance-sharing group is maximized independently in
//! log-variance coordinates with a simplex search and multiple starts. The
//! penalty scale of each group has a closed-form conditional maximizer and
//! is profiled out rather than searched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{cell_covariance_from, rho_len, CellSolve, ModelStructure, ParameterSet};
use crate::data::EnsembleDataset;
use crate::error::{Error, Result};
use crate::grouping::GroupingScheme;
use crate::numeric::inverse_gamma_quantile_ratio;
use crate::optimize::{maximize, SimplexOptions, SimplexOutcome};

/// Penalty applied to the team variances during estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Pure restricted likelihood.
    None,
    /// Inverse-gamma penalty with the given shape on every team variance;
    /// the per-group scale is profiled out.
    InverseGamma { shape: f64 },
}

impl Default for PenaltyMode {
    fn default() -> Self {
        PenaltyMode::InverseGamma {
            shape: default_shape(),
        }
    }
}

/// Handling of the between-team correlations during estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    /// Correlations fixed at zero.
    #[default]
    FixedZero,
    /// Correlations taken as given in the initial parameter set and held.
    FixedKnown,
    /// Correlations estimated jointly with the variances through a spherical
    /// reparametrization of the correlation Cholesky factor.
    Estimated,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub objective_tolerance: f64,
    pub parameter_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 4000,
            objective_tolerance: 1e-9,
            parameter_tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationConfig {
    pub penalty: PenaltyMode,
    pub optimizer: OptimizerConfig,
    /// Number of optimizer starts; the first is the moment-based start and
    /// the rest perturb it.
    pub restarts: usize,
    pub rho_mode: RhoMode,
    /// Seed for the restart perturbations.
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            penalty: PenaltyMode::default(),
            optimizer: OptimizerConfig::default(),
            restarts: 5,
            rho_mode: RhoMode::default(),
            seed: 0,
        }
    }
}

/// Default percentile pair and prior spread used to calibrate the penalty
/// shape: the 97.5th-to-2.5th prior quantile ratio of the variances is set
/// to four.
pub const DEFAULT_PERCENTILES: (f64, f64) = (0.025, 0.975);
pub const DEFAULT_RATIO_TARGET: f64 = 4.0;

/// Shape solving the default calibration; about 8.48.
pub fn default_shape() -> f64 {
    static SHAPE: std::sync::OnceLock<f64> = std::sync::OnceLock::new();
    *SHAPE.get_or_init(|| {
        calibrate_shape(DEFAULT_RATIO_TARGET, DEFAULT_PERCENTILES)
            .expect("default shape calibration cannot fail")
    })
}

/// Solves for the inverse-gamma shape whose prior quantile ratio
/// Q(p_hi)/Q(p_lo) equals `ratio_target`. The ratio is monotone decreasing
/// in the shape; bisection on [0.1, 1000].
pub fn calibrate_shape(ratio_target: f64, percentiles: (f64, f64)) -> Result<f64> {
    let (p_lo, p_hi) = percentiles;
    if !(0.0 < p_lo && p_lo < p_hi && p_hi < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "percentile pair must be strictly increasing in (0, 1), got ({p_lo}, {p_hi})"
        )));
    }
    if !(ratio_target > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "ratio target must exceed 1, got {ratio_target}"
        )));
    }
    let (mut lo, mut hi) = (0.1f64, 1000.0f64);
    let excess = |a: f64| inverse_gamma_quantile_ratio(a, p_lo, p_hi) - ratio_target;
    if excess(lo) < 0.0 || excess(hi) > 0.0 {
        return Err(Error::ShapeBracket { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Log of the inverse-gamma kernel x^{-a-1} exp(-b/x), without the b^a
/// normalizer. Defined for the b = 0 boundary (pure power law).
pub fn inv_gamma_log_kernel(x: f64, a: f64, b: f64) -> f64 {
    -(a + 1.0) * x.ln() - b / x
}

/// Log penalty: the sum over all (factor, team) slots of the normalized
/// inverse-gamma log density a ln b - (a+1) ln sigma^2 - b / sigma^2 (up to
/// the shape-only Gamma(a) constant). Group-shared parameters contribute
/// once per slot they cover. The b^a normalizer is included so that the
/// maximization over b is well-posed.
pub fn penalty_log(params: &ParameterSet) -> Result<f64> {
    let a = params.penalty_shape().ok_or_else(|| {
        Error::InvalidParameter("parameter set carries no penalty shape".into())
    })?;
    let scales = params.penalty_scales().ok_or_else(|| {
        Error::InvalidParameter("parameter set carries no penalty scales".into())
    })?;
    let mut total = 0.0;
    for g in 0..params.group_count() {
        let b = scales[g];
        if !(b > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "penalty scale must be > 0, got {b}"
            )));
        }
        let multiplicity = params.factors_in_group(g).len() as f64;
        let mut group_sum = 0.0;
        for &s2 in params.sigma2_of_group(g) {
            group_sum += a * b.ln() + inv_gamma_log_kernel(s2, a, b);
        }
        total += multiplicity * group_sum;
    }
    Ok(total)
}

/// Conditional maximizer of the penalty over the scale for fixed variances:
/// b_hat = a J / sum_j sigma_j^{-2}.
pub fn profile_scale(shape: f64, sigma2: &[f64]) -> f64 {
    let precision: f64 = sigma2.iter().map(|s| 1.0 / s).sum();
    shape * sigma2.len() as f64 / precision
}

/// Restricted log-likelihood contribution of one factor, up to the fixed
/// constant -(n - F)/2 ln 2 pi:
/// 1/2 ln Sigma_mu_f - 1/2 sum ln |B_i| - 1/2 sum residual quadratic forms.
/// Returns negative infinity when a cell covariance is not positive
/// definite, which the maximizer treats as an infeasible point.
fn factor_restricted_ll(
    dataset: &EnsembleDataset,
    structure: &ModelStructure,
    factor: usize,
    tau2: f64,
    sigma2: &[f64],
    rho_packed: &[f64],
) -> f64 {
    let cells = structure.cells_of_factor(factor);
    if cells.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mut logdet_sum = 0.0;
    let mut a_sum = 0.0;
    let mut s_sum = 0.0;
    let mut q_sum = 0.0;
    let mut cached: Option<(Vec<usize>, CellSolve)> = None;
    for cell in cells {
        if cached.as_ref().is_none_or(|(mask, _)| *mask != cell.present) {
            let b = cell_covariance_from(tau2, sigma2, rho_packed, &cell.present);
            match CellSolve::new(b, factor) {
                Ok(solve) => cached = Some((cell.present.clone(), solve)),
                Err(_) => return f64::NEG_INFINITY,
            }
        }
        let (_, solve) = cached.as_ref().unwrap();
        logdet_sum += solve.logdet();
        let y = nalgebra::DVector::from_iterator(
            cell.present.len(),
            cell.present
                .iter()
                .map(|&j| dataset.value(factor, cell.replicate, j).unwrap()),
        );
        let binv_y = solve.solve_vector(&y);
        q_sum += y.dot(&binv_y);
        s_sum += binv_y.sum();
        a_sum += solve.solve_ones().sum();
    }
    if !(a_sum > 0.0) || !a_sum.is_finite() {
        return f64::NEG_INFINITY;
    }
    let rss = q_sum - s_sum * s_sum / a_sum;
    -0.5 * a_sum.ln() - 0.5 * logdet_sum - 0.5 * rss
}

/// Restricted log-likelihood of the whole dataset under `params`, up to the
/// fixed constant. Non-positive-definite parameters yield negative infinity.
pub fn restricted_log_likelihood(dataset: &EnsembleDataset, params: &ParameterSet) -> f64 {
    let structure = ModelStructure::build(dataset);
    restricted_log_likelihood_with(dataset, &structure, params)
}

pub(crate) fn restricted_log_likelihood_with(
    dataset: &EnsembleDataset,
    structure: &ModelStructure,
    params: &ParameterSet,
) -> f64 {
    let contributions: Vec<f64> = (0..dataset.factor_count())
        .into_par_iter()
        .map(|f| {
            let g = params.group_of(f);
            factor_restricted_ll(
                dataset,
                structure,
                f,
                params.tau2_of_group(g),
                params.sigma2_of_group(g),
                params.rho_of_group(g),
            )
        })
        .collect();
    contributions.iter().sum()
}

/// Per-start trace of the maximization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartTrace {
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

/// Outcome of `fit`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParameterSet,
    /// Penalized restricted log-likelihood at the estimate (or the plain
    /// restricted log-likelihood when the penalty is off).
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    /// One trace per (group, restart), grouped by group label.
    pub traces: Vec<(String, Vec<RestartTrace>)>,
}

/// Spherical parametrization of a correlation matrix through its Cholesky
/// factor: unconstrained coordinates map through a scaled logistic to angles
/// in (0, pi). Zero coordinates give the identity correlation.
fn correlations_from_angles(unconstrained: &[f64], teams: usize) -> Vec<f64> {
    let mut l = vec![vec![0.0; teams]; teams];
    l[0][0] = 1.0;
    let mut idx = 0;
    for (i, row) in l.iter_mut().enumerate().skip(1) {
        let mut sin_prod = 1.0;
        for j in 0..i {
            let theta = std::f64::consts::PI / (1.0 + (-unconstrained[idx]).exp());
            idx += 1;
            row[j] = theta.cos() * sin_prod;
            sin_prod *= theta.sin();
        }
        row[i] = sin_prod;
    }
    let mut rho = vec![0.0; rho_len(teams)];
    let mut out = 0;
    for j in 0..teams {
        for jp in (j + 1)..teams {
            let mut dot = 0.0;
            for k in 0..teams {
                dot += l[j][k] * l[jp][k];
            }
            rho[out] = dot.clamp(-0.999_999, 0.999_999);
            out += 1;
        }
    }
    rho
}

struct GroupProblem {
    factors: Vec<usize>,
    teams: usize,
    rho_dim: usize,
    fixed_rho: Vec<f64>,
    shape: Option<f64>,
}

impl GroupProblem {
    /// Unpacks the unconstrained coordinates into (tau2, sigma2, rho).
    fn decode(&self, z: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let tau2 = z[0].exp();
        let sigma2: Vec<f64> = (1..=self.teams).map(|i| z[i].exp()).collect();
        let rho = if self.rho_dim > 0 {
            correlations_from_angles(&z[1 + self.teams..], self.teams)
        } else {
            self.fixed_rho.clone()
        };
        (tau2, sigma2, rho)
    }

    fn objective(
        &self,
        dataset: &EnsembleDataset,
        structure: &ModelStructure,
        z: &[f64],
    ) -> f64 {
        let (tau2, sigma2, rho) = self.decode(z);
        if !tau2.is_finite() || sigma2.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return f64::NEG_INFINITY;
        }
        let mut value = 0.0;
        for &f in &self.factors {
            value += factor_restricted_ll(dataset, structure, f, tau2, &sigma2, &rho);
            if value == f64::NEG_INFINITY {
                return value;
            }
        }
        if let Some(a) = self.shape {
            // Penalty with the scale profiled out: per covered factor,
            // a J ln b_hat - (a+1) sum_j ln sigma_j^2 - a J.
            let b_hat = profile_scale(a, &sigma2);
            let j = self.teams as f64;
            let log_sigma_sum: f64 = sigma2.iter().map(|s| s.ln()).sum();
            value += self.factors.len() as f64
                * (a * j * b_hat.ln() - (a + 1.0) * log_sigma_sum - a * j);
        }
        value
    }
}

/// Moment-based starting values for one group: team variances from squared
/// deviations about per-cell medians, the replicate variance from the
/// spread of cell medians within each factor.
fn moment_start(
    dataset: &EnsembleDataset,
    structure: &ModelStructure,
    factors: &[usize],
) -> (f64, Vec<f64>) {
    let teams = dataset.team_count();
    let mut dev_sum = vec![0.0; teams];
    let mut dev_count = vec![0usize; teams];
    let mut tau_sum = 0.0;
    let mut tau_terms = 0usize;
    let mut all_values = Vec::new();
    for &f in factors {
        let mut medians = Vec::new();
        for cell in structure.cells_of_factor(f) {
            let values: Vec<f64> = cell
                .present
                .iter()
                .map(|&j| dataset.value(f, cell.replicate, j).unwrap())
                .collect();
            let center = crate::grouping::median(&values);
            medians.push(center);
            for (&j, &v) in cell.present.iter().zip(&values) {
                dev_sum[j] += (v - center) * (v - center);
                dev_count[j] += 1;
                all_values.push(v);
            }
        }
        if medians.len() >= 2 {
            let mean = medians.iter().sum::<f64>() / medians.len() as f64;
            tau_sum += medians
                .iter()
                .map(|m| (m - mean) * (m - mean))
                .sum::<f64>()
                / (medians.len() - 1) as f64;
            tau_terms += 1;
        }
    }
    let overall_var = if all_values.len() >= 2 {
        let mean = all_values.iter().sum::<f64>() / all_values.len() as f64;
        all_values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / (all_values.len() - 1) as f64
    } else {
        1.0
    };
    let floor = (1e-3 * overall_var).max(1e-8);
    let sigma2: Vec<f64> = (0..teams)
        .map(|j| {
            if dev_count[j] > 0 {
                (dev_sum[j] / dev_count[j] as f64).max(floor)
            } else {
                overall_var.max(floor)
            }
        })
        .collect();
    let tau2 = if tau_terms > 0 {
        (tau_sum / tau_terms as f64).max(floor)
    } else {
        floor
    };
    (tau2, sigma2)
}

/// Maximizes the (penalized) restricted likelihood over the variance
/// parameters, group by group, in log coordinates with multiple starts.
pub fn fit(
    dataset: &EnsembleDataset,
    grouping: &GroupingScheme,
    config: &EstimationConfig,
) -> Result<FitResult> {
    fit_from(dataset, grouping, config, None)
}

/// Like [`fit`], but with known correlations supplied (used with
/// `RhoMode::FixedKnown`).
pub fn fit_from(
    dataset: &EnsembleDataset,
    grouping: &GroupingScheme,
    config: &EstimationConfig,
    known_rho: Option<&[Vec<f64>]>,
) -> Result<FitResult> {
    if config.restarts == 0 {
        return Err(Error::Config("restarts must be >= 1".into()));
    }
    let teams = dataset.team_count();
    let structure = ModelStructure::build(dataset);
    let assignment = grouping.assignments(dataset)?;
    let n_groups = grouping.groups.len();
    let mut group_factors: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (f, &g) in assignment.iter().enumerate() {
        group_factors[g].push(f);
    }

    // Identifiability: at least two teams, every team observed in the
    // group, and enough observations left after the factor means.
    for (g, factors) in group_factors.iter().enumerate() {
        let label = &grouping.groups[g].label;
        if factors.is_empty() {
            return Err(Error::InvalidGrouping(format!("group `{label}` is empty")));
        }
        let mut team_obs = vec![0usize; teams];
        let mut observations = 0usize;
        for &f in factors {
            for cell in structure.cells_of_factor(f) {
                for &j in &cell.present {
                    team_obs[j] += 1;
                }
                observations += cell.present.len();
            }
        }
        if teams < 2 {
            return Err(Error::NotIdentifiable {
                group: label.clone(),
                teams,
                observations,
            });
        }
        if team_obs.iter().any(|&c| c == 0) {
            return Err(Error::NotIdentifiable {
                group: label.clone(),
                teams,
                observations,
            });
        }
        let rho_dim = match config.rho_mode {
            RhoMode::Estimated => rho_len(teams),
            _ => 0,
        };
        let parameters = 1 + teams + rho_dim;
        if observations < factors.len() + parameters {
            return Err(Error::NotIdentifiable {
                group: label.clone(),
                teams,
                observations,
            });
        }
    }

    let shape = match config.penalty {
        PenaltyMode::None => None,
        PenaltyMode::InverseGamma { shape } => {
            if !(shape > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "penalty shape must be > 0, got {shape}"
                )));
            }
            Some(shape)
        }
    };

    let options = SimplexOptions {
        max_iterations: config.optimizer.max_iterations,
        objective_tolerance: config.optimizer.objective_tolerance,
        parameter_tolerance: config.optimizer.parameter_tolerance,
        initial_step: 0.5,
    };

    struct GroupFit {
        tau2: f64,
        sigma2: Vec<f64>,
        rho: Vec<f64>,
        best: SimplexOutcome,
        traces: Vec<RestartTrace>,
    }

    let group_results: Vec<Result<GroupFit>> = group_factors
        .par_iter()
        .enumerate()
        .map(|(g, factors)| {
            let fixed_rho = match (config.rho_mode, known_rho) {
                (RhoMode::FixedKnown, Some(rho)) => rho[g].clone(),
                (RhoMode::FixedKnown, None) => {
                    return Err(Error::Config(
                        "rho_mode = fixed_known requires supplied correlations".into(),
                    ))
                }
                _ => Vec::new(),
            };
            let rho_dim = match config.rho_mode {
                RhoMode::Estimated => rho_len(teams),
                _ => 0,
            };
            let problem = GroupProblem {
                factors: factors.clone(),
                teams,
                rho_dim,
                fixed_rho,
                shape,
            };
            let (tau2_start, sigma2_start) = moment_start(dataset, &structure, factors);
            let mut z0 = Vec::with_capacity(1 + teams + rho_dim);
            z0.push(tau2_start.ln());
            z0.extend(sigma2_start.iter().map(|s| s.ln()));
            z0.extend(std::iter::repeat(0.0).take(rho_dim));

            let mut best: Option<SimplexOutcome> = None;
            let mut traces = Vec::with_capacity(config.restarts);
            for restart in 0..config.restarts {
                let mut start = z0.clone();
                if restart > 0 {
                    // Perturbation stream keyed by (seed, group, restart).
                    let key = config
                        .seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((g as u64) << 20)
                        .wrapping_add(restart as u64);
                    let mut rng = ChaCha8Rng::seed_from_u64(key);
                    for v in start.iter_mut() {
                        *v += rng.gen_range(-1.0..1.0);
                    }
                }
                let outcome = maximize(
                    |z| problem.objective(dataset, &structure, z),
                    &start,
                    &options,
                );
                traces.push(RestartTrace {
                    objective: outcome.value,
                    iterations: outcome.iterations,
                    evaluations: outcome.evaluations,
                    converged: outcome.converged,
                });
                if best.as_ref().is_none_or(|b| outcome.value > b.value) {
                    best = Some(outcome);
                }
            }
            let best = best.unwrap();
            let (tau2, sigma2, rho) = problem.decode(&best.x);
            Ok(GroupFit {
                tau2,
                sigma2,
                rho,
                best,
                traces,
            })
        })
        .collect();

    let mut tau2 = Vec::with_capacity(n_groups);
    let mut sigma2 = Vec::with_capacity(n_groups);
    let mut rho = Vec::with_capacity(n_groups);
    let mut traces = Vec::with_capacity(n_groups);
    let mut objective = 0.0;
    let mut converged = true;
    let mut iterations = 0;
    for (g, result) in group_results.into_iter().enumerate() {
        let fit = result?;
        objective += fit.best.value;
        converged &= fit.best.converged;
        iterations += fit.best.iterations;
        tau2.push(fit.tau2);
        sigma2.push(fit.sigma2);
        rho.push(fit.rho);
        traces.push((grouping.groups[g].label.clone(), fit.traces));
    }

    let mut params = ParameterSet::bind(dataset, grouping, tau2, sigma2, rho)?;
    if let Some(a) = shape {
        let scales: Vec<f64> = (0..n_groups)
            .map(|g| profile_scale(a, params.sigma2_of_group(g)))
            .collect();
        params.set_penalty(a, scales);
    }
    Ok(FitResult {
        params,
        objective,
        converged,
        iterations,
        traces,
    })
}
