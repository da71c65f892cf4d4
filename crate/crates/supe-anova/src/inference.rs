//! Consensus estimation and prediction: BLUE of the climatological means,
//! BLUP of the per-replicate consensus, optimal weights, variances, MSPEs,
//! and intervals.
//!
//! Two routes produce the same answers where both apply. The scalar route
//! evaluates the closed forms that hold when every cell is complete and the
//! team deviations are uncorrelated: weights inversely proportional to team
//! variances, harmonic-sum variances. The general route runs generalized
//! least squares through the per-cell covariance blocks and handles any
//! missingness pattern and nonzero correlations. `consensus` picks the
//! scalar route automatically when it applies.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{solve_block, ModelStructure, ParameterSet};
use crate::data::EnsembleDataset;
use crate::error::{Error, Result};

/// Which computational route produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferencePath {
    ScalarBalanced,
    GeneralGls,
}

/// Interval multipliers: one-sigma, two-sigma, or the central 95% band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntervalLevel {
    OneSigma,
    TwoSigma,
    NinetyFive,
}

impl IntervalLevel {
    pub fn multiplier(self) -> f64 {
        match self {
            IntervalLevel::OneSigma => 1.0,
            IntervalLevel::TwoSigma => 2.0,
            IntervalLevel::NinetyFive => 1.96,
        }
    }
}

/// `point ± k(level) * spread`.
pub fn intervals(point: f64, spread: f64, level: IntervalLevel) -> Result<(f64, f64)> {
    if spread < 0.0 {
        return Err(Error::NegativeSpread(spread));
    }
    let k = level.multiplier();
    Ok((point - k * spread, point + k * spread))
}

/// Per-factor estimation output: the mean estimate, its variance, and the
/// per-team climatological weights (each team's share in estimating the
/// mean, inversely proportional to its variance).
#[derive(Debug, Clone)]
pub struct FactorConsensus {
    pub mu_hat: f64,
    pub mu_var: f64,
    pub climatological_weights: Vec<f64>,
}

/// Per-cell prediction output. `mspe` treats the factor mean as known (the
/// plug-in convention used for the reported intervals); `mspe_mu_estimated`
/// additionally propagates the variance of the estimated mean.
#[derive(Debug, Clone)]
pub struct CellConsensus {
    pub factor: usize,
    pub replicate: usize,
    pub present: Vec<usize>,
    pub y_hat: f64,
    pub mspe: f64,
    pub mspe_mu_estimated: f64,
    pub lambda0: f64,
    /// BLUP coefficients per present team.
    pub lambdas: Vec<f64>,
    /// Estimation weights per present team: the coefficient of each
    /// observation in the factor-mean estimate.
    pub weights: Vec<f64>,
}

/// Full consensus output over a dataset.
#[derive(Debug, Clone)]
pub struct ConsensusResult {
    pub path: InferencePath,
    pub factors: Vec<FactorConsensus>,
    pub cells: Vec<CellConsensus>,
    factor_cell_ranges: Vec<std::ops::Range<usize>>,
    tau2_by_factor: Vec<f64>,
}

impl ConsensusResult {
    pub fn cells_of_factor(&self, factor: usize) -> &[CellConsensus] {
        &self.cells[self.factor_cell_ranges[factor].clone()]
    }

    pub fn cell_index_range(&self, factor: usize) -> std::ops::Range<usize> {
        self.factor_cell_ranges[factor].clone()
    }

    /// Joint covariance of the prediction errors of this factor's cells,
    /// with the estimated mean propagated. Cells within a factor are
    /// correlated through the shared mean estimate; the diagonal equals
    /// `mspe_mu_estimated`.
    pub fn prediction_covariance(&self, factor: usize) -> DMatrix<f64> {
        let cells = self.cells_of_factor(factor);
        let mu_var = self.factors[factor].mu_var;
        let tau2 = self.tau2_by_factor[factor];
        let n = cells.len();
        DMatrix::from_fn(n, n, |i, k| {
            let cross = cells[i].lambda0 * cells[k].lambda0 * mu_var;
            if i == k {
                cross + tau2 * cells[i].lambda0
            } else {
                cross
            }
        })
    }

    /// Sum of weights over the factor's cells; 1 by construction.
    pub fn weight_sum(&self, factor: usize) -> f64 {
        self.cells_of_factor(factor)
            .iter()
            .map(|c| c.weights.iter().sum::<f64>())
            .sum()
    }
}

/// Output of the mean-estimation step.
#[derive(Debug, Clone)]
pub struct BlueResult {
    pub path: InferencePath,
    pub mu: Vec<f64>,
    /// Diagonal of the mean covariance: distinct factors share no
    /// observations, so the estimated means are uncorrelated.
    pub mu_var: Vec<f64>,
    /// Per cell, per present team: weight of the observation in its
    /// factor-mean estimate. Indexed like `ModelStructure::cells`.
    pub weights: Vec<Vec<f64>>,
}

/// Output of the prediction step.
#[derive(Debug, Clone)]
pub struct BlupResult {
    pub path: InferencePath,
    /// Predicted per-cell consensus.
    pub y_star: Vec<f64>,
    /// Prediction MSPE per cell (mean treated as known).
    pub mspe: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub lambdas: Vec<Vec<f64>>,
}

/// Output of the random-effect prediction in the general route.
#[derive(Debug, Clone)]
pub struct AlphaResult {
    /// Predicted replicate deviation per cell.
    pub alpha_star: Vec<f64>,
    /// Prediction variance per cell (diagonal of the alpha prediction
    /// covariance; cells map to distinct deviations, so it is diagonal).
    pub alpha_var: Vec<f64>,
    /// Predicted per-cell consensus `mu + alpha`.
    pub y_pred: Vec<f64>,
}

fn scalar_path_available(dataset: &EnsembleDataset, params: &ParameterSet) -> Option<String> {
    if params.has_correlations() {
        return Some("nonzero team correlations".into());
    }
    if !dataset.is_complete() {
        return Some("missing team cells".into());
    }
    None
}

/// BLUE of the factor means via the closed forms for the uncorrelated
/// complete case.
pub fn blue_mu_scalar(dataset: &EnsembleDataset, params: &ParameterSet) -> Result<BlueResult> {
    if let Some(reason) = scalar_path_available(dataset, params) {
        return Err(Error::ScalarPathUnavailable(reason));
    }
    let structure = ModelStructure::build(dataset);
    let mut mu = Vec::with_capacity(dataset.factor_count());
    let mut mu_var = Vec::with_capacity(dataset.factor_count());
    let mut weights = vec![Vec::new(); structure.cell_count()];
    for f in 0..dataset.factor_count() {
        let sigma2 = params.sigma2(f);
        let tau2 = params.tau2(f);
        let replicates = dataset.replicate_count(f) as f64;
        let h: f64 = sigma2.iter().map(|s| 1.0 / s).sum();
        let w: Vec<f64> = sigma2.iter().map(|s| 1.0 / (s * replicates * h)).collect();
        let mut estimate = 0.0;
        for (c, cell) in structure
            .cells_of_factor(f)
            .iter()
            .enumerate()
        {
            let mut cell_weights = Vec::with_capacity(cell.present.len());
            for &j in &cell.present {
                let y = dataset.value(f, cell.replicate, j).unwrap();
                estimate += w[j] * y;
                cell_weights.push(w[j]);
            }
            weights[structure.cell_index_range(f).start + c] = cell_weights;
        }
        mu.push(estimate);
        mu_var.push((1.0 / h + tau2) / replicates);
    }
    Ok(BlueResult {
        path: InferencePath::ScalarBalanced,
        mu,
        mu_var,
        weights,
    })
}

/// BLUP of the per-cell consensus via the closed forms, with the factor
/// means supplied (true values in simulation, estimates in application).
pub fn blup_y_scalar(
    dataset: &EnsembleDataset,
    params: &ParameterSet,
    mu: &[f64],
) -> Result<BlupResult> {
    if let Some(reason) = scalar_path_available(dataset, params) {
        return Err(Error::ScalarPathUnavailable(reason));
    }
    let structure = ModelStructure::build(dataset);
    let mut result = BlupResult {
        path: InferencePath::ScalarBalanced,
        y_star: Vec::with_capacity(structure.cell_count()),
        mspe: Vec::with_capacity(structure.cell_count()),
        lambda0: Vec::with_capacity(structure.cell_count()),
        lambdas: Vec::with_capacity(structure.cell_count()),
    };
    for cell in structure.cells() {
        let f = cell.factor;
        let sigma2 = params.sigma2(f);
        let tau2 = params.tau2(f);
        let h: f64 = sigma2.iter().map(|s| 1.0 / s).sum();
        // tau2 = 0 is the exact limit: the consensus equals the mean.
        let (lambda0, lambdas, mspe) = if tau2 == 0.0 {
            (1.0, vec![0.0; sigma2.len()], 0.0)
        } else {
            let denom = 1.0 / tau2 + h;
            (
                1.0 / (tau2 * denom),
                sigma2.iter().map(|s| 1.0 / (s * denom)).collect(),
                1.0 / denom,
            )
        };
        let mut y_star = lambda0 * mu[f];
        for &j in &cell.present {
            y_star += lambdas[j] * dataset.value(f, cell.replicate, j).unwrap();
        }
        result.y_star.push(y_star);
        result.mspe.push(mspe);
        result.lambda0.push(lambda0);
        result.lambdas.push(lambdas);
    }
    Ok(result)
}

/// Per-factor GLS pieces shared by the general-route operations.
struct FactorGls {
    mu_hat: f64,
    mu_var: f64,
    /// Per cell: B^{-1} 1 restricted to present teams.
    binv_ones: Vec<Vec<f64>>,
    /// Per cell: 1' B^{-1} 1.
    a: Vec<f64>,
    /// Per cell: 1' B^{-1} y.
    s: Vec<f64>,
}

fn factor_gls(
    dataset: &EnsembleDataset,
    structure: &ModelStructure,
    params: &ParameterSet,
    factor: usize,
) -> Result<FactorGls> {
    let cells = structure.cells_of_factor(factor);
    if cells.is_empty() {
        return Err(Error::EmptyFactor(dataset.factors()[factor].to_string()));
    }
    let mut binv_ones = Vec::with_capacity(cells.len());
    let mut a = Vec::with_capacity(cells.len());
    let mut s = Vec::with_capacity(cells.len());
    // Complete cells within a factor share one factorization.
    let mut cached: Option<(Vec<usize>, crate::covariance::CellSolve)> = None;
    for cell in cells {
        let solve = match &cached {
            Some((mask, solve)) if *mask == cell.present => Some(solve),
            _ => None,
        };
        let binv_one = match solve {
            Some(solve) => solve.solve_ones(),
            None => {
                let solve = solve_block(params, cell)?;
                let v = solve.solve_ones();
                cached = Some((cell.present.clone(), solve));
                v
            }
        };
        let mut si = 0.0;
        for (r, &j) in cell.present.iter().enumerate() {
            si += binv_one[r] * dataset.value(factor, cell.replicate, j).unwrap();
        }
        a.push(binv_one.sum());
        s.push(si);
        binv_ones.push(binv_one.iter().copied().collect());
    }
    let c: f64 = a.iter().sum();
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::EmptyFactor(dataset.factors()[factor].to_string()));
    }
    Ok(FactorGls {
        mu_hat: s.iter().sum::<f64>() / c,
        mu_var: 1.0 / c,
        binv_ones,
        a,
        s,
    })
}

/// Generalized-least-squares BLUE of the factor means: handles any nonzero
/// correlations and any missingness pattern that leaves each factor with at
/// least one observation.
pub fn blue_mu_general(dataset: &EnsembleDataset, params: &ParameterSet) -> Result<BlueResult> {
    let structure = ModelStructure::build(dataset);
    let per_factor: Vec<FactorGls> = (0..dataset.factor_count())
        .into_par_iter()
        .map(|f| factor_gls(dataset, &structure, params, f))
        .collect::<Result<_>>()?;
    let mut weights = vec![Vec::new(); structure.cell_count()];
    for (f, gls) in per_factor.iter().enumerate() {
        let c = 1.0 / gls.mu_var;
        for (local, binv_one) in gls.binv_ones.iter().enumerate() {
            let idx = structure.cell_index_range(f).start + local;
            weights[idx] = binv_one.iter().map(|v| v / c).collect();
        }
    }
    Ok(BlueResult {
        path: InferencePath::GeneralGls,
        mu: per_factor.iter().map(|g| g.mu_hat).collect(),
        mu_var: per_factor.iter().map(|g| g.mu_var).collect(),
        weights,
    })
}

/// General-route BLUP of the replicate deviations given estimated (or true)
/// factor means, with the per-cell prediction variance and the resulting
/// consensus predictions.
pub fn blup_alpha_general(
    dataset: &EnsembleDataset,
    params: &ParameterSet,
    mu: &[f64],
) -> Result<AlphaResult> {
    let structure = ModelStructure::build(dataset);
    let mut result = AlphaResult {
        alpha_star: Vec::with_capacity(structure.cell_count()),
        alpha_var: Vec::with_capacity(structure.cell_count()),
        y_pred: Vec::with_capacity(structure.cell_count()),
    };
    for f in 0..dataset.factor_count() {
        let gls = factor_gls(dataset, &structure, params, f)?;
        let tau2 = params.tau2(f);
        for (local, _) in structure.cells_of_factor(f).iter().enumerate() {
            let alpha = tau2 * (gls.s[local] - gls.a[local] * mu[f]);
            let alpha_var = tau2 * (1.0 - tau2 * gls.a[local]);
            result.alpha_star.push(alpha);
            result.alpha_var.push(alpha_var);
            result.y_pred.push(mu[f] + alpha);
        }
    }
    Ok(result)
}

/// Auto-dispatching BLUE: scalar closed forms when they apply, otherwise
/// the general route.
pub fn blue_mu(dataset: &EnsembleDataset, params: &ParameterSet) -> Result<BlueResult> {
    match scalar_path_available(dataset, params) {
        None => blue_mu_scalar(dataset, params),
        Some(_) => blue_mu_general(dataset, params),
    }
}

/// General-route BLUP of the per-cell consensus with supplied means,
/// expressed through the prediction coefficients.
pub fn blup_y_general(
    dataset: &EnsembleDataset,
    params: &ParameterSet,
    mu: &[f64],
) -> Result<BlupResult> {
    let structure = ModelStructure::build(dataset);
    let mut result = BlupResult {
        path: InferencePath::GeneralGls,
        y_star: Vec::with_capacity(structure.cell_count()),
        mspe: Vec::with_capacity(structure.cell_count()),
        lambda0: Vec::with_capacity(structure.cell_count()),
        lambdas: Vec::with_capacity(structure.cell_count()),
    };
    for f in 0..dataset.factor_count() {
        let gls = factor_gls(dataset, &structure, params, f)?;
        let tau2 = params.tau2(f);
        for (local, cell) in structure.cells_of_factor(f).iter().enumerate() {
            let lambdas: Vec<f64> = gls.binv_ones[local].iter().map(|v| tau2 * v).collect();
            let lambda0 = 1.0 - tau2 * gls.a[local];
            let mut y_star = lambda0 * mu[f];
            for (r, &j) in cell.present.iter().enumerate() {
                y_star += lambdas[r] * dataset.value(f, cell.replicate, j).unwrap();
            }
            result.y_star.push(y_star);
            result.mspe.push(tau2 * lambda0);
            result.lambda0.push(lambda0);
            result.lambdas.push(lambdas);
        }
    }
    Ok(result)
}

/// Auto-dispatching BLUP with supplied means.
pub fn blup_y(
    dataset: &EnsembleDataset,
    params: &ParameterSet,
    mu: &[f64],
) -> Result<BlupResult> {
    match scalar_path_available(dataset, params) {
        None => blup_y_scalar(dataset, params, mu),
        Some(_) => blup_y_general(dataset, params, mu),
    }
}

/// Full plug-in consensus: estimated means, predictions with both MSPE
/// conventions, weights, prediction coefficients, climatological weights.
pub fn consensus(dataset: &EnsembleDataset, params: &ParameterSet) -> Result<ConsensusResult> {
    let structure = ModelStructure::build(dataset);
    let path = match scalar_path_available(dataset, params) {
        None => InferencePath::ScalarBalanced,
        Some(_) => InferencePath::GeneralGls,
    };
    let per_factor: Vec<FactorGls> = (0..dataset.factor_count())
        .into_par_iter()
        .map(|f| factor_gls(dataset, &structure, params, f))
        .collect::<Result<_>>()?;

    let mut factors = Vec::with_capacity(dataset.factor_count());
    let mut cells = Vec::with_capacity(structure.cell_count());
    let mut ranges = Vec::with_capacity(dataset.factor_count());
    let mut tau2_by_factor = Vec::with_capacity(dataset.factor_count());
    for (f, gls) in per_factor.iter().enumerate() {
        let sigma2 = params.sigma2(f);
        let tau2 = params.tau2(f);
        let h: f64 = sigma2.iter().map(|s| 1.0 / s).sum();
        let climatological_weights: Vec<f64> = sigma2.iter().map(|s| 1.0 / (s * h)).collect();
        factors.push(FactorConsensus {
            mu_hat: gls.mu_hat,
            mu_var: gls.mu_var,
            climatological_weights,
        });
        tau2_by_factor.push(tau2);

        let start = cells.len();
        let c = 1.0 / gls.mu_var;
        for (local, cell) in structure.cells_of_factor(f).iter().enumerate() {
            let lambda0 = 1.0 - tau2 * gls.a[local];
            let lambdas: Vec<f64> = gls.binv_ones[local].iter().map(|v| tau2 * v).collect();
            let weights: Vec<f64> = gls.binv_ones[local].iter().map(|v| v / c).collect();
            let mut y_hat = lambda0 * gls.mu_hat;
            for (r, &j) in cell.present.iter().enumerate() {
                y_hat += lambdas[r] * dataset.value(f, cell.replicate, j).unwrap();
            }
            let mspe = tau2 * lambda0;
            cells.push(CellConsensus {
                factor: f,
                replicate: cell.replicate,
                present: cell.present.clone(),
                y_hat,
                mspe,
                mspe_mu_estimated: mspe + lambda0 * lambda0 * gls.mu_var,
                lambda0,
                lambdas,
                weights,
            });
        }
        ranges.push(start..cells.len());
    }
    Ok(ConsensusResult {
        path,
        factors,
        cells,
        factor_cell_ranges: ranges,
        tau2_by_factor,
    })
}

/// Per-cell unweighted means and the variance of the per-factor unweighted
/// grand mean under team-specific variances: each team enters with weight
/// 1/J', so the variance is the weighted sum of team variances plus the
/// replicate-deviation term, not the naive common-variance formula.
#[derive(Debug, Clone)]
pub struct UnweightedResult {
    /// (factor, replicate) per cell, aligned with the vectors below.
    pub cells: Vec<(usize, usize)>,
    /// Mean over present teams, per cell (`ModelStructure` order).
    pub cell_means: Vec<f64>,
    /// Grand mean per factor.
    pub factor_means: Vec<f64>,
    /// Variance of the grand mean per factor.
    pub factor_variance: Vec<f64>,
    /// Per-cell prediction variance of the cell mean as a predictor of the
    /// consensus: (1/J'^2) sum of present team variances.
    pub cell_prediction_variance: Vec<f64>,
}

pub fn unweighted_mean(
    dataset: &EnsembleDataset,
    params: &ParameterSet,
) -> Result<UnweightedResult> {
    let structure = ModelStructure::build(dataset);
    let mut cells_index = Vec::with_capacity(structure.cell_count());
    let mut cell_means = Vec::with_capacity(structure.cell_count());
    let mut cell_prediction_variance = Vec::with_capacity(structure.cell_count());
    let mut factor_means = Vec::with_capacity(dataset.factor_count());
    let mut factor_variance = Vec::with_capacity(dataset.factor_count());
    for f in 0..dataset.factor_count() {
        let cells = structure.cells_of_factor(f);
        if cells.len() != dataset.replicate_count(f) {
            return Err(Error::EmptyCell {
                factor: dataset.factors()[f].to_string(),
                replicate: "?".into(),
            });
        }
        let sigma2 = params.sigma2(f);
        let tau2 = params.tau2(f);
        let mut grand = 0.0;
        let mut grand_var = 0.0;
        for cell in cells {
            let jp = cell.present.len() as f64;
            let mut mean = 0.0;
            let mut eta_var = 0.0;
            for &j in &cell.present {
                mean += dataset.value(f, cell.replicate, j).unwrap() / jp;
                eta_var += sigma2[j] / (jp * jp);
            }
            cells_index.push((f, cell.replicate));
            cell_means.push(mean);
            cell_prediction_variance.push(eta_var);
            grand += mean;
            grand_var += tau2 + eta_var;
        }
        let i = cells.len() as f64;
        factor_means.push(grand / i);
        factor_variance.push(grand_var / (i * i));
    }
    Ok(UnweightedResult {
        cells: cells_index,
        cell_means,
        factor_means,
        factor_variance,
        cell_prediction_variance,
    })
}
