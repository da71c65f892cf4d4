//! Model-fit diagnostics and aggregation of consensus results.
//!
//! Standardized errors should look like independent standard normals when
//! the model fits; the quantile-quantile export pairs them with theoretical
//! normal quantiles per variance-sharing group for plotting. Aggregation
//! sums consensus predictions over selections of cells (regions, months),
//! with variances propagated from the per-factor joint prediction
//! covariances and independence across factors.

use std::collections::HashMap;

use serde::Serialize;

use crate::covariance::ParameterSet;
use crate::data::EnsembleDataset;
use crate::error::{Error, Result};
use crate::inference::{intervals, ConsensusResult, IntervalLevel, UnweightedResult};
use crate::numeric::normal_quantile;

/// One standardized error: (observed - predicted) / team deviation scale.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub factor: usize,
    pub replicate: usize,
    pub team: usize,
    pub eta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupResidualSummary {
    pub group: String,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
}

#[derive(Debug, Clone)]
pub struct ResidualTable {
    pub rows: Vec<ResidualRow>,
    pub summaries: Vec<GroupResidualSummary>,
}

/// Standardized errors of every observation against its cell's consensus
/// prediction, with moment summaries per variance-sharing group.
pub fn standardized_errors(
    dataset: &EnsembleDataset,
    params: &ParameterSet,
    consensus: &ConsensusResult,
) -> Result<ResidualTable> {
    let mut rows = Vec::new();
    let mut by_group: Vec<Vec<f64>> = vec![Vec::new(); params.group_count()];
    for cell in &consensus.cells {
        let f = cell.factor;
        let sigma2 = params.sigma2(f);
        for &j in &cell.present {
            let y = dataset.value(f, cell.replicate, j).unwrap();
            let eta = (y - cell.y_hat) / sigma2[j].sqrt();
            if !eta.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite standardized error at factor {f}, team {j}"
                )));
            }
            rows.push(ResidualRow {
                factor: f,
                replicate: cell.replicate,
                team: j,
                eta,
            });
            by_group[params.group_of(f)].push(eta);
        }
    }
    let summaries = by_group
        .iter()
        .enumerate()
        .filter(|(_, values)| !values.is_empty())
        .map(|(g, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
            GroupResidualSummary {
                group: params.group_labels()[g].clone(),
                count: values.len(),
                mean,
                variance: m2,
                skewness: if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 },
            }
        })
        .collect();
    Ok(ResidualTable { rows, summaries })
}

/// One quantile-quantile panel: sorted standardized errors against standard
/// normal quantiles at the (i - 1/2)/n plotting positions.
#[derive(Debug, Clone, Serialize)]
pub struct QqPanel {
    pub group: String,
    /// (theoretical, sample) pairs, both non-decreasing.
    pub points: Vec<(f64, f64)>,
}

pub fn qq_export(residuals: &ResidualTable, params: &ParameterSet) -> Vec<QqPanel> {
    let mut by_group: Vec<Vec<f64>> = vec![Vec::new(); params.group_count()];
    for row in &residuals.rows {
        by_group[params.group_of(row.factor)].push(row.eta);
    }
    by_group
        .into_iter()
        .enumerate()
        .filter(|(_, values)| !values.is_empty())
        .map(|(g, mut values)| {
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = values.len();
            let points = values
                .into_iter()
                .enumerate()
                .map(|(i, sample)| {
                    let p = (i as f64 + 0.5) / n as f64;
                    (normal_quantile(p), sample)
                })
                .collect();
            QqPanel {
                group: params.group_labels()[g].clone(),
                points,
            }
        })
        .collect()
}

/// A named selection of cells to aggregate.
#[derive(Debug, Clone)]
pub struct Selection {
    pub label: String,
    /// (factor, replicate) members.
    pub members: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateResult {
    pub label: String,
    /// Sum of member point values.
    pub value: f64,
    /// Variance of the summed prediction error.
    pub variance: f64,
    pub members: Vec<(usize, usize)>,
}

/// Sums consensus predictions over a selection. The variance sums the
/// per-factor joint prediction covariances over the selected members;
/// factors are independent, cells within a factor are correlated through
/// the estimated mean.
pub fn aggregate(consensus: &ConsensusResult, selection: &Selection) -> Result<AggregateResult> {
    if selection.members.is_empty() {
        return Err(Error::Config(format!(
            "selection `{}` is empty",
            selection.label
        )));
    }
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for (c, cell) in consensus.cells.iter().enumerate() {
        index.insert((cell.factor, cell.replicate), c);
    }
    let mut by_factor: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut value = 0.0;
    for &(f, i) in &selection.members {
        let &c = index.get(&(f, i)).ok_or_else(|| Error::Config(format!(
            "selection `{}` references missing cell (factor {f}, replicate {i})",
            selection.label
        )))?;
        value += consensus.cells[c].y_hat;
        let local = c - consensus.cell_index_range(f).start;
        by_factor.entry(f).or_default().push(local);
    }
    let mut variance = 0.0;
    let mut factor_list: Vec<usize> = by_factor.keys().copied().collect();
    factor_list.sort_unstable();
    for f in factor_list {
        let locals = &by_factor[&f];
        let cov = consensus.prediction_covariance(f);
        for &a in locals {
            for &b in locals {
                variance += cov[(a, b)];
            }
        }
    }
    Ok(AggregateResult {
        label: selection.label.clone(),
        value,
        variance,
        members: selection.members.clone(),
    })
}

/// Unweighted counterpart: sums cell means; prediction errors are
/// independent across cells, so variances add.
pub fn aggregate_unweighted(
    unweighted: &UnweightedResult,
    selection: &Selection,
) -> Result<AggregateResult> {
    if selection.members.is_empty() {
        return Err(Error::Config(format!(
            "selection `{}` is empty",
            selection.label
        )));
    }
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for (c, &key) in unweighted.cells.iter().enumerate() {
        index.insert(key, c);
    }
    let mut value = 0.0;
    let mut variance = 0.0;
    for &(f, i) in &selection.members {
        let &c = index.get(&(f, i)).ok_or_else(|| Error::Config(format!(
            "selection `{}` references missing cell (factor {f}, replicate {i})",
            selection.label
        )))?;
        value += unweighted.cell_means[c];
        variance += unweighted.cell_prediction_variance[c];
    }
    Ok(AggregateResult {
        label: selection.label.clone(),
        value,
        variance,
        members: selection.members.clone(),
    })
}

/// Per-cell comparison of the consensus prediction with the unweighted mean.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub factor: usize,
    pub replicate: usize,
    pub consensus: f64,
    pub unweighted: f64,
    /// consensus - unweighted.
    pub delta: f64,
    /// The part of the delta explained by shrinkage toward the estimated
    /// mean: lambda0 (mu_hat - cell mean). With equal team variances the
    /// delta is exactly this term.
    pub shrinkage: f64,
    /// Whether the unweighted mean falls outside the consensus 95%
    /// prediction interval.
    pub outside_95: bool,
}

pub fn compare_unweighted(
    consensus: &ConsensusResult,
    unweighted: &UnweightedResult,
) -> Result<Vec<ComparisonRow>> {
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for (c, &key) in unweighted.cells.iter().enumerate() {
        index.insert(key, c);
    }
    let mut rows = Vec::with_capacity(consensus.cells.len());
    for cell in &consensus.cells {
        let key = (cell.factor, cell.replicate);
        let &u = index.get(&key).ok_or_else(|| {
            Error::Config(format!("unweighted result is missing cell {key:?}"))
        })?;
        let mean = unweighted.cell_means[u];
        let (lo, hi) = intervals(
            cell.y_hat,
            cell.mspe.max(0.0).sqrt(),
            IntervalLevel::NinetyFive,
        )?;
        rows.push(ComparisonRow {
            factor: cell.factor,
            replicate: cell.replicate,
            consensus: cell.y_hat,
            unweighted: mean,
            delta: cell.y_hat - mean,
            shrinkage: cell.lambda0 * (consensus.factors[cell.factor].mu_hat - mean),
            outside_95: mean < lo || mean > hi,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EnsembleDataset, EnsembleRow, FactorKey};
    use crate::inference::{consensus, unweighted_mean};
    use approx::assert_abs_diff_eq;

    fn dataset_from_values(values: &[Vec<Vec<f64>>]) -> EnsembleDataset {
        let mut rows = Vec::new();
        for (f, reps) in values.iter().enumerate() {
            for (i, teams) in reps.iter().enumerate() {
                for (j, v) in teams.iter().enumerate() {
                    rows.push(EnsembleRow {
                        team: format!("t{j}"),
                        factor: FactorKey::single("factor", &format!("f{f}")),
                        replicate: format!("{i:02}"),
                        value: *v,
                    });
                }
            }
        }
        EnsembleDataset::from_rows(rows, None).unwrap()
    }

    #[test]
    fn identical_outputs_give_zero_residuals() {
        let ds = dataset_from_values(&[vec![vec![2.0, 2.0], vec![2.0, 2.0]]]);
        let params =
            ParameterSet::per_factor(&ds, vec![1.0], vec![vec![1.0, 1.0]], Vec::new()).unwrap();
        let result = consensus(&ds, &params).unwrap();
        let residuals = standardized_errors(&ds, &params, &result).unwrap();
        for row in &residuals.rows {
            assert_abs_diff_eq!(row.eta, 0.0, epsilon = 1e-12);
        }
        assert_eq!(residuals.rows.len(), 4);
    }

    #[test]
    fn doubling_scale_halves_residuals() {
        let ds = dataset_from_values(&[vec![vec![1.0, -1.0], vec![0.5, 2.0]]]);
        let p1 =
            ParameterSet::per_factor(&ds, vec![0.5], vec![vec![1.0, 1.0]], Vec::new()).unwrap();
        let p2 =
            ParameterSet::per_factor(&ds, vec![0.5], vec![vec![4.0, 4.0]], Vec::new()).unwrap();
        let c1 = consensus(&ds, &p1).unwrap();
        let r1 = standardized_errors(&ds, &p1, &c1).unwrap();
        // Same predictions, scaled sigma: reuse c1 so only sigma changes.
        let r2 = standardized_errors(&ds, &p2, &c1).unwrap();
        for (a, b) in r1.rows.iter().zip(&r2.rows) {
            assert_abs_diff_eq!(b.eta, 0.5 * a.eta, epsilon = 1e-12);
        }
    }

    /// Residuals on data simulated from the model have variance near one.
    /// The prediction reuses each observation, so the exact variance sits
    /// below one by about 2 lambda_j; with an ensemble-sized team count the
    /// deflation is within the stated window.
    #[test]
    fn simulated_residual_variance_near_unit() {
        use crate::sim::{simulate, SimulationSpec};
        let spec = SimulationSpec::uniform(
            4,
            30,
            0.0,
            1.0,
            vec![0.6, 0.8, 0.9, 1.0, 1.1, 1.3, 1.5, 1.8, 2.2],
            13,
        );
        let ensemble = simulate(&spec).unwrap();
        let params = spec.parameter_set(&ensemble.dataset).unwrap();
        let result = consensus(&ensemble.dataset, &params).unwrap();
        let residuals = standardized_errors(&ensemble.dataset, &params, &result).unwrap();
        let n = residuals.rows.len() as f64;
        assert!(n >= 200.0);
        let mean: f64 = residuals.rows.iter().map(|r| r.eta).sum::<f64>() / n;
        let var: f64 = residuals
            .rows
            .iter()
            .map(|r| (r.eta - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(var > 0.8 && var < 1.2, "residual variance {var}");
    }

    #[test]
    fn qq_positions_and_monotonicity() {
        let ds = dataset_from_values(&[vec![vec![1.0, -1.0], vec![0.5, 2.0]]]);
        let params =
            ParameterSet::per_factor(&ds, vec![0.5], vec![vec![1.0, 1.0]], Vec::new()).unwrap();
        let result = consensus(&ds, &params).unwrap();
        let residuals = standardized_errors(&ds, &params, &result).unwrap();
        let panels = qq_export(&residuals, &params);
        assert_eq!(panels.len(), 1);
        let points = &panels[0].points;
        assert_eq!(points.len(), 4);
        // Theoretical quantiles at (i - 1/2)/4; frozen high-precision values.
        let expected = [
            -1.1503493803760079,
            -0.31863936396437514,
            0.31863936396437514,
            1.1503493803760079,
        ];
        for (point, want) in points.iter().zip(expected) {
            assert_abs_diff_eq!(point.0, want, epsilon = 1e-12);
        }
        for pair in points.windows(2) {
            assert!(pair[0].0 <= pair[1].0);
            assert!(pair[0].1 <= pair[1].1);
        }
    }

    #[test]
    fn qq_single_point_at_origin() {
        let ds = dataset_from_values(&[vec![vec![3.0]]]);
        let params =
            ParameterSet::per_factor(&ds, vec![0.5], vec![vec![1.0]], Vec::new()).unwrap();
        let mut result = consensus(&ds, &params).unwrap();
        // Force a zero residual: predict exactly the observation.
        result.cells[0].y_hat = 3.0;
        let residuals = standardized_errors(&ds, &params, &result).unwrap();
        let panels = qq_export(&residuals, &params);
        assert_eq!(panels[0].points, vec![(0.0, 0.0)]);
    }

    #[test]
    fn qq_exact_normal_scores_on_diagonal() {
        let n = 9;
        let scores: Vec<f64> = (0..n)
            .map(|i| normal_quantile((i as f64 + 0.5) / n as f64))
            .collect();
        // Build residual rows directly.
        let ds = dataset_from_values(&[vec![scores.clone()]]);
        let params =
            ParameterSet::per_factor(&ds, vec![0.5], vec![vec![1.0; n]], Vec::new()).unwrap();
        let rows: Vec<ResidualRow> = scores
            .iter()
            .enumerate()
            .map(|(j, &eta)| ResidualRow {
                factor: 0,
                replicate: 0,
                team: j,
                eta,
            })
            .collect();
        let table = ResidualTable {
            rows,
            summaries: Vec::new(),
        };
        let panels = qq_export(&table, &params);
        for (theoretical, sample) in &panels[0].points {
            assert_abs_diff_eq!(theoretical, sample, epsilon = 1e-12);
        }
    }

    #[test]
    fn aggregate_single_member_is_identity() {
        let ds = dataset_from_values(&[vec![vec![1.0, 2.0], vec![3.0, 1.0]]]);
        let params =
            ParameterSet::per_factor(&ds, vec![0.7], vec![vec![1.0, 2.0]], Vec::new()).unwrap();
        let result = consensus(&ds, &params).unwrap();
        let out = aggregate(
            &result,
            &Selection {
                label: "one".into(),
                members: vec![(0, 1)],
            },
        )
        .unwrap();
        assert_abs_diff_eq!(out.value, result.cells[1].y_hat, epsilon = 1e-14);
        assert_abs_diff_eq!(
            out.variance,
            result.cells[1].mspe_mu_estimated,
            epsilon = 1e-14
        );
    }

    #[test]
    fn aggregate_across_factors_adds_variance() {
        let ds = dataset_from_values(&[
            vec![vec![1.0, 2.0]],
            vec![vec![3.0, 1.0]],
        ]);
        let params = ParameterSet::per_factor(
            &ds,
            vec![0.7, 0.4],
            vec![vec![1.0, 2.0], vec![0.5, 0.5]],
            Vec::new(),
        )
        .unwrap();
        let result = consensus(&ds, &params).unwrap();
        let a = aggregate(
            &result,
            &Selection {
                label: "a".into(),
                members: vec![(0, 0)],
            },
        )
        .unwrap();
        let b = aggregate(
            &result,
            &Selection {
                label: "b".into(),
                members: vec![(1, 0)],
            },
        )
        .unwrap();
        let both = aggregate(
            &result,
            &Selection {
                label: "ab".into(),
                members: vec![(0, 0), (1, 0)],
            },
        )
        .unwrap();
        assert_abs_diff_eq!(both.value, a.value + b.value, epsilon = 1e-14);
        assert_abs_diff_eq!(both.variance, a.variance + b.variance, epsilon = 1e-14);
    }

    /// Values add exactly for any disjoint split; within one factor the
    /// variances do not (cells share the estimated mean), across factors
    /// they do.
    #[test]
    fn aggregate_linearity_within_factor() {
        let ds = dataset_from_values(&[vec![
            vec![1.0, 2.0],
            vec![0.0, 0.5],
            vec![3.0, 2.5],
        ]]);
        let params =
            ParameterSet::per_factor(&ds, vec![0.7], vec![vec![1.0, 2.0]], Vec::new()).unwrap();
        let result = consensus(&ds, &params).unwrap();
        let select = |label: &str, members: Vec<(usize, usize)>| {
            aggregate(
                &result,
                &Selection {
                    label: label.into(),
                    members,
                },
            )
            .unwrap()
        };
        let first = select("first", vec![(0, 0)]);
        let rest = select("rest", vec![(0, 1), (0, 2)]);
        let whole = select("whole", vec![(0, 0), (0, 1), (0, 2)]);
        assert_abs_diff_eq!(whole.value, first.value + rest.value, epsilon = 1e-14);
        // Shared-mean cross terms make the joint variance exceed the sum.
        assert!(whole.variance > first.variance + rest.variance);
    }

    #[test]
    fn aggregate_missing_cell_is_error() {
        let ds = dataset_from_values(&[vec![vec![1.0, 2.0]]]);
        let params =
            ParameterSet::per_factor(&ds, vec![0.7], vec![vec![1.0, 2.0]], Vec::new()).unwrap();
        let result = consensus(&ds, &params).unwrap();
        let err = aggregate(
            &result,
            &Selection {
                label: "bad".into(),
                members: vec![(0, 5)],
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn comparison_equal_variances_reduces_to_shrinkage() {
        let ds = dataset_from_values(&[vec![
            vec![1.0, 2.0, 3.0],
            vec![0.0, 1.0, 2.0],
        ]]);
        let params =
            ParameterSet::per_factor(&ds, vec![0.6], vec![vec![1.5; 3]], Vec::new()).unwrap();
        let result = consensus(&ds, &params).unwrap();
        let unweighted = unweighted_mean(&ds, &params).unwrap();
        let rows = compare_unweighted(&result, &unweighted).unwrap();
        assert_eq!(rows.len(), result.cells.len());
        for row in &rows {
            assert_abs_diff_eq!(row.delta, row.shrinkage, epsilon = 1e-12);
        }
    }

    /// One team with inflated variance and an outlying value: the consensus
    /// moves toward the other teams relative to the unweighted mean. Sign
    /// check is analytic: the outlier gets weight below 1/J, so the
    /// consensus sits below the mean when the outlier is high.
    #[test]
    fn comparison_discounts_inflated_outlier() {
        let ds = dataset_from_values(&[vec![vec![0.0, 0.2, 5.0]]]);
        let params = ParameterSet::per_factor(
            &ds,
            vec![10.0],
            vec![vec![0.5, 0.5, 8.0]],
            Vec::new(),
        )
        .unwrap();
        let result = consensus(&ds, &params).unwrap();
        let unweighted = unweighted_mean(&ds, &params).unwrap();
        let rows = compare_unweighted(&result, &unweighted).unwrap();
        assert!(rows[0].delta < 0.0, "delta {}", rows[0].delta);
    }
}
