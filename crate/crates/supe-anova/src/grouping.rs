//! Partitioning factors into variance-sharing groups.
//!
//! Replicate counts per factor are usually too small to estimate variance
//! parameters factor-by-factor, so factors with similar ensemble variability
//! share their parameters. The construction: compute a robust per-factor
//! variability summary, cluster its log10 with exact one-dimensional k-means,
//! pick the smallest cluster count explaining 90% of the spread, and rank the
//! groups from most to least variable.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{EnsembleDataset, FactorKey};
use crate::error::{Error, Result};

/// One variance-sharing group of factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorGroup {
    pub label: String,
    pub members: Vec<FactorKey>,
    /// Ordinal variability rank within its panel (1 = most variable), when
    /// the group came from clustering.
    pub rank: Option<u32>,
}

/// A partition of dataset factors into variance-sharing groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingScheme {
    pub groups: Vec<FactorGroup>,
    /// Which data defined the scheme (e.g. the observation type it was
    /// clustered on), for provenance in artifacts.
    pub provenance: Option<String>,
}

impl GroupingScheme {
    /// One group per factor.
    pub fn identity(dataset: &EnsembleDataset) -> Self {
        GroupingScheme {
            groups: dataset
                .factors()
                .iter()
                .map(|key| FactorGroup {
                    label: key.to_string(),
                    members: vec![key.clone()],
                    rank: None,
                })
                .collect(),
            provenance: None,
        }
    }

    /// All factors in a single group.
    pub fn pooled(dataset: &EnsembleDataset) -> Self {
        GroupingScheme {
            groups: vec![FactorGroup {
                label: "all".into(),
                members: dataset.factors().to_vec(),
                rank: None,
            }],
            provenance: None,
        }
    }

    /// Resolves the scheme against a dataset, returning the group index of
    /// each factor. Errors unless the groups partition the dataset factors
    /// exactly. The same scheme can be resolved against any dataset with the
    /// same factor grid (e.g. a different observation type).
    pub fn assignments(&self, dataset: &EnsembleDataset) -> Result<Vec<usize>> {
        let mut assignment = vec![usize::MAX; dataset.factor_count()];
        for (g, group) in self.groups.iter().enumerate() {
            for key in &group.members {
                let f = dataset.factor_index(key).ok_or_else(|| {
                    Error::InvalidGrouping(format!(
                        "group `{}` references unknown factor {key}",
                        group.label
                    ))
                })?;
                if assignment[f] != usize::MAX {
                    return Err(Error::InvalidGrouping(format!(
                        "factor {key} appears in more than one group"
                    )));
                }
                assignment[f] = g;
            }
        }
        if let Some(f) = assignment.iter().position(|&g| g == usize::MAX) {
            return Err(Error::InvalidGrouping(format!(
                "factor {} is not covered by any group",
                dataset.factors()[f]
            )));
        }
        Ok(assignment)
    }
}

/// Robust variability summary for one factor: the median over (replicate,
/// team) of absolute deviations from the per-replicate team median. The
/// median of an even count is the midpoint of the central pair.
pub fn robust_variability(dataset: &EnsembleDataset, factor: usize) -> Result<f64> {
    let mut deviations = Vec::new();
    for i in 0..dataset.replicate_count(factor) {
        let values: Vec<f64> = dataset.cell(factor, i).iter().flatten().copied().collect();
        if values.is_empty() {
            return Err(Error::EmptyCell {
                factor: dataset.factors()[factor].to_string(),
                replicate: dataset.replicate_labels(factor)[i].clone(),
            });
        }
        let center = median(&values);
        deviations.extend(values.iter().map(|v| (v - center).abs()));
    }
    Ok(median(&deviations))
}

/// Midpoint-of-central-pair median. Input need not be sorted.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Result of exact one-dimensional k-means.
#[derive(Debug, Clone)]
pub struct Kmeans1d {
    /// Cluster index per input value (clusters ordered by ascending mean).
    pub assignment: Vec<usize>,
    /// Cluster means, ascending.
    pub means: Vec<f64>,
    /// Within-cluster sum of squares per cluster.
    pub within_ss: Vec<f64>,
    pub total_within_ss: f64,
}

/// Globally optimal 1-D k-means via dynamic programming over sorted values.
/// An optimal clustering of scalars is contiguous in sorted order, so the DP
/// over split points is exact. O(k n^2) with prefix sums, which is plenty for
/// the region-count scale this is used at.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<Kmeans1d> {
    let n = values.len();
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(Error::TooManyClusters {
            k,
            distinct: distinct.len(),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    // Prefix sums for O(1) segment cost: SS of sorted[i..=j] about its mean.
    let mut prefix = vec![0.0; n + 1];
    let mut prefix_sq = vec![0.0; n + 1];
    for (i, &v) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
        prefix_sq[i + 1] = prefix_sq[i] + v * v;
    }
    let segment_cost = |i: usize, j: usize| -> f64 {
        let count = (j - i + 1) as f64;
        let sum = prefix[j + 1] - prefix[i];
        (prefix_sq[j + 1] - prefix_sq[i] - sum * sum / count).max(0.0)
    };

    // cost[c][j]: best cost of grouping sorted[0..=j] into c+1 clusters.
    let mut cost = vec![vec![f64::INFINITY; n]; k];
    let mut split = vec![vec![0usize; n]; k];
    for j in 0..n {
        cost[0][j] = segment_cost(0, j);
    }
    for c in 1..k {
        for j in c..n {
            for s in c..=j {
                let candidate = cost[c - 1][s - 1] + segment_cost(s, j);
                if candidate < cost[c][j] {
                    cost[c][j] = candidate;
                    split[c][j] = s;
                }
            }
        }
    }

    // Recover boundaries.
    let mut boundaries = vec![0usize; k + 1];
    boundaries[k] = n;
    let mut j = n - 1;
    for c in (1..k).rev() {
        let s = split[c][j];
        boundaries[c] = s;
        j = s - 1;
    }

    let mut assignment_sorted = vec![0usize; n];
    let mut means = Vec::with_capacity(k);
    let mut within_ss = Vec::with_capacity(k);
    for c in 0..k {
        let (lo, hi) = (boundaries[c], boundaries[c + 1]);
        for a in assignment_sorted.iter_mut().take(hi).skip(lo) {
            *a = c;
        }
        let count = (hi - lo) as f64;
        means.push((prefix[hi] - prefix[lo]) / count);
        within_ss.push(segment_cost(lo, hi - 1));
    }

    let mut assignment = vec![0usize; n];
    for (pos, &orig) in order.iter().enumerate() {
        assignment[orig] = assignment_sorted[pos];
    }
    Ok(Kmeans1d {
        assignment,
        means,
        within_ss,
        total_within_ss: cost[k - 1][n - 1],
    })
}

/// Smallest k whose clustering explains at least `threshold` of the total
/// sum of squares (between-cluster SS >= threshold x total SS).
pub fn choose_k(values: &[f64], threshold: f64) -> Result<usize> {
    assert!(!values.is_empty(), "choose_k on empty values");
    let total_ss = kmeans_1d(values, 1)?.total_within_ss;
    if total_ss <= 0.0 {
        return Ok(1);
    }
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    for k in 1..=distinct.len() {
        let within = kmeans_1d(values, k)?.total_within_ss;
        if (total_ss - within) / total_ss >= threshold {
            return Ok(k);
        }
    }
    Ok(distinct.len())
}

/// Configuration for [`build_grouping`]: cluster the levels of `over` within
/// each level of `within` (when given), at the stated explained-SS threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub over: String,
    pub within: Option<String>,
    pub threshold: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            over: "region".into(),
            within: Some("season".into()),
            threshold: 0.90,
        }
    }
}

/// Warning emitted when a factor had zero variability and was attached to the
/// least-variable group rather than clustered (its log variability is
/// undefined).
#[derive(Debug, Clone)]
pub struct GroupingWarning {
    pub factor: FactorKey,
    pub message: String,
}

/// Clusters factors by the order of magnitude of their robust variability and
/// returns the grouping plus any degenerate-factor warnings. The scheme built
/// on one observation type can be resolved against datasets of the others.
pub fn build_grouping(
    dataset: &EnsembleDataset,
    spec: &ClusterSpec,
    provenance: Option<String>,
) -> Result<(GroupingScheme, Vec<GroupingWarning>)> {
    let factors = dataset.factors();
    if factors.is_empty() {
        return Err(Error::EmptyDataset("no factors to group".into()));
    }
    if factors[0].level(&spec.over).is_none() {
        return Err(Error::Config(format!(
            "factor keys have no `{}` component to cluster over",
            spec.over
        )));
    }

    // Panels: one clustering per level of the `within` component.
    let mut panels: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (f, key) in factors.iter().enumerate() {
        let panel = match &spec.within {
            Some(name) => key
                .level(name)
                .ok_or_else(|| {
                    Error::Config(format!("factor {key} has no `{name}` component"))
                })?
                .to_string(),
            None => String::new(),
        };
        panels.entry(panel).or_default().push(f);
    }

    let mut groups = Vec::new();
    let mut warnings = Vec::new();
    for (panel, members) in panels {
        let mut log_var = Vec::new();
        let mut clustered = Vec::new();
        let mut degenerate = Vec::new();
        for &f in &members {
            let s = robust_variability(dataset, f)?;
            if s > 0.0 {
                log_var.push(s.log10());
                clustered.push(f);
            } else {
                degenerate.push(f);
                warnings.push(GroupingWarning {
                    factor: factors[f].clone(),
                    message: "zero ensemble variability; assigned to the least-variable group"
                        .into(),
                });
            }
        }
        if clustered.is_empty() {
            // Everything degenerate: one group holding the whole panel.
            groups.push(FactorGroup {
                label: panel_label(&panel, 1),
                members: members.iter().map(|&f| factors[f].clone()).collect(),
                rank: Some(1),
            });
            continue;
        }

        let k = choose_k(&log_var, spec.threshold)?;
        let result = kmeans_1d(&log_var, k)?;

        // kmeans_1d orders clusters by ascending mean; rank 1 = most variable.
        let mut panel_groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (pos, &f) in clustered.iter().enumerate() {
            panel_groups[result.assignment[pos]].push(f);
        }
        for &f in &degenerate {
            panel_groups[0].push(f);
        }
        for (cluster, group_members) in panel_groups.into_iter().enumerate() {
            let rank = (k - cluster) as u32;
            groups.push(FactorGroup {
                label: panel_label(&panel, rank),
                members: group_members.iter().map(|&f| factors[f].clone()).collect(),
                rank: Some(rank),
            });
        }
    }
    groups.sort_by(|a, b| a.label.cmp(&b.label));
    Ok((
        GroupingScheme {
            groups,
            provenance,
        },
        warnings,
    ))
}

fn panel_label(panel: &str, rank: u32) -> String {
    if panel.is_empty() {
        format!("group-{rank}")
    } else {
        format!("{panel}/{rank}")
    }
}
