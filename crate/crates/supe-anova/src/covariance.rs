//! Design-matrix structure and block covariance services.
//!
//! Observations in different (factor, replicate) cells are independent, so
//! the marginal covariance of the stacked observation vector is
//! block-diagonal with one block per cell, each of size at most J. Every
//! matrix operation downstream (GLS, REML, prediction) works cell by cell
//! through [`CellSolve`]; no dense covariance is ever assembled outside of
//! tests, and Cholesky is the only factorization used.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::EnsembleDataset;
use crate::error::{Error, Result};
use crate::grouping::GroupingScheme;

/// All second-moment parameters, bound to a dataset's team order and a
/// grouping of its factors. Factors in the same group share one copy of
/// every parameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterSet {
    group_labels: Vec<String>,
    /// Group index per dataset factor.
    assignment: Vec<usize>,
    /// Replicate-deviation variance per group.
    tau2: Vec<f64>,
    /// Team variances per group, indexed by dataset team order.
    sigma2: Vec<Vec<f64>>,
    /// Team correlations per group, packed strict upper triangle (j < j'),
    /// row-major; empty means all zero.
    rho: Vec<Vec<f64>>,
    /// Penalty scale b per group, when a penalized fit produced them.
    penalty_scales: Option<Vec<f64>>,
    /// Penalty shape a, when penalized.
    penalty_shape: Option<f64>,
}

pub fn rho_len(teams: usize) -> usize {
    teams * (teams - 1) / 2
}

/// Index into the packed strict upper triangle for pair (j, j'), j < j'.
pub fn rho_index(teams: usize, j: usize, jp: usize) -> usize {
    debug_assert!(j < jp && jp < teams);
    j * teams - j * (j + 1) / 2 + (jp - j - 1)
}

impl ParameterSet {
    /// Binds per-group parameters to a dataset through a grouping scheme.
    pub fn bind(
        dataset: &EnsembleDataset,
        grouping: &GroupingScheme,
        tau2: Vec<f64>,
        sigma2: Vec<Vec<f64>>,
        rho: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let assignment = grouping.assignments(dataset)?;
        let labels = grouping.groups.iter().map(|g| g.label.clone()).collect();
        Self::from_parts(dataset.team_count(), labels, assignment, tau2, sigma2, rho)
    }

    /// One parameter group per factor, in dataset factor order.
    pub fn per_factor(
        dataset: &EnsembleDataset,
        tau2: Vec<f64>,
        sigma2: Vec<Vec<f64>>,
        rho: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let labels = dataset.factors().iter().map(|k| k.to_string()).collect();
        let assignment = (0..dataset.factor_count()).collect();
        Self::from_parts(dataset.team_count(), labels, assignment, tau2, sigma2, rho)
    }

    fn from_parts(
        teams: usize,
        group_labels: Vec<String>,
        assignment: Vec<usize>,
        tau2: Vec<f64>,
        sigma2: Vec<Vec<f64>>,
        mut rho: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let n_groups = group_labels.len();
        if tau2.len() != n_groups || sigma2.len() != n_groups {
            return Err(Error::InvalidParameter(format!(
                "expected {n_groups} groups of parameters, got tau2: {}, sigma2: {}",
                tau2.len(),
                sigma2.len()
            )));
        }
        if rho.is_empty() {
            rho = vec![Vec::new(); n_groups];
        }
        if rho.len() != n_groups {
            return Err(Error::InvalidParameter(format!(
                "expected {n_groups} groups of correlations, got {}",
                rho.len()
            )));
        }
        for (g, t2) in tau2.iter().enumerate() {
            if !(*t2 >= 0.0) || !t2.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "tau2 must be finite and >= 0 in group {}, got {t2}",
                    group_labels[g]
                )));
            }
        }
        for (g, s2) in sigma2.iter().enumerate() {
            if s2.len() != teams {
                return Err(Error::InvalidParameter(format!(
                    "group {} has {} team variances, dataset has {teams} teams",
                    group_labels[g],
                    s2.len()
                )));
            }
            for v in s2 {
                if !(*v > 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "sigma2 must be finite and > 0 in group {}, got {v}",
                        group_labels[g]
                    )));
                }
            }
        }
        for (g, r) in rho.iter().enumerate() {
            if !r.is_empty() && r.len() != rho_len(teams) {
                return Err(Error::InvalidParameter(format!(
                    "group {} has {} correlations, expected {} for {teams} teams",
                    group_labels[g],
                    r.len(),
                    rho_len(teams)
                )));
            }
            for v in r {
                if !(v.abs() < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "correlations must lie in (-1, 1), got {v} in group {}",
                        group_labels[g]
                    )));
                }
            }
        }
        Ok(ParameterSet {
            group_labels,
            assignment,
            tau2,
            sigma2,
            rho,
            penalty_scales: None,
            penalty_shape: None,
        })
    }

    pub fn group_count(&self) -> usize {
        self.group_labels.len()
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn group_of(&self, factor: usize) -> usize {
        self.assignment[factor]
    }

    pub fn factor_assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn factors_in_group(&self, group: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(f, &g)| (g == group).then_some(f))
            .collect()
    }

    pub fn tau2(&self, factor: usize) -> f64 {
        self.tau2[self.assignment[factor]]
    }

    pub fn tau2_of_group(&self, group: usize) -> f64 {
        self.tau2[group]
    }

    pub fn sigma2(&self, factor: usize) -> &[f64] {
        &self.sigma2[self.assignment[factor]]
    }

    pub fn sigma2_of_group(&self, group: usize) -> &[f64] {
        &self.sigma2[group]
    }

    /// Correlation between teams j and j' for the factor's group (0 when no
    /// correlations are set).
    pub fn rho(&self, factor: usize, j: usize, jp: usize) -> f64 {
        let g = self.assignment[factor];
        if self.rho[g].is_empty() || j == jp {
            if j == jp {
                return 1.0;
            }
            return 0.0;
        }
        let teams = self.sigma2[g].len();
        let (a, b) = if j < jp { (j, jp) } else { (jp, j) };
        self.rho[g][rho_index(teams, a, b)]
    }

    pub fn rho_of_group(&self, group: usize) -> &[f64] {
        &self.rho[group]
    }

    pub fn has_correlations(&self) -> bool {
        self.rho.iter().any(|r| r.iter().any(|&v| v != 0.0))
    }

    pub fn set_group_values(&mut self, group: usize, tau2: f64, sigma2: Vec<f64>, rho: Vec<f64>) {
        self.tau2[group] = tau2;
        self.sigma2[group] = sigma2;
        self.rho[group] = rho;
    }

    pub fn set_penalty(&mut self, shape: f64, scales: Vec<f64>) {
        self.penalty_shape = Some(shape);
        self.penalty_scales = Some(scales);
    }

    pub fn penalty_shape(&self) -> Option<f64> {
        self.penalty_shape
    }

    pub fn penalty_scales(&self) -> Option<&[f64]> {
        self.penalty_scales.as_deref()
    }
}

/// One (factor, replicate) cell with its present-team mask and the offset of
/// its first row in the canonical observation vector.
#[derive(Debug, Clone)]
pub struct CellRef {
    pub factor: usize,
    pub replicate: usize,
    pub present: Vec<usize>,
    pub offset: usize,
}

/// Sparse indicator structure of the model: each observation row maps to one
/// factor mean (the X column) and one cell deviation (the Z column). Row
/// order is (factor, replicate, team), teams fastest.
#[derive(Debug, Clone)]
pub struct ModelStructure {
    cells: Vec<CellRef>,
    /// Range of cell indices per factor.
    factor_cells: Vec<std::ops::Range<usize>>,
    n_obs: usize,
    n_factors: usize,
}

impl ModelStructure {
    pub fn build(dataset: &EnsembleDataset) -> Self {
        let mut cells = Vec::new();
        let mut factor_cells = Vec::with_capacity(dataset.factor_count());
        let mut offset = 0;
        for f in 0..dataset.factor_count() {
            let start = cells.len();
            for i in 0..dataset.replicate_count(f) {
                let present = dataset.present_teams(f, i);
                if present.is_empty() {
                    continue;
                }
                let len = present.len();
                cells.push(CellRef {
                    factor: f,
                    replicate: i,
                    present,
                    offset,
                });
                offset += len;
            }
            factor_cells.push(start..cells.len());
        }
        ModelStructure {
            cells,
            factor_cells,
            n_obs: offset,
            n_factors: dataset.factor_count(),
        }
    }

    pub fn cells(&self) -> &[CellRef] {
        &self.cells
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn observation_count(&self) -> usize {
        self.n_obs
    }

    pub fn factor_count(&self) -> usize {
        self.n_factors
    }

    pub fn cells_of_factor(&self, factor: usize) -> &[CellRef] {
        &self.cells[self.factor_cells[factor].clone()]
    }

    pub fn cell_index_range(&self, factor: usize) -> std::ops::Range<usize> {
        self.factor_cells[factor].clone()
    }

    /// Observation vector in canonical row order.
    pub fn observation_vector(&self, dataset: &EnsembleDataset) -> DVector<f64> {
        let mut y = DVector::zeros(self.n_obs);
        for cell in &self.cells {
            for (r, &j) in cell.present.iter().enumerate() {
                y[cell.offset + r] = dataset
                    .value(cell.factor, cell.replicate, j)
                    .expect("present mask out of sync with dataset");
            }
        }
        y
    }

    /// Dense X indicator (observations x factors); small instances only.
    pub fn dense_x(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_obs, self.n_factors);
        for cell in &self.cells {
            for r in 0..cell.present.len() {
                x[(cell.offset + r, cell.factor)] = 1.0;
            }
        }
        x
    }

    /// Dense Z indicator (observations x cells); small instances only.
    pub fn dense_z(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n_obs, self.cells.len());
        for (c, cell) in self.cells.iter().enumerate() {
            for r in 0..cell.present.len() {
                z[(cell.offset + r, c)] = 1.0;
            }
        }
        z
    }
}

/// Covariance of one cell's observation vector, restricted to the present
/// teams: tau^2 on every entry plus rho_{jj'} sigma_j sigma_j' off the
/// diagonal and sigma_j^2 on it. `sigma2` covers all teams; `rho_packed` is
/// the strict upper triangle over all teams, or empty for zero correlations.
pub fn cell_covariance_from(
    tau2: f64,
    sigma2: &[f64],
    rho_packed: &[f64],
    present: &[usize],
) -> DMatrix<f64> {
    let teams = sigma2.len();
    let n = present.len();
    let mut b = DMatrix::zeros(n, n);
    for (r, &j) in present.iter().enumerate() {
        b[(r, r)] = tau2 + sigma2[j];
        for (c, &jp) in present.iter().enumerate().skip(r + 1) {
            let rho = if rho_packed.is_empty() {
                0.0
            } else {
                rho_packed[rho_index(teams, j.min(jp), j.max(jp))]
            };
            let cov = tau2 + rho * (sigma2[j] * sigma2[jp]).sqrt();
            b[(r, c)] = cov;
            b[(c, r)] = cov;
        }
    }
    b
}

/// Cell covariance under a bound parameter set.
pub fn cell_covariance(params: &ParameterSet, factor: usize, present: &[usize]) -> DMatrix<f64> {
    let g = params.group_of(factor);
    cell_covariance_from(
        params.tau2_of_group(g),
        params.sigma2_of_group(g),
        params.rho_of_group(g),
        present,
    )
}

/// Cholesky factorization of a cell covariance with its log-determinant.
pub struct CellSolve {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl CellSolve {
    /// Factorizes B. Failure signals non-positive-definite parameters; the
    /// REML objective treats that as negative infinity.
    pub fn new(b: DMatrix<f64>, factor: usize) -> Result<Self> {
        let chol = Cholesky::new(b).ok_or(Error::NotPositiveDefinite { factor })?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(CellSolve { chol, logdet })
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve_vector(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// B^{-1} 1, the workhorse for GLS sums.
    pub fn solve_ones(&self) -> DVector<f64> {
        let n = self.chol.l_dirty().nrows();
        self.solve_vector(&DVector::from_element(n, 1.0))
    }
}

/// Convenience: factor the covariance of `cell` under `params`.
pub fn solve_block(params: &ParameterSet, cell: &CellRef) -> Result<CellSolve> {
    CellSolve::new(
        cell_covariance(params, cell.factor, &cell.present),
        cell.factor,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{EnsembleDataset, EnsembleRow, FactorKey};
    use approx::assert_abs_diff_eq;

    fn complete_dataset(factors: usize, replicates: usize, teams: usize) -> EnsembleDataset {
        let mut rows = Vec::new();
        for f in 0..factors {
            for i in 0..replicates {
                for j in 0..teams {
                    rows.push(EnsembleRow {
                        team: format!("t{j}"),
                        factor: FactorKey::single("factor", &format!("{f}")),
                        replicate: format!("{i}"),
                        value: (f * 100 + i * 10 + j) as f64 * 0.1,
                    });
                }
            }
        }
        EnsembleDataset::from_rows(rows, None).unwrap()
    }

    fn simple_params(ds: &EnsembleDataset, tau2: f64, sigma2: Vec<f64>) -> ParameterSet {
        let f = ds.factor_count();
        ParameterSet::per_factor(ds, vec![tau2; f], vec![sigma2; f], Vec::new()).unwrap()
    }

    #[test]
    fn structure_dimensions_complete() {
        let ds = complete_dataset(1, 2, 3);
        let s = ModelStructure::build(&ds);
        assert_eq!(s.observation_count(), 6);
        let x = s.dense_x();
        assert_eq!((x.nrows(), x.ncols()), (6, 1));
        assert!(x.iter().all(|&v| v == 1.0));
        let z = s.dense_z();
        assert_eq!((z.nrows(), z.ncols()), (6, 2));
        for row in 0..6 {
            let nnz: Vec<usize> = (0..2).filter(|&c| z[(row, c)] != 0.0).collect();
            assert_eq!(nnz.len(), 1);
            assert_eq!(nnz[0], row / 3);
        }
    }

    #[test]
    fn structure_drops_missing_rows() {
        let mut rows = Vec::new();
        for i in 0..2 {
            for j in 0..3 {
                if i == 1 && j == 2 {
                    continue;
                }
                rows.push(EnsembleRow {
                    team: format!("t{j}"),
                    factor: FactorKey::single("factor", "0"),
                    replicate: format!("{i}"),
                    value: 1.0,
                });
            }
        }
        let ds = EnsembleDataset::from_rows(rows, None).unwrap();
        let s = ModelStructure::build(&ds);
        assert_eq!(s.observation_count(), 5);
        assert_eq!(s.cells()[1].present, vec![0, 1]);
    }

    #[test]
    fn structure_mip_scale() {
        let ds = complete_dataset(108, 6, 9);
        let s = ModelStructure::build(&ds);
        assert_eq!(s.observation_count(), 5832);
        assert_eq!(s.cell_count(), 108 * 6);
    }

    #[test]
    fn cell_covariance_direct_entries() {
        let ds = complete_dataset(1, 1, 2);
        let p = simple_params(&ds, 1.0, vec![1.0, 1.0]);
        let b = cell_covariance(&p, 0, &[0, 1]);
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]));
    }

    #[test]
    fn cell_covariance_no_random_effect_is_diagonal() {
        let ds = complete_dataset(1, 1, 3);
        let p = simple_params(&ds, 0.0, vec![0.5, 1.5, 2.5]);
        let b = cell_covariance(&p, 0, &[0, 1, 2]);
        assert_eq!(
            b,
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 1.5, 2.5]))
        );
    }

    #[test]
    fn cell_covariance_with_correlation_matches_generative_draws() {
        // tau2 = 2, sigma2 = {1, 4}, rho = 0.5 -> [[3, 3], [3, 6]].
        let ds = complete_dataset(1, 1, 2);
        let p = ParameterSet::per_factor(&ds, vec![2.0], vec![vec![1.0, 4.0]], vec![vec![0.5]])
            .unwrap();
        let b = cell_covariance(&p, 0, &[0, 1]);
        assert_abs_diff_eq!(b[(0, 0)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[(0, 1)], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b[(1, 1)], 6.0, epsilon = 1e-12);

        // Sampling oracle: empirical covariance of draws from the generative
        // model (alpha + correlated eta) within 3 Monte Carlo standard errors.
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 1_000_000usize;
        let (tau, s1, s2, rho) = (2.0f64.sqrt(), 1.0f64, 2.0f64, 0.5f64);
        let mut sums = [0.0f64; 2];
        let mut prods = [0.0f64; 3];
        for _ in 0..n {
            let a: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let z1: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let z2: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let e1 = s1 * z1;
            let e2 = s2 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
            let y1 = tau * a + e1;
            let y2 = tau * a + e2;
            sums[0] += y1;
            sums[1] += y2;
            prods[0] += y1 * y1;
            prods[1] += y1 * y2;
            prods[2] += y2 * y2;
        }
        let nf = n as f64;
        let m1 = sums[0] / nf;
        let m2 = sums[1] / nf;
        let c11 = prods[0] / nf - m1 * m1;
        let c12 = prods[1] / nf - m1 * m2;
        let c22 = prods[2] / nf - m2 * m2;
        // MC standard error of a covariance estimate is about
        // sqrt((c_ii c_jj + c_ij^2) / n).
        let se = |cii: f64, cjj: f64, cij: f64| ((cii * cjj + cij * cij) / nf).sqrt();
        assert!((c11 - 3.0).abs() < 3.0 * se(3.0, 3.0, 3.0));
        assert!((c12 - 3.0).abs() < 3.0 * se(3.0, 6.0, 3.0));
        assert!((c22 - 6.0).abs() < 3.0 * se(6.0, 6.0, 6.0));
    }

    #[test]
    fn solve_identity() {
        let b = DMatrix::identity(4, 4);
        let solve = CellSolve::new(b, 0).unwrap();
        let v = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5]);
        assert_eq!(solve.solve_vector(&v), v);
        assert_abs_diff_eq!(solve.logdet(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn solve_scaled_identity_logdet() {
        let b = DMatrix::from_diagonal(&DVector::from_element(3, 2.0));
        let solve = CellSolve::new(b, 0).unwrap();
        let ones = DVector::from_element(3, 1.0);
        let x = solve.solve_vector(&ones);
        for v in x.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(solve.logdet(), 3.0 * 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn solve_random_spd_residual() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = 5;
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
            let rhs = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let solve = CellSolve::new(b.clone(), 0).unwrap();
            let x = solve.solve_vector(&rhs);
            let residual = (&b * &x - &rhs).norm();
            assert!(residual <= 1e-10 * rhs.norm().max(1.0));
        }
    }

    #[test]
    fn non_spd_is_error() {
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            CellSolve::new(b, 7),
            Err(Error::NotPositiveDefinite { factor: 7 })
        ));
    }

    /// The dense covariance assembled from X, Z, and the parameter maps must
    /// equal the direct sum of per-cell blocks, and a dense solve must match
    /// the concatenation of per-cell solves.
    #[test]
    fn block_diagonal_matches_dense() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let factors = rng.gen_range(1..=3);
            let replicates = rng.gen_range(1..=3);
            let teams = rng.gen_range(1..=4);
            let ds = complete_dataset(factors, replicates, teams);
            let tau2: Vec<f64> = (0..factors).map(|_| rng.gen_range(0.0..2.0)).collect();
            let sigma2: Vec<Vec<f64>> = (0..factors)
                .map(|_| (0..teams).map(|_| rng.gen_range(0.2..2.0)).collect())
                .collect();
            let rho: Vec<Vec<f64>> = (0..factors)
                .map(|_| {
                    if trial % 2 == 0 {
                        Vec::new()
                    } else {
                        (0..rho_len(teams)).map(|_| rng.gen_range(-0.3..0.3)).collect()
                    }
                })
                .collect();
            let p = ParameterSet::per_factor(&ds, tau2.clone(), sigma2.clone(), rho).unwrap();
            let s = ModelStructure::build(&ds);
            if s.observation_count() > 50 {
                continue;
            }

            // Dense Sigma_Y = Z Sigma_alpha Z' + Sigma_eta.
            let z = s.dense_z();
            let sigma_alpha = DMatrix::from_diagonal(&DVector::from_iterator(
                s.cell_count(),
                s.cells().iter().map(|c| tau2[c.factor]),
            ));
            let mut sigma_eta = DMatrix::zeros(s.observation_count(), s.observation_count());
            for cell in s.cells() {
                for (r, &j) in cell.present.iter().enumerate() {
                    for (c, &jp) in cell.present.iter().enumerate() {
                        let f = cell.factor;
                        sigma_eta[(cell.offset + r, cell.offset + c)] = if j == jp {
                            sigma2[f][j]
                        } else {
                            p.rho(f, j, jp) * (sigma2[f][j] * sigma2[f][jp]).sqrt()
                        };
                    }
                }
            }
            let dense = &z * sigma_alpha * z.transpose() + sigma_eta;

            // Direct sum of the per-cell blocks.
            for cell in s.cells() {
                let b = cell_covariance(&p, cell.factor, &cell.present);
                for r in 0..cell.present.len() {
                    for c in 0..cell.present.len() {
                        assert_abs_diff_eq!(
                            dense[(cell.offset + r, cell.offset + c)],
                            b[(r, c)],
                            epsilon = 1e-12
                        );
                    }
                }
            }
            // Off-block entries are zero.
            // Solve comparison on a random rhs.
            let rhs = DVector::from_fn(s.observation_count(), |_, _| rng.gen_range(-1.0..1.0));
            let dense_solution = Cholesky::new(dense).unwrap().solve(&rhs);
            for cell in s.cells() {
                let b = cell_covariance(&p, cell.factor, &cell.present);
                let solve = CellSolve::new(b, cell.factor).unwrap();
                let cell_rhs = rhs.rows(cell.offset, cell.present.len()).into_owned();
                let x = solve.solve_vector(&cell_rhs);
                for r in 0..cell.present.len() {
                    assert_abs_diff_eq!(dense_solution[cell.offset + r], x[r], epsilon = 1e-12);
                }
            }
        }
    }

    /// With zero correlations, the Cholesky inverse matches the
    /// Sherman-Morrison closed form for B = D + tau^2 1 1'.
    #[test]
    fn sherman_morrison_agreement() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.gen_range(1..=6);
            let tau2: f64 = rng.gen_range(0.0..3.0);
            let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..3.0)).collect();
            let mut b = DMatrix::from_element(n, n, tau2);
            for (i, &di) in d.iter().enumerate() {
                b[(i, i)] += di;
            }
            let solve = CellSolve::new(b, 0).unwrap();
            let rhs = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            let x = solve.solve_vector(&rhs);

            let dinv_rhs = DVector::from_fn(n, |i, _| rhs[i] / d[i]);
            let dinv_one = DVector::from_fn(n, |i, _| 1.0 / d[i]);
            let denom = 1.0 + tau2 * dinv_one.sum();
            let closed = &dinv_rhs - &dinv_one * (tau2 * dinv_rhs.sum() / denom);
            for i in 0..n {
                assert_abs_diff_eq!(x[i], closed[i], epsilon = 1e-12);
            }
        }
    }
}
