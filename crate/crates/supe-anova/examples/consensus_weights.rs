//! Optimal weighting on a small ensemble with known variances.
//!
//! Five teams report a quantity twice. Two teams are precise, two are
//! middling, one is noisy; the consensus weights each output inversely
//! proportional to its variance instead of averaging.
//!
//! Run with: cargo run --example consensus_weights

use supe_anova::covariance::ParameterSet;
use supe_anova::data::{EnsembleDataset, EnsembleRow, FactorKey};
use supe_anova::inference::{consensus, intervals, unweighted_mean, IntervalLevel};

fn main() -> supe_anova::Result<()> {
    let teams = ["alpha", "bravo", "carol", "delta", "echo"];
    let outputs = [
        // replicate 1, replicate 2 per team
        [1.02, 1.31],
        [0.98, 1.25],
        [1.10, 1.40],
        [0.85, 1.10],
        [2.30, 0.20], // the noisy one
    ];
    let mut rows = Vec::new();
    for (team, values) in teams.iter().zip(&outputs) {
        for (i, value) in values.iter().enumerate() {
            rows.push(EnsembleRow {
                team: team.to_string(),
                factor: FactorKey::single("quantity", "q"),
                replicate: format!("{i}"),
                value: *value,
            });
        }
    }
    let dataset = EnsembleDataset::from_rows(rows, Some("PgC/year".into()))?;

    // Known second moments: replicate deviations with variance 0.04, team
    // variances from tight (0.01) to wild (1.0).
    let sigma2 = vec![0.01, 0.01, 0.04, 0.04, 1.0];
    let params = ParameterSet::per_factor(&dataset, vec![0.04], vec![sigma2], Vec::new())?;

    let result = consensus(&dataset, &params)?;
    let factor = &result.factors[0];
    println!("teams and climatological weights (share in the mean estimate):");
    for (team, weight) in dataset.teams().iter().zip(&factor.climatological_weights) {
        println!("  {team:>6}: {weight:.4}");
    }

    let naive = unweighted_mean(&dataset, &params)?;
    println!();
    println!(
        "consensus mean: {:+.4}  (sd {:.4})",
        factor.mu_hat,
        factor.mu_var.sqrt()
    );
    println!(
        "unweighted mean: {:+.4}  (sd {:.4})",
        naive.factor_means[0],
        naive.factor_variance[0].sqrt()
    );
    println!(
        "variance ratio unweighted/consensus: {:.2}",
        naive.factor_variance[0] / factor.mu_var
    );

    println!();
    println!("per-replicate consensus predictions with 95% intervals:");
    for cell in &result.cells {
        let (lo, hi) = intervals(cell.y_hat, cell.mspe.sqrt(), IntervalLevel::NinetyFive)?;
        println!(
            "  replicate {}: {:+.4}  [{lo:+.4}, {hi:+.4}]",
            dataset.replicate_labels(0)[cell.replicate],
            cell.y_hat
        );
    }
    Ok(())
}
