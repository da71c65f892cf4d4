//! Posterior team weights from verification data, with the consensus
//! weights as the prior.
//!
//! Three teams estimate a quantity over ten replicates; two independent
//! verification measurements exist. The posterior favors the team whose
//! outputs sit closest to the verification data, tempered by the prior.
//!
//! Run with: cargo run --example bma_weights

use supe_anova::bma::bma_weights;
use supe_anova::covariance::ParameterSet;
use supe_anova::data::{EnsembleDataset, EnsembleRow, FactorKey, VerificationSet};
use supe_anova::inference::consensus;

fn main() -> supe_anova::Result<()> {
    // Team "high" runs one unit above the others.
    let mut rows = Vec::new();
    for i in 0..10 {
        let base = (i as f64 * 0.7).sin();
        for (team, offset) in [("low", -0.1), ("mid", 0.0), ("high", 1.0)] {
            rows.push(EnsembleRow {
                team: team.to_string(),
                factor: FactorKey::single("site", "s1"),
                replicate: format!("{i:02}"),
                value: base + offset,
            });
        }
    }
    let dataset = EnsembleDataset::from_rows(rows, None)?;
    let params = ParameterSet::per_factor(
        &dataset,
        vec![0.5],
        vec![vec![0.3, 0.3, 0.3]],
        Vec::new(),
    )?;
    let result = consensus(&dataset, &params)?;

    // Verification near the "low"/"mid" level at two replicates.
    let verification = VerificationSet::resolve(
        &dataset,
        [
            (FactorKey::single("site", "s1"), "03".to_string(), 0.80, 0.25),
            (FactorKey::single("site", "s1"), "07".to_string(), -0.90, 0.25),
        ],
    )?;

    let out = bma_weights(&result, &dataset, &verification)?;
    println!("team  log-prior  log-likelihood  posterior weight");
    for (j, team) in out.teams.iter().enumerate() {
        println!(
            "{team:>5}  {:+9.3}  {:+13.3}  {:.4}",
            out.log_prior[j], out.log_likelihood[j], out.nu[j]
        );
    }
    println!();
    println!(
        "posterior mass on the closest teams: {:.4}",
        out.nu[out.teams.iter().position(|t| t == "low").unwrap()]
            + out.nu[out.teams.iter().position(|t| t == "mid").unwrap()]
    );
    Ok(())
}
