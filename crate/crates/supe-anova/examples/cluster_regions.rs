//! Group regions of similar ensemble variability within each season.
//!
//! Replicate counts per stratum are usually too small to estimate variances
//! stratum by stratum, so strata are clustered on the order of magnitude of
//! a robust variability summary and share parameters within clusters.
//!
//! Run with: cargo run --example cluster_regions

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use supe_anova::data::{EnsembleDataset, EnsembleRow, FactorKey};
use supe_anova::grouping::{build_grouping, robust_variability, ClusterSpec};

fn main() -> supe_anova::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Eight regions in three variability regimes, two seasons, five teams.
    let spreads = [0.02, 0.03, 0.4, 0.5, 0.45, 6.0, 8.0, 7.0];
    let mut rows = Vec::new();
    for season in ["DJF", "JJA"] {
        for (r, spread) in spreads.iter().enumerate() {
            for rep in 0..6 {
                for team in 0..5 {
                    rows.push(EnsembleRow {
                        team: format!("team{team}"),
                        factor: FactorKey::new([
                            ("season".to_string(), season.to_string()),
                            ("region".to_string(), format!("R{r:02}")),
                        ])?,
                        replicate: format!("{rep}"),
                        value: spread * rng.gen_range(-1.0..1.0),
                    });
                }
            }
        }
    }
    let dataset = EnsembleDataset::from_rows(rows, None)?;

    println!("robust variability per (season, region):");
    for (f, key) in dataset.factors().iter().enumerate() {
        println!("  {key}: {:.4}", robust_variability(&dataset, f)?);
    }

    let (scheme, warnings) = build_grouping(&dataset, &ClusterSpec::default(), None)?;
    for warning in &warnings {
        println!("warning: {}: {}", warning.factor, warning.message);
    }
    println!();
    println!("groups (rank 1 = most variable):");
    for group in &scheme.groups {
        let regions: Vec<&str> = group
            .members
            .iter()
            .filter_map(|k| k.level("region"))
            .collect();
        println!(
            "  {} (rank {}): {}",
            group.label,
            group.rank.unwrap_or(0),
            regions.join(", ")
        );
    }
    Ok(())
}
