//! Model-fit diagnostics: standardized errors, their quantile-quantile
//! pairs against the standard normal, and the comparison of consensus
//! predictions with unweighted means.
//!
//! Run with: cargo run --example diagnostics_qq

use supe_anova::diagnostics::{compare_unweighted, qq_export, standardized_errors};
use supe_anova::estimation::{fit, EstimationConfig};
use supe_anova::grouping::GroupingScheme;
use supe_anova::inference::{consensus, unweighted_mean};
use supe_anova::sim::{simulate, SimulationSpec};

fn main() -> supe_anova::Result<()> {
    let spec = SimulationSpec::uniform(2, 30, 0.5, 1.0, vec![0.4, 0.8, 1.2, 2.5], 19);
    let ensemble = simulate(&spec)?;
    let fitted = fit(
        &ensemble.dataset,
        &GroupingScheme::pooled(&ensemble.dataset),
        &EstimationConfig::default(),
    )?;
    let result = consensus(&ensemble.dataset, &fitted.params)?;

    let residuals = standardized_errors(&ensemble.dataset, &fitted.params, &result)?;
    println!("standardized-error summaries per parameter group:");
    for summary in &residuals.summaries {
        println!(
            "  {}: n={}, mean {:+.3}, variance {:.3}, skewness {:+.3}",
            summary.group, summary.count, summary.mean, summary.variance, summary.skewness
        );
    }

    let panels = qq_export(&residuals, &fitted.params);
    println!();
    println!("quantile-quantile pairs (every 30th point):");
    for panel in &panels {
        println!("  group {}:", panel.group);
        for (theoretical, sample) in panel.points.iter().step_by(30) {
            println!("    theoretical {theoretical:+.3}  sample {sample:+.3}");
        }
    }

    let naive = unweighted_mean(&ensemble.dataset, &fitted.params)?;
    let rows = compare_unweighted(&result, &naive)?;
    let moved = rows.iter().filter(|r| r.outside_95).count();
    let max_delta = rows
        .iter()
        .map(|r| r.delta.abs())
        .fold(0.0f64, f64::max);
    println!();
    println!(
        "consensus vs unweighted: {} of {} cells have the unweighted mean outside \
         the 95% band; largest |delta| = {max_delta:.3}",
        moved,
        rows.len()
    );
    Ok(())
}
