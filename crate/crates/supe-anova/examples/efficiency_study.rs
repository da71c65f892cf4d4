//! How much precision the unweighted ensemble average gives away.
//!
//! Fifteen teams at unit variance plus five at variance four: the optimal
//! weights put a quarter weight on each noisy team, and the unweighted
//! average pays about a 42% variance premium.
//!
//! Run with: cargo run --release --example efficiency_study

use supe_anova::sim::{efficiency_study, SimulationSpec};

fn main() -> supe_anova::Result<()> {
    let mut sigma2 = vec![1.0; 15];
    sigma2.extend(vec![4.0; 5]);
    let spec = SimulationSpec::uniform(1, 1, 0.0, 0.0, sigma2, 3);
    let report = efficiency_study(&spec, 50_000)?;
    println!(
        "fifteen/five split: analytic ratio {:.6}, simulated {:.4} over {} draws",
        report.analytic_ratio[0], report.empirical_ratio[0], report.draws
    );

    // One excellent team dominates: the average dilutes it badly.
    let spec = SimulationSpec::uniform(1, 1, 0.0, 0.0, vec![0.01, 1.0, 1.0, 1.0], 4);
    let report = efficiency_study(&spec, 50_000)?;
    println!(
        "one precise team among noisy ones: analytic ratio {:.2}, simulated {:.2}",
        report.analytic_ratio[0], report.empirical_ratio[0]
    );

    // Equal variances: the average is already optimal.
    let spec = SimulationSpec::uniform(1, 1, 0.0, 0.0, vec![1.0; 6], 5);
    let report = efficiency_study(&spec, 50_000)?;
    println!(
        "equal variances: analytic ratio {:.6} (the average is optimal)",
        report.analytic_ratio[0]
    );
    Ok(())
}
