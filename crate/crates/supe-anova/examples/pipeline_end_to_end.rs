//! The whole pipeline through the library API, writing the same artifacts
//! the command-line tool produces: simulate, fit, predict, weights,
//! diagnose, aggregate.
//!
//! Run with: cargo run --example pipeline_end_to_end

use std::collections::BTreeMap;

use supe_anova::data::{GenericSchema, IngestSchema};
use supe_anova::pipeline::{run, CliOverrides, Command, RunConfig, SelectionSpec};
use supe_anova::sim::SimulationSpec;

fn main() -> supe_anova::Result<()> {
    let output = std::env::temp_dir().join("supe-anova-example");
    std::fs::create_dir_all(&output)?;

    let mut config = RunConfig::default();
    config.simulate.spec = Some(SimulationSpec::uniform(
        4,
        6,
        0.3,
        0.7,
        vec![0.5, 1.0, 2.0],
        2025,
    ));
    config.simulate.studies.coverage_levels = vec!["95".into()];
    config.simulate.studies.efficiency_draws = 2000;
    config.estimation.restarts = 3;
    config.aggregate.selections = vec![SelectionSpec {
        label: "all-cells".into(),
        components: BTreeMap::new(),
        replicates: Vec::new(),
        replicate_prefix: None,
    }];

    let overrides = CliOverrides {
        output: Some(output.clone()),
        ..CliOverrides::default()
    };

    println!("writing artifacts to {}", output.display());
    let simulated = run(Command::Simulate, config.clone(), &overrides)?;
    for artifact in &simulated.artifacts {
        println!("  simulate: {}", artifact.display());
    }

    config.input.path = Some(output.join("dataset.csv"));
    config.input.schema = IngestSchema::Generic(GenericSchema::default());
    for command in [
        Command::Fit,
        Command::Predict,
        Command::Weights,
        Command::Diagnose,
        Command::Aggregate,
    ] {
        let result = run(command, config.clone(), &overrides)?;
        for artifact in &result.artifacts {
            println!("  {command}: {}", artifact.display());
        }
    }

    let aggregates = std::fs::read_to_string(output.join("aggregates.csv"))?;
    println!();
    println!("aggregates.csv:");
    for line in aggregates.lines() {
        println!("  {line}");
    }
    Ok(())
}
