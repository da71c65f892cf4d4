//! End-to-end pipeline: configuration, artifact formats, and the command
//! drivers behind the command-line interface.
//!
//! Every command reads CSV/TOML inputs and writes flat CSV artifacts plus a
//! TOML manifest. Each artifact starts with a comment line carrying the tool
//! version and the configuration hash, so a run can be traced back to its
//! inputs; identical inputs produce byte-identical artifacts regardless of
//! the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bma::bma_weights;
use crate::data::{export, ingest, ingest_verification, EnsembleDataset, FactorKey, IngestSchema};
use crate::diagnostics::{
    aggregate, aggregate_unweighted, compare_unweighted, qq_export, standardized_errors,
    Selection,
};
use crate::error::{Error, Result};
use crate::estimation::{fit, EstimationConfig};
use crate::grouping::{build_grouping, ClusterSpec, FactorGroup, GroupingScheme};
use crate::inference::{consensus, intervals, unweighted_mean, IntervalLevel};
use crate::covariance::ParameterSet;
use crate::sim::{coverage_study, efficiency_study, simulate, CoverageMode, SimulationSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable providing the default output root.
pub const OUTPUT_ENV: &str = "SUPE_ANOVA_OUTPUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Cluster,
    Fit,
    Predict,
    Weights,
    Diagnose,
    Aggregate,
    Bma,
    Simulate,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Command::Cluster => "cluster",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Weights => "weights",
            Command::Diagnose => "diagnose",
            Command::Aggregate => "aggregate",
            Command::Bma => "bma",
            Command::Simulate => "simulate",
        };
        f.write_str(name)
    }
}

/// A named cell selection, resolved against a dataset at run time.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SelectionSpec {
    pub label: String,
    /// Factor component name -> allowed levels; empty selects all factors.
    pub components: BTreeMap<String, Vec<String>>,
    /// Exact replicate labels; empty selects all replicates.
    pub replicates: Vec<String>,
    /// Replicate label prefix (e.g. a year of "YYYY-MM" labels).
    pub replicate_prefix: Option<String>,
}

impl SelectionSpec {
    pub fn resolve(&self, dataset: &EnsembleDataset) -> Result<Selection> {
        let mut members = Vec::new();
        for (f, key) in dataset.factors().iter().enumerate() {
            let keep = self.components.iter().all(|(name, levels)| {
                key.level(name)
                    .map(|l| levels.iter().any(|want| want == l))
                    .unwrap_or(false)
            });
            if !keep {
                continue;
            }
            for (i, label) in dataset.replicate_labels(f).iter().enumerate() {
                if !self.replicates.is_empty() && !self.replicates.contains(label) {
                    continue;
                }
                if let Some(prefix) = &self.replicate_prefix {
                    if !label.starts_with(prefix.as_str()) {
                        continue;
                    }
                }
                members.push((f, i));
            }
        }
        Ok(Selection {
            label: self.label.clone(),
            members,
        })
    }
}

/// The 16 region codes aggregated as global land (numerals T01 through T11,
/// including the split regions).
pub const MIP_LAND_REGIONS: [&str; 16] = [
    "T01", "T02", "T03a", "T03b", "T04", "T05a", "T05b", "T06a", "T06b", "T07", "T08", "T09a",
    "T09b", "T10a", "T10b", "T11",
];

/// The 11 ocean region codes (T12 through T22).
pub const MIP_OCEAN_REGIONS: [&str; 11] = [
    "T12", "T13", "T14", "T15", "T16", "T17", "T18", "T19", "T20", "T21", "T22",
];

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct InputConfig {
    pub path: Option<PathBuf>,
    pub schema: IngestSchema,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PredictConfig {
    /// Fit artifact location; defaults to `<output>/fit.toml`.
    pub fit_artifact: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AggregateConfig {
    pub selections: Vec<SelectionSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct BmaConfig {
    pub verification: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct StudiesConfig {
    /// Interval levels to run oracle-mode coverage at: "one-sigma",
    /// "two-sigma", "95".
    pub coverage_levels: Vec<String>,
    /// Replication count for the efficiency comparison; 0 disables it.
    pub efficiency_draws: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SimulateConfig {
    pub spec: Option<SimulationSpec>,
    pub studies: StudiesConfig,
}

/// Full run configuration; every field has a default so a config file can
/// set only what it needs.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub input: InputConfig,
    pub cluster: ClusterSpec,
    pub estimation: EstimationConfig,
    /// Known team correlations for `rho_mode = "fixed_known"`: a CSV with
    /// columns (group, team_a, team_b, rho); unlisted pairs are zero.
    pub rho_file: Option<PathBuf>,
    pub predict: PredictConfig,
    pub aggregate: AggregateConfig,
    pub bma: BmaConfig,
    pub simulate: SimulateConfig,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub obs_type: Option<String>,
    /// "auto" or a grouping table path.
    pub grouping: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub output_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    version: String,
    command: String,
    config_hash: String,
    input: Option<String>,
    dataset: Option<crate::data::DatasetSummary>,
    artifacts: Vec<String>,
}

struct RunContext {
    config: RunConfig,
    output: PathBuf,
    config_hash: String,
    command: Command,
    grouping_source: Option<String>,
    artifacts: Vec<PathBuf>,
}

impl RunContext {
    fn artifact_header(&self) -> String {
        format!(
            "# supe-anova {TOOL_VERSION} command={} config={}\n",
            self.command, self.config_hash
        )
    }

    /// Opens a CSV artifact with the provenance comment line in place.
    fn csv_writer(&mut self, name: &str) -> Result<csv::Writer<fs::File>> {
        let path = self.output.join(name);
        let mut file = fs::File::create(&path)?;
        file.write_all(self.artifact_header().as_bytes())?;
        self.artifacts.push(path);
        Ok(csv::Writer::from_writer(file))
    }

    fn write_manifest(
        &mut self,
        input: Option<&Path>,
        summary: Option<crate::data::DatasetSummary>,
    ) -> Result<()> {
        let manifest = Manifest {
            version: TOOL_VERSION.to_string(),
            command: self.command.to_string(),
            config_hash: self.config_hash.clone(),
            // File name only: runs on the same inputs stay byte-identical
            // regardless of where the files live.
            input: input
                .and_then(|p| p.file_name())
                .map(|n| n.to_string_lossy().into_owned()),
            dataset: summary,
            artifacts: self
                .artifacts
                .iter()
                .map(|p| {
                    p.file_name()
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_default()
                })
                .collect(),
        };
        let path = self.output.join(format!("manifest-{}.toml", self.command));
        let mut text = self.artifact_header();
        text.push_str(&toml::to_string(&manifest)?);
        fs::write(&path, text)?;
        self.artifacts.push(path);
        Ok(())
    }
}

fn config_hash(command: Command, config: &RunConfig) -> Result<String> {
    // The worker count is an execution detail; results are identical across
    // thread counts, so it must not perturb the hash. Paths are reduced to
    // file names so that runs on the same inputs hash identically wherever
    // the files live.
    let file_name_only = |path: &mut Option<PathBuf>| {
        if let Some(p) = path {
            if let Some(name) = p.file_name() {
                *p = PathBuf::from(name);
            }
        }
    };
    let mut semantic = config.clone();
    semantic.threads = None;
    file_name_only(&mut semantic.input.path);
    file_name_only(&mut semantic.predict.fit_artifact);
    file_name_only(&mut semantic.bma.verification);
    file_name_only(&mut semantic.rho_file);
    let canonical = toml::to_string(&semantic)?;
    let mut hasher = Sha256::new();
    hasher.update(command.to_string().as_bytes());
    hasher.update([0]);
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Runs one command with the given configuration and overrides, returning
/// the artifact paths it wrote.
pub fn run(command: Command, mut config: RunConfig, overrides: &CliOverrides) -> Result<RunOutput> {
    if let Some(input) = &overrides.input {
        config.input.path = Some(input.clone());
    }
    if let Some(obs_type) = &overrides.obs_type {
        match &mut config.input.schema {
            IngestSchema::Mip(schema) => {
                schema.observation_type_filter = Some(obs_type.clone());
            }
            IngestSchema::Generic(_) => {
                return Err(Error::Config(
                    "--obs-type applies only to the mip input format".into(),
                ))
            }
        }
    }
    if let Some(seed) = overrides.seed {
        config.estimation.seed = seed;
        if let Some(spec) = &mut config.simulate.spec {
            spec.seed = seed;
        }
    }
    if let Some(threads) = overrides.threads {
        config.threads = Some(threads);
    }

    let output = overrides
        .output
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&output)?;

    let hash = config_hash(command, &config)?;
    let mut ctx = RunContext {
        config,
        output,
        config_hash: hash,
        command,
        grouping_source: overrides.grouping.clone(),
        artifacts: Vec::new(),
    };

    let body = |ctx: &mut RunContext| match command {
        Command::Cluster => run_cluster(ctx),
        Command::Fit => run_fit(ctx),
        Command::Predict => run_predict(ctx),
        Command::Weights => run_weights(ctx),
        Command::Diagnose => run_diagnose(ctx),
        Command::Aggregate => run_aggregate(ctx),
        Command::Bma => run_bma(ctx),
        Command::Simulate => run_simulate(ctx),
    };
    let outcome = match ctx.config.threads {
        Some(threads) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            pool.install(|| body(&mut ctx))
        }
        None => body(&mut ctx),
    };
    if let Err(error) = outcome {
        // Machine-readable failure record alongside whatever was written.
        let record = format!(
            "version = {:?}\ncommand = {:?}\nconfig_hash = {:?}\nerror = {:?}\n",
            TOOL_VERSION,
            ctx.command.to_string(),
            ctx.config_hash,
            error.to_string()
        );
        let _ = fs::write(ctx.output.join("error.toml"), record);
        return Err(error);
    }
    Ok(RunOutput {
        output_dir: ctx.output,
        artifacts: ctx.artifacts,
    })
}

fn load_dataset(ctx: &RunContext) -> Result<(EnsembleDataset, PathBuf)> {
    let path = ctx
        .config
        .input
        .path
        .clone()
        .ok_or_else(|| Error::Config("no input path (set --input or [input] path)".into()))?;
    let file = fs::File::open(&path)?;
    let dataset = ingest(file, &ctx.config.input.schema)?;
    Ok((dataset, path))
}

fn component_names(dataset: &EnsembleDataset) -> Vec<String> {
    dataset.factors()[0].component_names()
}

fn observation_type(ctx: &RunContext) -> String {
    match &ctx.config.input.schema {
        IngestSchema::Mip(schema) => schema.observation_type_filter.clone().unwrap_or_default(),
        IngestSchema::Generic(_) => String::new(),
    }
}

// ---------------------------------------------------------------- grouping

/// Writes a grouping table: one row per factor with its group and rank.
pub fn write_grouping_csv<W: std::io::Write>(
    scheme: &GroupingScheme,
    mut writer: csv::Writer<W>,
) -> Result<()> {
    let names: Vec<String> = scheme
        .groups
        .first()
        .and_then(|g| g.members.first())
        .map(|k| k.component_names())
        .unwrap_or_default();
    let mut header: Vec<String> = names.clone();
    header.push("group".into());
    header.push("rank".into());
    writer.write_record(&header)?;
    for group in &scheme.groups {
        for member in &group.members {
            let mut record: Vec<String> = names
                .iter()
                .map(|n| member.level(n).unwrap_or("").to_string())
                .collect();
            record.push(group.label.clone());
            record.push(group.rank.map(|r| r.to_string()).unwrap_or_default());
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads a grouping table written by [`write_grouping_csv`].
pub fn read_grouping_csv<R: std::io::Read>(reader: R) -> Result<GroupingScheme> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let group_col = headers
        .iter()
        .position(|h| h == "group")
        .ok_or_else(|| Error::SchemaMismatch("grouping table needs a `group` column".into()))?;
    let rank_col = headers.iter().position(|h| h == "rank");
    let component_cols: Vec<(String, usize)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| *i != group_col && Some(*i) != rank_col && !h.is_empty())
        .map(|(i, h)| (h.to_string(), i))
        .collect();

    let mut groups: BTreeMap<String, (Option<u32>, Vec<FactorKey>)> = BTreeMap::new();
    for record in csv_reader.records() {
        let record = record?;
        let components: Vec<(String, String)> = component_cols
            .iter()
            .map(|(name, col)| (name.clone(), record.get(*col).unwrap_or("").to_string()))
            .collect();
        let key = FactorKey::new(components)?;
        let label = record.get(group_col).unwrap_or("").to_string();
        let rank = rank_col
            .and_then(|c| record.get(c))
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<u32>()
                    .map_err(|e| Error::SchemaMismatch(format!("bad rank: {e}")))
            })
            .transpose()?;
        let entry = groups.entry(label).or_insert((rank, Vec::new()));
        entry.1.push(key);
    }
    Ok(GroupingScheme {
        groups: groups
            .into_iter()
            .map(|(label, (rank, members))| FactorGroup {
                label,
                members,
                rank,
            })
            .collect(),
        provenance: None,
    })
}

fn resolve_grouping(ctx: &RunContext, dataset: &EnsembleDataset) -> Result<GroupingScheme> {
    match ctx.grouping_source.as_deref() {
        Some("auto") | None => {
            let default_path = ctx.output.join("grouping.csv");
            if ctx.grouping_source.is_none() && default_path.exists() {
                return read_grouping_csv(fs::File::open(default_path)?);
            }
            // Fall back to clustering on this dataset; when the configured
            // cluster component is absent, each factor is its own group.
            if dataset.factors()[0].level(&ctx.config.cluster.over).is_some() {
                let (scheme, warnings) =
                    build_grouping(dataset, &ctx.config.cluster, Some(observation_type(ctx)))?;
                for warning in &warnings {
                    eprintln!("warning: {}: {}", warning.factor, warning.message);
                }
                Ok(scheme)
            } else {
                Ok(GroupingScheme::identity(dataset))
            }
        }
        Some(path) => read_grouping_csv(fs::File::open(path)?),
    }
}

fn run_cluster(ctx: &mut RunContext) -> Result<()> {
    let (dataset, input) = load_dataset(ctx)?;
    let (scheme, warnings) =
        build_grouping(&dataset, &ctx.config.cluster, Some(observation_type(ctx)))?;
    for warning in &warnings {
        eprintln!("warning: {}: {}", warning.factor, warning.message);
    }
    let writer = ctx.csv_writer("grouping.csv")?;
    write_grouping_csv(&scheme, writer)?;
    ctx.write_manifest(Some(&input), Some(dataset.summary()))
}

// --------------------------------------------------------------------- fit

#[derive(Debug, Serialize, Deserialize)]
struct GroupParamsArtifact {
    label: String,
    tau2: f64,
    sigma2: Vec<f64>,
    rho: Vec<f64>,
    penalty_scale: Option<f64>,
}

/// Serialized fit: everything needed to rebuild the parameter set against a
/// dataset with the same teams and factor grid.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitArtifact {
    pub version: String,
    pub config_hash: String,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub penalty_shape: Option<f64>,
    pub teams: Vec<String>,
    pub grouping: GroupingScheme,
    groups: Vec<GroupParamsArtifact>,
}

impl FitArtifact {
    pub fn from_fit(
        result: &crate::estimation::FitResult,
        grouping: &GroupingScheme,
        teams: &[String],
        config_hash: &str,
    ) -> Self {
        let params = &result.params;
        let groups = (0..params.group_count())
            .map(|g| GroupParamsArtifact {
                label: params.group_labels()[g].clone(),
                tau2: params.tau2_of_group(g),
                sigma2: params.sigma2_of_group(g).to_vec(),
                rho: params.rho_of_group(g).to_vec(),
                penalty_scale: params.penalty_scales().map(|s| s[g]),
            })
            .collect();
        FitArtifact {
            version: TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            objective: result.objective,
            converged: result.converged,
            iterations: result.iterations,
            penalty_shape: result.params.penalty_shape(),
            teams: teams.to_vec(),
            grouping: grouping.clone(),
            groups,
        }
    }

    /// Rebinds the stored parameters to a dataset, validating the team list
    /// and the factor grid.
    pub fn bind(&self, dataset: &EnsembleDataset) -> Result<ParameterSet> {
        if self.teams != dataset.teams() {
            return Err(Error::SchemaMismatch(format!(
                "fit artifact teams {:?} do not match dataset teams {:?}",
                self.teams,
                dataset.teams()
            )));
        }
        let order: BTreeMap<&str, usize> = self
            .grouping
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| (group.label.as_str(), g))
            .collect();
        let mut tau2 = vec![0.0; self.groups.len()];
        let mut sigma2 = vec![Vec::new(); self.groups.len()];
        let mut rho = vec![Vec::new(); self.groups.len()];
        let mut scales = vec![None; self.groups.len()];
        for group in &self.groups {
            let &g = order.get(group.label.as_str()).ok_or_else(|| {
                Error::SchemaMismatch(format!(
                    "fit artifact group `{}` missing from its grouping",
                    group.label
                ))
            })?;
            tau2[g] = group.tau2;
            sigma2[g] = group.sigma2.clone();
            rho[g] = group.rho.clone();
            scales[g] = group.penalty_scale;
        }
        let mut params = ParameterSet::bind(dataset, &self.grouping, tau2, sigma2, rho)?;
        if let (Some(shape), true) = (self.penalty_shape, scales.iter().all(|s| s.is_some())) {
            params.set_penalty(shape, scales.into_iter().map(|s| s.unwrap()).collect());
        }
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = fs::read_to_string(path)?;
        let body: String = text
            .lines()
            .filter(|line| !line.starts_with('#'))
            .collect::<Vec<_>>()
            .join("\n");
        Ok(toml::from_str(&body)?)
    }
}

/// Reads a known-correlation table: (group, team_a, team_b, rho) rows,
/// resolved against the grouping labels and the dataset team order.
fn read_rho_csv(
    path: &Path,
    dataset: &EnsembleDataset,
    grouping: &GroupingScheme,
) -> Result<Vec<Vec<f64>>> {
    use crate::covariance::{rho_index, rho_len};
    let teams = dataset.team_count();
    let group_index: BTreeMap<&str, usize> = grouping
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| (group.label.as_str(), g))
        .collect();
    let team_index: BTreeMap<&str, usize> = dataset
        .teams()
        .iter()
        .enumerate()
        .map(|(j, t)| (t.as_str(), j))
        .collect();
    let mut rho = vec![vec![0.0; rho_len(teams)]; grouping.groups.len()];
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("rho table needs a `{name}` column")))
    };
    let (group_col, a_col, b_col, rho_col) =
        (col("group")?, col("team_a")?, col("team_b")?, col("rho")?);
    for record in reader.records() {
        let record = record?;
        let get = |c: usize| record.get(c).unwrap_or("");
        let &g = group_index.get(get(group_col)).ok_or_else(|| {
            Error::SchemaMismatch(format!("unknown group `{}` in rho table", get(group_col)))
        })?;
        let &a = team_index.get(get(a_col)).ok_or_else(|| {
            Error::SchemaMismatch(format!("unknown team `{}` in rho table", get(a_col)))
        })?;
        let &b = team_index.get(get(b_col)).ok_or_else(|| {
            Error::SchemaMismatch(format!("unknown team `{}` in rho table", get(b_col)))
        })?;
        if a == b {
            return Err(Error::SchemaMismatch(
                "rho table must list distinct team pairs".into(),
            ));
        }
        let value: f64 = get(rho_col)
            .parse()
            .map_err(|e| Error::SchemaMismatch(format!("bad rho value: {e}")))?;
        rho[g][rho_index(teams, a.min(b), a.max(b))] = value;
    }
    Ok(rho)
}

fn run_fit(ctx: &mut RunContext) -> Result<()> {
    use crate::estimation::{fit_from, RhoMode};
    let (dataset, input) = load_dataset(ctx)?;
    let grouping = resolve_grouping(ctx, &dataset)?;
    let result = match (ctx.config.estimation.rho_mode, &ctx.config.rho_file) {
        (RhoMode::FixedKnown, Some(path)) => {
            let rho = read_rho_csv(path, &dataset, &grouping)?;
            fit_from(&dataset, &grouping, &ctx.config.estimation, Some(&rho))?
        }
        (RhoMode::FixedKnown, None) => {
            return Err(Error::Config(
                "rho_mode = fixed_known requires rho_file in the config".into(),
            ))
        }
        _ => fit(&dataset, &grouping, &ctx.config.estimation)?,
    };
    if !result.converged {
        eprintln!("warning: maximization did not converge; best point kept");
    }
    let artifact = FitArtifact::from_fit(&result, &grouping, dataset.teams(), &ctx.config_hash);
    let path = ctx.output.join("fit.toml");
    let mut text = ctx.artifact_header();
    text.push_str(&toml::to_string(&artifact)?);
    fs::write(&path, text)?;
    ctx.artifacts.push(path);
    ctx.write_manifest(Some(&input), Some(dataset.summary()))
}

// ----------------------------------------------------------------- predict

fn load_fit(ctx: &RunContext, dataset: &EnsembleDataset) -> Result<(ParameterSet, FitArtifact)> {
    let path = ctx
        .config
        .predict
        .fit_artifact
        .clone()
        .unwrap_or_else(|| ctx.output.join("fit.toml"));
    let artifact = FitArtifact::load(&path)?;
    let params = artifact.bind(dataset)?;
    Ok((params, artifact))
}

fn factor_record(key: &FactorKey, names: &[String]) -> Vec<String> {
    names
        .iter()
        .map(|n| key.level(n).unwrap_or("").to_string())
        .collect()
}

fn run_predict(ctx: &mut RunContext) -> Result<()> {
    let (dataset, input) = load_dataset(ctx)?;
    let (params, _) = load_fit(ctx, &dataset)?;
    let result = consensus(&dataset, &params)?;
    let names = component_names(&dataset);

    let mut means = ctx.csv_writer("means.csv")?;
    let mut header: Vec<String> = names.clone();
    header.extend(
        ["mu_hat", "s2", "sd", "lo95", "hi95"]
            .iter()
            .map(|s| s.to_string()),
    );
    means.write_record(&header)?;
    for (f, key) in dataset.factors().iter().enumerate() {
        let factor = &result.factors[f];
        let sd = factor.mu_var.sqrt();
        let (lo, hi) = intervals(factor.mu_hat, sd, IntervalLevel::NinetyFive)?;
        let mut record = factor_record(key, &names);
        record.extend([
            factor.mu_hat.to_string(),
            factor.mu_var.to_string(),
            sd.to_string(),
            lo.to_string(),
            hi.to_string(),
        ]);
        means.write_record(&record)?;
    }
    means.flush()?;

    let mut predictions = ctx.csv_writer("predictions.csv")?;
    let mut header: Vec<String> = names.clone();
    header.extend(
        [
            "replicate",
            "y_hat",
            "mspe",
            "sd",
            "lo95",
            "hi95",
            "mspe_mu_estimated",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    predictions.write_record(&header)?;
    for cell in &result.cells {
        let key = &dataset.factors()[cell.factor];
        let sd = cell.mspe.max(0.0).sqrt();
        let (lo, hi) = intervals(cell.y_hat, sd, IntervalLevel::NinetyFive)?;
        let mut record = factor_record(key, &names);
        record.extend([
            dataset.replicate_labels(cell.factor)[cell.replicate].clone(),
            cell.y_hat.to_string(),
            cell.mspe.to_string(),
            sd.to_string(),
            lo.to_string(),
            hi.to_string(),
            cell.mspe_mu_estimated.to_string(),
        ]);
        predictions.write_record(&record)?;
    }
    predictions.flush()?;
    ctx.write_manifest(Some(&input), Some(dataset.summary()))
}

fn run_weights(ctx: &mut RunContext) -> Result<()> {
    let (dataset, input) = load_dataset(ctx)?;
    let (params, artifact) = load_fit(ctx, &dataset)?;
    let result = consensus(&dataset, &params)?;
    let names = component_names(&dataset);

    let group_rank: BTreeMap<&str, Option<u32>> = artifact
        .grouping
        .groups
        .iter()
        .map(|g| (g.label.as_str(), g.rank))
        .collect();

    let mut writer = ctx.csv_writer("weights.csv")?;
    let mut header: Vec<String> = names.clone();
    header.extend(
        ["group", "rank", "team", "w_hat", "lambda", "w_cell", "lambda0"]
            .iter()
            .map(|s| s.to_string()),
    );
    writer.write_record(&header)?;
    for (f, key) in dataset.factors().iter().enumerate() {
        let group = params.group_of(f);
        let label = &params.group_labels()[group];
        let rank = group_rank
            .get(label.as_str())
            .copied()
            .flatten()
            .map(|r| r.to_string())
            .unwrap_or_default();
        let cells = result.cells_of_factor(f);
        let first = &cells[0];
        for (j, team) in dataset.teams().iter().enumerate() {
            let lambda = first
                .present
                .iter()
                .position(|&p| p == j)
                .map(|r| first.lambdas[r]);
            let w_cell = first
                .present
                .iter()
                .position(|&p| p == j)
                .map(|r| first.weights[r]);
            let mut record = factor_record(key, &names);
            record.extend([
                label.clone(),
                rank.clone(),
                team.clone(),
                result.factors[f].climatological_weights[j].to_string(),
                lambda.map(|l| l.to_string()).unwrap_or_default(),
                w_cell.map(|w| w.to_string()).unwrap_or_default(),
                first.lambda0.to_string(),
            ]);
            writer.write_record(&record)?;
        }
    }
    writer.flush()?;
    ctx.write_manifest(Some(&input), Some(dataset.summary()))
}

fn run_diagnose(ctx: &mut RunContext) -> Result<()> {
    let (dataset, input) = load_dataset(ctx)?;
    let (params, _) = load_fit(ctx, &dataset)?;
    let result = consensus(&dataset, &params)?;
    let names = component_names(&dataset);
    let residuals = standardized_errors(&dataset, &params, &result)?;

    let mut writer = ctx.csv_writer("residuals.csv")?;
    let mut header: Vec<String> = names.clone();
    header.extend(["replicate", "team", "eta"].iter().map(|s| s.to_string()));
    writer.write_record(&header)?;
    for row in &residuals.rows {
        let key = &dataset.factors()[row.factor];
        let mut record = factor_record(key, &names);
        record.extend([
            dataset.replicate_labels(row.factor)[row.replicate].clone(),
            dataset.teams()[row.team].clone(),
            row.eta.to_string(),
        ]);
        writer.write_record(&record)?;
    }
    writer.flush()?;

    let mut summary = ctx.csv_writer("residual_summary.csv")?;
    summary.write_record(["group", "count", "mean", "variance", "skewness"])?;
    for s in &residuals.summaries {
        summary.write_record([
            s.group.clone(),
            s.count.to_string(),
            s.mean.to_string(),
            s.variance.to_string(),
            s.skewness.to_string(),
        ])?;
    }
    summary.flush()?;

    let panels = qq_export(&residuals, &params);
    let mut qq = ctx.csv_writer("qq.csv")?;
    qq.write_record(["group", "index", "theoretical", "sample"])?;
    for panel in &panels {
        for (idx, (theoretical, sample)) in panel.points.iter().enumerate() {
            qq.write_record([
                panel.group.clone(),
                idx.to_string(),
                theoretical.to_string(),
                sample.to_string(),
            ])?;
        }
    }
    qq.flush()?;

    if dataset.is_complete() {
        let unweighted = unweighted_mean(&dataset, &params)?;
        let rows = compare_unweighted(&result, &unweighted)?;
        let mut writer = ctx.csv_writer("comparison.csv")?;
        let mut header: Vec<String> = names.clone();
        header.extend(
            [
                "replicate",
                "consensus",
                "unweighted",
                "delta",
                "shrinkage",
                "outside_95",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        writer.write_record(&header)?;
        for row in &rows {
            let key = &dataset.factors()[row.factor];
            let mut record = factor_record(key, &names);
            record.extend([
                dataset.replicate_labels(row.factor)[row.replicate].clone(),
                row.consensus.to_string(),
                row.unweighted.to_string(),
                row.delta.to_string(),
                row.shrinkage.to_string(),
                row.outside_95.to_string(),
            ]);
            writer.write_record(&record)?;
        }
        writer.flush()?;
    }
    ctx.write_manifest(Some(&input), Some(dataset.summary()))
}

/// Built-in aggregate selections for region-resolved datasets: per-year
/// global land and global ocean totals over the standard region sets.
pub fn default_selections(dataset: &EnsembleDataset) -> Vec<SelectionSpec> {
    let names = component_names(dataset);
    if !names.iter().any(|n| n == "region") {
        return Vec::new();
    }
    // Years from "YYYY-MM" replicate labels.
    let mut years: Vec<String> = Vec::new();
    for f in 0..dataset.factor_count() {
        for label in dataset.replicate_labels(f) {
            if label.len() == 7 && label.as_bytes()[4] == b'-' {
                let year = label[..4].to_string();
                if !years.contains(&year) {
                    years.push(year);
                }
            }
        }
    }
    years.sort();
    let present: Vec<&str> = dataset
        .factors()
        .iter()
        .filter_map(|k| k.level("region"))
        .collect();
    let land: Vec<String> = MIP_LAND_REGIONS
        .iter()
        .filter(|r| present.contains(r))
        .map(|r| r.to_string())
        .collect();
    let ocean: Vec<String> = MIP_OCEAN_REGIONS
        .iter()
        .filter(|r| present.contains(r))
        .map(|r| r.to_string())
        .collect();
    let mut specs = Vec::new();
    let year_slots: Vec<Option<String>> = if years.is_empty() {
        vec![None]
    } else {
        years.into_iter().map(Some).collect()
    };
    for year in &year_slots {
        let suffix = year.as_deref().map(|y| format!("-{y}")).unwrap_or_default();
        if !land.is_empty() {
            specs.push(SelectionSpec {
                label: format!("global-land{suffix}"),
                components: BTreeMap::from([("region".to_string(), land.clone())]),
                replicates: Vec::new(),
                replicate_prefix: year.clone(),
            });
        }
        if !ocean.is_empty() {
            specs.push(SelectionSpec {
                label: format!("global-ocean{suffix}"),
                components: BTreeMap::from([("region".to_string(), ocean.clone())]),
                replicates: Vec::new(),
                replicate_prefix: year.clone(),
            });
        }
    }
    specs
}

fn run_aggregate(ctx: &mut RunContext) -> Result<()> {
    let (dataset, input) = load_dataset(ctx)?;
    let (params, _) = load_fit(ctx, &dataset)?;
    let result = consensus(&dataset, &params)?;
    let unweighted = if dataset.is_complete() {
        Some(unweighted_mean(&dataset, &params)?)
    } else {
        None
    };
    let specs = if ctx.config.aggregate.selections.is_empty() {
        let defaults = default_selections(&dataset);
        if defaults.is_empty() {
            return Err(Error::Config(
                "no aggregate selections configured and no region component to default on".into(),
            ));
        }
        defaults
    } else {
        ctx.config.aggregate.selections.clone()
    };

    let obs_type = observation_type(ctx);
    let mut writer = ctx.csv_writer("aggregates.csv")?;
    writer.write_record(["label", "year", "obs_type", "method", "value", "sd"])?;
    for spec in &specs {
        let selection = spec.resolve(&dataset)?;
        let year = spec.replicate_prefix.clone().unwrap_or_default();
        let agg = aggregate(&result, &selection)?;
        writer.write_record([
            agg.label.clone(),
            year.clone(),
            obs_type.clone(),
            "consensus".to_string(),
            agg.value.to_string(),
            agg.variance.max(0.0).sqrt().to_string(),
        ])?;
        if let Some(unweighted) = &unweighted {
            let agg = aggregate_unweighted(unweighted, &selection)?;
            writer.write_record([
                agg.label,
                year,
                obs_type.clone(),
                "unweighted".to_string(),
                agg.value.to_string(),
                agg.variance.max(0.0).sqrt().to_string(),
            ])?;
        }
    }
    writer.flush()?;
    ctx.write_manifest(Some(&input), Some(dataset.summary()))
}

fn run_bma(ctx: &mut RunContext) -> Result<()> {
    let (dataset, input) = load_dataset(ctx)?;
    let (params, _) = load_fit(ctx, &dataset)?;
    let verification_path = ctx
        .config
        .bma
        .verification
        .clone()
        .ok_or_else(|| Error::Config("bma needs [bma] verification = <csv path>".into()))?;
    let verification = ingest_verification(fs::File::open(&verification_path)?, &dataset)?;
    let result = consensus(&dataset, &params)?;
    let out = bma_weights(&result, &dataset, &verification)?;
    for &(k, j) in &out.skipped {
        eprintln!(
            "warning: verification row {k} skipped for team {} (absent at cell)",
            dataset.teams()[j]
        );
    }
    let mut writer = ctx.csv_writer("bma.csv")?;
    writer.write_record(["team", "log_prior", "log_likelihood", "nu"])?;
    for (j, team) in out.teams.iter().enumerate() {
        writer.write_record([
            team.clone(),
            out.log_prior[j].to_string(),
            out.log_likelihood[j].to_string(),
            out.nu[j].to_string(),
        ])?;
    }
    writer.flush()?;
    ctx.write_manifest(Some(&input), Some(dataset.summary()))
}

fn run_simulate(ctx: &mut RunContext) -> Result<()> {
    let spec = ctx
        .config
        .simulate
        .spec
        .clone()
        .ok_or_else(|| Error::Config("simulate needs [simulate.spec] in the config".into()))?;
    let ensemble = simulate(&spec)?;

    let path = ctx.output.join("dataset.csv");
    let mut file = fs::File::create(&path)?;
    file.write_all(ctx.artifact_header().as_bytes())?;
    export(&ensemble.dataset, file)?;
    ctx.artifacts.push(path);

    let mut truth = ctx.csv_writer("truth.csv")?;
    truth.write_record(["factor", "replicate", "latent", "alpha"])?;
    for f in 0..ensemble.dataset.factor_count() {
        let key = &ensemble.dataset.factors()[f];
        for (i, label) in ensemble.dataset.replicate_labels(f).iter().enumerate() {
            truth.write_record([
                key.level("factor").unwrap_or("").to_string(),
                label.clone(),
                ensemble.latent[f][i].to_string(),
                ensemble.alpha[f][i].to_string(),
            ])?;
        }
    }
    truth.flush()?;

    let studies = ctx.config.simulate.studies.clone();
    if !studies.coverage_levels.is_empty() {
        let mut writer = ctx.csv_writer("coverage.csv")?;
        writer.write_record(["level", "mode", "covered", "total", "coverage", "mc_se"])?;
        for level_name in &studies.coverage_levels {
            let level = match level_name.as_str() {
                "one-sigma" => IntervalLevel::OneSigma,
                "two-sigma" => IntervalLevel::TwoSigma,
                "95" => IntervalLevel::NinetyFive,
                other => {
                    return Err(Error::Config(format!(
                        "unknown coverage level `{other}` (use one-sigma, two-sigma, 95)"
                    )))
                }
            };
            let report = coverage_study(&spec, level, CoverageMode::Oracle)?;
            writer.write_record([
                level_name.clone(),
                report.mode.clone(),
                report.covered.to_string(),
                report.total.to_string(),
                report.coverage.to_string(),
                report.monte_carlo_se.to_string(),
            ])?;
        }
        writer.flush()?;
    }
    if studies.efficiency_draws > 0 {
        let report = efficiency_study(&spec, studies.efficiency_draws)?;
        let mut writer = ctx.csv_writer("efficiency.csv")?;
        writer.write_record(["factor", "analytic_ratio", "empirical_ratio", "draws"])?;
        for f in 0..report.analytic_ratio.len() {
            writer.write_record([
                f.to_string(),
                report.analytic_ratio[f].to_string(),
                report.empirical_ratio[f].to_string(),
                report.draws.to_string(),
            ])?;
        }
        writer.flush()?;
    }
    ctx.write_manifest(None, Some(ensemble.dataset.summary()))
}
