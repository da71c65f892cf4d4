//! Ensemble data structures, indexing, and ingestion.
//!
//! The canonical in-memory form is [`EnsembleDataset`]: a list of factor
//! combinations, each with a set of replicates, and for every (factor,
//! replicate) cell the values reported by each team. Missing team entries are
//! explicit (`None`), never silently zero. The dataset is immutable after
//! construction and safe to share across threads.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One factor combination: an ordered set of named components, e.g.
/// `season=DJF, region=T05a`. Components are stored sorted by name so that
/// two keys compare equal iff all components match.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactorKey {
    components: Vec<(String, String)>,
}

impl FactorKey {
    pub fn new(components: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut components: Vec<(String, String)> = components.into_iter().collect();
        components.sort();
        for pair in components.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(Error::InvalidParameter(format!(
                    "duplicate component name `{}` in factor key",
                    pair[0].0
                )));
            }
        }
        Ok(FactorKey { components })
    }

    /// Single-component key, convenient for synthetic data.
    pub fn single(name: &str, level: &str) -> Self {
        FactorKey {
            components: vec![(name.to_string(), level.to_string())],
        }
    }

    pub fn components(&self) -> &[(String, String)] {
        &self.components
    }

    pub fn component_names(&self) -> Vec<String> {
        self.components.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn level(&self, name: &str) -> Option<&str> {
        self.components
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| l.as_str())
    }
}

impl fmt::Display for FactorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .components
            .iter()
            .map(|(n, l)| format!("{n}={l}"))
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Meteorological seasons, in the conventional order starting with
/// December-January-February.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Season {
    Djf,
    Mam,
    Jja,
    Son,
}

impl Season {
    pub fn label(self) -> &'static str {
        match self {
            Season::Djf => "DJF",
            Season::Mam => "MAM",
            Season::Jja => "JJA",
            Season::Son => "SON",
        }
    }

    /// 1-based season level: DJF=1, MAM=2, JJA=3, SON=4.
    pub fn level(self) -> u32 {
        match self {
            Season::Djf => 1,
            Season::Mam => 2,
            Season::Jja => 3,
            Season::Son => 4,
        }
    }

    pub const ALL: [Season; 4] = [Season::Djf, Season::Mam, Season::Jja, Season::Son];
}

/// Maps a calendar month (1..=12) to its meteorological season.
pub fn derive_season(month: u32) -> Result<Season> {
    match month {
        12 | 1 | 2 => Ok(Season::Djf),
        3 | 4 | 5 => Ok(Season::Mam),
        6 | 7 | 8 => Ok(Season::Jja),
        9 | 10 | 11 => Ok(Season::Son),
        other => Err(Error::MonthOutOfRange(other)),
    }
}

/// Season plus the year-block it belongs to. December is assigned to the DJF
/// block of the following year, so that a DJF block is contiguous in time.
/// Within a fixed study window the pooled replicate set per season is the
/// same under either December convention; the block label matters only when
/// stratifying by year.
pub fn derive_season_year(year: i32, month: u32) -> Result<(Season, i32)> {
    let season = derive_season(month)?;
    let block_year = if month == 12 { year + 1 } else { year };
    Ok((season, block_year))
}

/// External verification data aligned to dataset cells.
#[derive(Debug, Clone)]
pub struct VerificationSet {
    pub observations: Vec<VerificationObs>,
}

#[derive(Debug, Clone)]
pub struct VerificationObs {
    pub factor: usize,
    pub replicate: usize,
    pub value: f64,
    pub variance: f64,
}

impl VerificationSet {
    /// Builds a verification set from (factor key, replicate label, z, var)
    /// records, resolving each entry against the dataset.
    pub fn resolve(
        dataset: &EnsembleDataset,
        records: impl IntoIterator<Item = (FactorKey, String, f64, f64)>,
    ) -> Result<Self> {
        let mut observations = Vec::new();
        for (key, replicate, value, variance) in records {
            let f = dataset
                .factor_index(&key)
                .ok_or_else(|| Error::UnknownFactor(key.to_string()))?;
            let i = dataset
                .replicate_index(f, &replicate)
                .ok_or_else(|| Error::UnknownReplicate {
                    factor: key.to_string(),
                    replicate: replicate.clone(),
                })?;
            if !(variance > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "verification variance must be > 0, got {variance}"
                )));
            }
            if !value.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "verification value must be finite, got {value}"
                )));
            }
            observations.push(VerificationObs {
                factor: f,
                replicate: i,
                value,
                variance,
            });
        }
        Ok(VerificationSet { observations })
    }
}

/// A single ingested record before canonicalization.
#[derive(Debug, Clone)]
pub struct EnsembleRow {
    pub team: String,
    pub factor: FactorKey,
    pub replicate: String,
    pub value: f64,
}

/// The canonical multi-model ensemble: values indexed by
/// (factor, replicate, team) with explicit missingness.
#[derive(Debug, Clone)]
pub struct EnsembleDataset {
    teams: Vec<String>,
    factors: Vec<FactorKey>,
    /// Replicate labels per factor, sorted; `replicates[f].len() == I(f)`.
    replicates: Vec<Vec<String>>,
    /// Per factor, row-major `[replicate][team]` values.
    values: Vec<Vec<Option<f64>>>,
    unit: Option<String>,
}

impl EnsembleDataset {
    /// Canonicalizes a stream of rows. Teams, factors, and replicates are
    /// sorted; duplicate (factor, replicate, team) rows and non-finite values
    /// are errors, as are rows whose factor keys carry different component
    /// names.
    pub fn from_rows(rows: Vec<EnsembleRow>, unit: Option<String>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset("no rows".into()));
        }
        let component_names = rows[0].factor.component_names();
        for (idx, row) in rows.iter().enumerate() {
            let got = row.factor.component_names();
            if got != component_names {
                return Err(Error::InconsistentComponents {
                    row: idx + 1,
                    expected: component_names,
                    got,
                });
            }
            if !row.value.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: idx + 1,
                    value: row.value,
                });
            }
        }

        let mut teams: Vec<String> = rows.iter().map(|r| r.team.clone()).collect();
        teams.sort();
        teams.dedup();

        let mut by_factor: BTreeMap<FactorKey, BTreeMap<String, Vec<(String, f64)>>> =
            BTreeMap::new();
        for row in &rows {
            by_factor
                .entry(row.factor.clone())
                .or_default()
                .entry(row.replicate.clone())
                .or_default()
                .push((row.team.clone(), row.value));
        }

        let team_index: BTreeMap<&str, usize> = teams
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();

        let mut factors = Vec::new();
        let mut replicates = Vec::new();
        let mut values = Vec::new();
        for (factor, reps) in by_factor {
            let mut rep_labels: Vec<String> = Vec::new();
            let mut factor_values: Vec<Option<f64>> = Vec::new();
            for (rep, team_vals) in reps {
                let mut cell = vec![None; teams.len()];
                for (team, value) in team_vals {
                    let j = team_index[team.as_str()];
                    if cell[j].is_some() {
                        return Err(Error::DuplicateCell {
                            factor: factor.to_string(),
                            replicate: rep.clone(),
                            team,
                        });
                    }
                    cell[j] = Some(value);
                }
                rep_labels.push(rep);
                factor_values.extend(cell);
            }
            factors.push(factor);
            replicates.push(rep_labels);
            values.push(factor_values);
        }

        Ok(EnsembleDataset {
            teams,
            factors,
            replicates,
            values,
            unit,
        })
    }

    pub fn teams(&self) -> &[String] {
        &self.teams
    }

    pub fn team_count(&self) -> usize {
        self.teams.len()
    }

    pub fn factors(&self) -> &[FactorKey] {
        &self.factors
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn unit(&self) -> Option<&str> {
        self.unit.as_deref()
    }

    pub fn factor_index(&self, key: &FactorKey) -> Option<usize> {
        self.factors.binary_search(key).ok()
    }

    /// Number of replicates I(f).
    pub fn replicate_count(&self, factor: usize) -> usize {
        self.replicates[factor].len()
    }

    pub fn replicate_labels(&self, factor: usize) -> &[String] {
        &self.replicates[factor]
    }

    pub fn replicate_index(&self, factor: usize, label: &str) -> Option<usize> {
        self.replicates[factor].iter().position(|l| l == label)
    }

    /// Values for cell (factor, replicate), one slot per team.
    pub fn cell(&self, factor: usize, replicate: usize) -> &[Option<f64>] {
        let j = self.teams.len();
        let start = replicate * j;
        &self.values[factor][start..start + j]
    }

    pub fn value(&self, factor: usize, replicate: usize, team: usize) -> Option<f64> {
        self.cell(factor, replicate)[team]
    }

    /// Team indices present in a cell.
    pub fn present_teams(&self, factor: usize, replicate: usize) -> Vec<usize> {
        self.cell(factor, replicate)
            .iter()
            .enumerate()
            .filter_map(|(j, v)| v.map(|_| j))
            .collect()
    }

    /// True when every cell carries a value for every team.
    pub fn is_complete(&self) -> bool {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .all(|v| v.is_some())
    }

    pub fn observation_count(&self) -> usize {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .filter(|v| v.is_some())
            .count()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            factor_count: self.factor_count(),
            team_count: self.team_count(),
            replicate_counts: (0..self.factor_count())
                .map(|f| self.replicate_count(f))
                .collect(),
            observation_count: self.observation_count(),
        }
    }

    /// Flattens back to rows in canonical (factor, replicate, team) order.
    pub fn export_rows(&self) -> Vec<EnsembleRow> {
        let mut rows = Vec::with_capacity(self.observation_count());
        for (f, factor) in self.factors.iter().enumerate() {
            for (i, rep) in self.replicates[f].iter().enumerate() {
                for (j, value) in self.cell(f, i).iter().enumerate() {
                    if let Some(v) = value {
                        rows.push(EnsembleRow {
                            team: self.teams[j].clone(),
                            factor: factor.clone(),
                            replicate: rep.clone(),
                            value: *v,
                        });
                    }
                }
            }
        }
        rows
    }
}

/// F, J, I(f), and total observation count after ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetSummary {
    pub factor_count: usize,
    pub team_count: usize,
    pub replicate_counts: Vec<usize>,
    pub observation_count: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (imin, imax) = self
            .replicate_counts
            .iter()
            .fold((usize::MAX, 0), |(lo, hi), &c| (lo.min(c), hi.max(c)));
        write!(
            f,
            "F={} factors, J={} teams, I(f) in [{imin}, {imax}], {} observations",
            self.factor_count, self.team_count, self.observation_count
        )
    }
}

/// Column mapping for delimited input. Two layouts are supported: the
/// month-resolved ensemble layout (team, region, year, month, value, with the
/// season derived from the month) and a generic layout with explicit factor
/// component columns and a replicate column.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum IngestSchema {
    Mip(MipSchema),
    Generic(GenericSchema),
}

impl Default for IngestSchema {
    fn default() -> Self {
        IngestSchema::Mip(MipSchema::default())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MipSchema {
    pub observation_type: String,
    pub team: String,
    pub region: String,
    pub year: String,
    pub month: String,
    pub value: String,
    /// Keep only rows with this observation type; None keeps everything
    /// (an error if the file mixes types).
    pub observation_type_filter: Option<String>,
    pub unit: Option<String>,
}

impl Default for MipSchema {
    fn default() -> Self {
        MipSchema {
            observation_type: "observation_type".into(),
            team: "team".into(),
            region: "region".into(),
            year: "year".into(),
            month: "month".into(),
            value: "flux".into(),
            observation_type_filter: None,
            unit: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenericSchema {
    pub team: String,
    pub replicate: String,
    pub value: String,
    pub factor_components: Vec<String>,
    pub unit: Option<String>,
}

impl Default for GenericSchema {
    fn default() -> Self {
        GenericSchema {
            team: "team".into(),
            replicate: "replicate".into(),
            value: "value".into(),
            factor_components: vec!["factor".into()],
            unit: None,
        }
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("missing input column `{name}`")))
}

/// Reads a delimited table into the canonical dataset. Lines starting with
/// `#` are treated as comments.
pub fn ingest<R: Read>(reader: R, schema: &IngestSchema) -> Result<EnsembleDataset> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();

    match schema {
        IngestSchema::Mip(schema) => {
            let obs_col = column_index(&headers, &schema.observation_type)?;
            let team_col = column_index(&headers, &schema.team)?;
            let region_col = column_index(&headers, &schema.region)?;
            let year_col = column_index(&headers, &schema.year)?;
            let month_col = column_index(&headers, &schema.month)?;
            let value_col = column_index(&headers, &schema.value)?;

            let mut rows = Vec::new();
            let mut seen_type: Option<String> = None;
            for (idx, record) in csv_reader.records().enumerate() {
                let record = record?;
                let row_no = idx + 2; // 1-based, after the header
                let parse = |col: usize| -> Result<&str> {
                    record.get(col).ok_or_else(|| Error::MalformedRow {
                        row: row_no,
                        message: "short record".into(),
                    })
                };
                let obs_type = parse(obs_col)?;
                if let Some(filter) = &schema.observation_type_filter {
                    if obs_type != filter {
                        continue;
                    }
                } else {
                    match &seen_type {
                        None => seen_type = Some(obs_type.to_string()),
                        Some(t) if t == obs_type => {}
                        Some(t) => {
                            return Err(Error::Config(format!(
                                "input mixes observation types (`{t}` and `{obs_type}`); \
                                 set an observation type filter"
                            )))
                        }
                    }
                }
                let year: i32 = parse(year_col)?.parse().map_err(|e| Error::MalformedRow {
                    row: row_no,
                    message: format!("bad year: {e}"),
                })?;
                let month: u32 = parse(month_col)?.parse().map_err(|e| Error::MalformedRow {
                    row: row_no,
                    message: format!("bad month: {e}"),
                })?;
                let value: f64 = parse(value_col)?.parse().map_err(|e| Error::MalformedRow {
                    row: row_no,
                    message: format!("bad value: {e}"),
                })?;
                let season = derive_season(month)?;
                let factor = FactorKey::new([
                    ("season".to_string(), season.label().to_string()),
                    ("region".to_string(), parse(region_col)?.to_string()),
                ])?;
                rows.push(EnsembleRow {
                    team: parse(team_col)?.to_string(),
                    factor,
                    replicate: format!("{year:04}-{month:02}"),
                    value,
                });
            }
            EnsembleDataset::from_rows(rows, schema.unit.clone())
        }
        IngestSchema::Generic(schema) => {
            let team_col = column_index(&headers, &schema.team)?;
            let rep_col = column_index(&headers, &schema.replicate)?;
            let value_col = column_index(&headers, &schema.value)?;
            let component_cols: Vec<(String, usize)> = schema
                .factor_components
                .iter()
                .map(|name| column_index(&headers, name).map(|i| (name.clone(), i)))
                .collect::<Result<_>>()?;

            let mut rows = Vec::new();
            for (idx, record) in csv_reader.records().enumerate() {
                let record = record?;
                let row_no = idx + 2;
                let parse = |col: usize| -> Result<&str> {
                    record.get(col).ok_or_else(|| Error::MalformedRow {
                        row: row_no,
                        message: "short record".into(),
                    })
                };
                let value: f64 = parse(value_col)?.parse().map_err(|e| Error::MalformedRow {
                    row: row_no,
                    message: format!("bad value: {e}"),
                })?;
                let components: Vec<(String, String)> = component_cols
                    .iter()
                    .map(|(name, col)| parse(*col).map(|l| (name.clone(), l.to_string())))
                    .collect::<Result<_>>()?;
                rows.push(EnsembleRow {
                    team: parse(team_col)?.to_string(),
                    factor: FactorKey::new(components)?,
                    replicate: parse(rep_col)?.to_string(),
                    value,
                });
            }
            EnsembleDataset::from_rows(rows, schema.unit.clone())
        }
    }
}

/// Writes the dataset in the generic layout (factor components as columns).
pub fn export<W: Write>(dataset: &EnsembleDataset, writer: W) -> Result<()> {
    let mut csv_writer = csv::Writer::from_writer(writer);
    let component_names = dataset.factors()[0].component_names();
    let mut header: Vec<String> = vec!["team".into()];
    header.extend(component_names.iter().cloned());
    header.push("replicate".into());
    header.push("value".into());
    csv_writer.write_record(&header)?;
    for row in dataset.export_rows() {
        let mut record: Vec<String> = vec![row.team];
        for name in &component_names {
            record.push(row.factor.level(name).unwrap_or("").to_string());
        }
        record.push(row.replicate);
        record.push(format!("{}", row.value));
        csv_writer.write_record(&record)?;
    }
    csv_writer.flush()?;
    Ok(())
}

/// Reads a verification table: factor component columns, a replicate column,
/// `z`, and `variance`.
pub fn ingest_verification<R: Read>(
    reader: R,
    dataset: &EnsembleDataset,
) -> Result<VerificationSet> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let component_names = dataset.factors()[0].component_names();
    let component_cols: Vec<(String, usize)> = component_names
        .iter()
        .map(|name| column_index(&headers, name).map(|i| (name.clone(), i)))
        .collect::<Result<_>>()?;
    let rep_col = column_index(&headers, "replicate")?;
    let z_col = column_index(&headers, "z")?;
    let var_col = column_index(&headers, "variance")?;

    let mut records = Vec::new();
    for (idx, record) in csv_reader.records().enumerate() {
        let record = record?;
        let row_no = idx + 2;
        let parse = |col: usize| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::MalformedRow {
                row: row_no,
                message: "short record".into(),
            })
        };
        let components: Vec<(String, String)> = component_cols
            .iter()
            .map(|(name, col)| parse(*col).map(|l| (name.clone(), l.to_string())))
            .collect::<Result<_>>()?;
        let z: f64 = parse(z_col)?.parse().map_err(|e| Error::MalformedRow {
            row: row_no,
            message: format!("bad z: {e}"),
        })?;
        let variance: f64 = parse(var_col)?.parse().map_err(|e| Error::MalformedRow {
            row: row_no,
            message: format!("bad variance: {e}"),
        })?;
        records.push((
            FactorKey::new(components)?,
            parse(rep_col)?.to_string(),
            z,
            variance,
        ));
    }
    VerificationSet::resolve(dataset, records)
}
