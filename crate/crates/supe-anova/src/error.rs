use thiserror::Error;

/// Errors produced by dataset ingestion, model assembly, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed row {row}: {message}")]
    MalformedRow { row: usize, message: String },

    #[error("duplicate cell: factor {factor}, replicate {replicate}, team {team}")]
    DuplicateCell {
        factor: String,
        replicate: String,
        team: String,
    },

    #[error("non-finite value in row {row}: {value}")]
    NonFiniteValue { row: usize, value: f64 },

    #[error("inconsistent factor components in row {row}: expected {expected:?}, got {got:?}")]
    InconsistentComponents {
        row: usize,
        expected: Vec<String>,
        got: Vec<String>,
    },

    #[error("month out of range: {0} (expected 1..=12)")]
    MonthOutOfRange(u32),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("unknown team: {0}")]
    UnknownTeam(String),

    #[error("unknown factor: {0}")]
    UnknownFactor(String),

    #[error("unknown replicate {replicate} in factor {factor}")]
    UnknownReplicate { factor: String, replicate: String },

    #[error("grouping is not a partition of the dataset factors: {0}")]
    InvalidGrouping(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("cell covariance is not positive definite (factor index {factor})")]
    NotPositiveDefinite { factor: usize },

    #[error("scalar path requires complete balanced data with zero correlations: {0}")]
    ScalarPathUnavailable(String),

    #[error("degenerate cell: tau^2 and all sigma^2 are zero")]
    DegenerateCell,

    #[error("factor {0} has no observations")]
    EmptyFactor(String),

    #[error("empty cell: factor {factor}, replicate {replicate}")]
    EmptyCell { factor: String, replicate: String },

    #[error(
        "variance components not identifiable in group {group}: {teams} team(s), {observations} observation(s)"
    )]
    NotIdentifiable {
        group: String,
        teams: usize,
        observations: usize,
    },

    #[error("k-means requires k <= number of distinct values ({distinct}), got k = {k}")]
    TooManyClusters { k: usize, distinct: usize },

    #[error("no root for the shape parameter in [{lo}, {hi}]")]
    ShapeBracket { lo: f64, hi: f64 },

    #[error("negative spread for interval: {0}")]
    NegativeSpread(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),

    #[error("artifact schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("TOML parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("TOML serialize error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
