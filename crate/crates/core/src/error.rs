//! Error types shared across the harness.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("failed to parse feature schema: {0}")]
    Parse(String),
    #[error("duplicate feature name in schema: {0}")]
    DuplicateFeature(String),
    #[error("feature {0} has an empty or inverted valid range")]
    InvalidRange(String),
    #[error("expected {expected} feature values, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("feature {0} has a non-finite value")]
    NonFinite(String),
    #[error("feature {feature} value {value} is outside its valid range")]
    OutOfRange { feature: String, value: f64 },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("PHQ-4 score {0} is out of range (expected 0..=12)")]
    Phq4OutOfRange(i64),
    #[error("window for {participant} starting at day {start_day} has {got} days, expected {expected}")]
    WrongWindowLength {
        participant: String,
        start_day: u32,
        got: usize,
        expected: usize,
    },
    #[error("window for {participant} starting at day {start_day} has non-consecutive day indices")]
    NonConsecutiveDays { participant: String, start_day: u32 },
    #[error("window days for {participant} do not all belong to that participant")]
    MixedParticipants { participant: String },
    #[error("samples for {participant} are not strictly increasing by start day")]
    UnorderedWindows { participant: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("users with fewer than {min} samples cannot be split 7:1:2: {users:?}")]
    TooFewSamples { min: usize, users: Vec<String> },
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("io error writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error writing {path}: {message}")]
    Csv { path: String, message: String },
}

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing required column {column}")]
    MissingColumn { column: String },
    #[error("unexpected column {column}; not in the feature schema")]
    UnknownColumn { column: String },
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature {0} is not mapped to any behavioral category")]
    UnmappedFeature(String),
    #[error("category map names unknown feature {0}")]
    UnknownFeature(String),
    #[error("category {0} has no member features")]
    EmptyCategory(String),
    #[error("empty input sequence")]
    EmptyInput,
    #[error("sequence length {len} is not divisible by 7 and partial weeks are not allowed here")]
    PartialWeek { len: usize },
    #[error("tensor contains non-finite values")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input rows have inconsistent widths ({0} vs {1})")]
    InconsistentWidth(usize, usize),
    #[error("no training samples")]
    EmptySet,
    #[error("training labels cover {0} distinct classes; at least 2 required")]
    DegenerateLabels(usize),
    #[error("class {0} has zero samples in the training split; cannot derive inverse-frequency weights")]
    ZeroCountClass(&'static str),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("input width {got} does not match the trained model ({expected})")]
    WidthMismatch { expected: usize, got: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("feature representation failed: {0}")]
    Representation(#[from] FeatureError),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no display rename for feature {0}")]
    MissingRename(String),
    #[error("behavior tables require the sequence layout, got {0}")]
    SequenceLayoutRequired(String),
    #[error("5-dimension serialization requires a fitted normalizer")]
    NormalizerRequired,
    #[error("malformed behavior table: {0}")]
    Table(String),
    #[error("malformed prompt: {0}")]
    Prompt(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("pattern knowledge was not provided")]
    MissingPatterns,
    #[error("response contains no severity label: {0:?}")]
    Unparseable(String),
    #[error("empty training history for participant {0}")]
    EmptyHistory(String),
    #[error("empty split; cannot compute class statistics")]
    EmptySplit,
    #[error("mask fraction must be in (0, 1), got {0}")]
    BadMaskFraction(f64),
    #[error("llm client error: {0}")]
    Client(String),
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({predictions}) and gold labels ({gold}) differ in length")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("forecast failure: {0}")]
    Forecast(String),
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("participant {0} has samples from fewer than 2 classes")]
    DegenerateUser(String),
    #[error("participant {0}'s windows produce no informative splits")]
    NoSignal(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Runner-level failures: a config that cannot be used, an unreachable
/// dataset source, or an unusable result store. Failures inside one grid
/// cell are recorded in that cell's result file instead.
#[derive(Debug, Error)]
pub enum ExpError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Generate(#[from] GenError),
    #[error(transparent)]
    Import(#[from] ImportError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
