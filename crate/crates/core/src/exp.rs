//! Config-driven experiment runner.
//!
//! A single JSON file declares a dataset source, a list of feature
//! configurations, a list of model specs and a list of seeds. The runner
//! executes the full cross product, one result record per
//! (model, feature config, seed) cell, and persists each record as JSON
//! under a content hash covering the cell, the protocols, the dataset
//! fingerprint and the code version. Re-running the same config skips
//! every cell whose record already exists and succeeded; failed or
//! corrupt records run again. A cell failure is written to its record and
//! the run continues.
//!
//! Cells can run in this process (`run_grid`) or in one child process per
//! cell with a bounded pool (`run_grid_processes`), so a crash in one
//! cell cannot take down the rest of the grid.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classical::{self, ClassicalSpec, Personalization};
use crate::data::{Dataset, SeverityLevel, WINDOW_DAYS};
use crate::error::{
    EvalError, ExpError, FeatureError, LlmError, ModelError, SplitError,
};
use crate::eval::{
    early_curve, forecast_eval, ClassicalForecaster, EarlyCurve, EvalReport, Forecaster,
    FORECAST_INPUT_DAYS,
};
use crate::features::{self, CategoryMap, FeatureConfig, Layout};
use crate::io;
use crate::llm::{
    HttpClient, HttpClientConfig, LlmClient, LlmForecaster, MockClient, PatternKnowledge,
    PromptContext, ReplayClient, Strategy, TranscriptWriter,
};
use crate::neural::{self, NeuralForecaster, NeuralPersonalization, NeuralSpec};
use crate::schema::FeatureSchema;
use crate::split::{split_user_temporal, SplitAssignment};
use crate::syngen::{self, GeneratorConfig};

/// Where the experiment's dataset comes from. A generated dataset carries
/// its own seed inside the generator config; the grid's seed list varies
/// model randomness only, never the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Generate(GeneratorConfig),
    Import { path: PathBuf },
}

/// Completion backend for LLM cells.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LlmClientSpec {
    /// Deterministic offline stand-in; echoes in-context labels.
    #[default]
    Mock,
    /// Answers from a recorded transcript; unknown prompts fail.
    Replay { path: PathBuf },
    /// Live OpenAI-compatible endpoint.
    Http(HttpClientConfig),
}

fn default_max_in_flight() -> usize {
    4
}

/// One LLM model entry: a prompting strategy plus the client that answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSpec {
    #[serde(flatten)]
    pub strategy: Strategy,
    /// Name the participant in the prompt header.
    #[serde(default)]
    pub user_aware: bool,
    #[serde(default)]
    pub client: LlmClientSpec,
    /// Required by the pattern strategy, ignored by the others.
    #[serde(default)]
    pub patterns: Option<PatternKnowledge>,
    /// Concurrent requests per evaluation batch.
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

/// One model entry in the grid; the family tag picks the training
/// pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    Classical(ClassicalSpec),
    Neural(NeuralSpec),
    Llm(LlmSpec),
}

impl ModelSpec {
    /// Short report label: the model kind plus the switches that change
    /// its behavior.
    pub fn label(&self) -> String {
        match self {
            ModelSpec::Classical(s) => match s.personalization {
                Personalization::Agnostic => s.kind.name().to_string(),
                Personalization::OneHotId => format!("{}+user_id", s.kind.name()),
            },
            ModelSpec::Neural(s) => match s.personalization {
                NeuralPersonalization::Agnostic => s.kind.name().to_string(),
                NeuralPersonalization::UserEmbedding { .. } => {
                    format!("{}+user_embed", s.kind.name())
                }
            },
            ModelSpec::Llm(s) => {
                let mut label = format!("llm_{}", s.strategy.name());
                if s.user_aware {
                    label.push_str("+user_id");
                }
                label
            }
        }
    }
}

/// Evaluation protocols to run for every cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocols {
    /// Forecast from the first observed week.
    pub forecast: bool,
    /// Expanding-window curve over observation lengths 7..=14.
    pub early_curve: bool,
}

impl Default for Protocols {
    fn default() -> Self {
        Protocols { forecast: true, early_curve: false }
    }
}

/// Declarative experiment definition, loaded from a single JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub feature_configs: Vec<FeatureConfig>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub protocols: Protocols,
    /// Model seeds; the grid runs every model under every seed.
    pub seeds: Vec<u64>,
}

/// Parses without validating; `early`-style protocol overrides happen
/// between the two steps.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ExpError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Parses and validates in one step.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExpError> {
    let config = parse_config(path)?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    /// Rejects empty or duplicated grid axes, invalid model specs, and any
    /// (model, layout) pairing the feature-representation rules forbid.
    pub fn validate(&self) -> Result<(), ExpError> {
        let bad = |msg: String| Err(ExpError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds list is empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("duplicate seeds would collapse into one result record".into());
        }
        if self.models.is_empty() {
            return bad("models list is empty".into());
        }
        if self.feature_configs.is_empty() {
            return bad("feature_configs list is empty".into());
        }
        if self.feature_configs.iter().collect::<HashSet<_>>().len() != self.feature_configs.len()
        {
            return bad("duplicate feature configs would collapse into one result record".into());
        }
        if !self.protocols.forecast && !self.protocols.early_curve {
            return bad("no evaluation protocol enabled".into());
        }
        for model in &self.models {
            match model {
                ModelSpec::Classical(s) => s
                    .validate()
                    .map_err(|e| ExpError::Config(format!("{}: {e}", model.label())))?,
                ModelSpec::Neural(s) => s
                    .validate()
                    .map_err(|e| ExpError::Config(format!("{}: {e}", model.label())))?,
                ModelSpec::Llm(s) => {
                    s.strategy
                        .validate()
                        .map_err(|e| ExpError::Config(format!("{}: {e}", model.label())))?;
                    if matches!(s.strategy, Strategy::Pattern) && s.patterns.is_none() {
                        return bad(format!(
                            "{}: the pattern strategy needs a patterns block",
                            model.label()
                        ));
                    }
                    if s.max_in_flight == 0 {
                        return bad(format!("{}: max_in_flight must be positive", model.label()));
                    }
                }
            }
            for &fc in &self.feature_configs {
                if let Some(msg) = pairing_error(model, fc) {
                    return bad(msg);
                }
                if self.protocols.early_curve
                    && fc.layout == Layout::Flattened
                    && matches!(model, ModelSpec::Classical(_))
                {
                    return bad(format!(
                        "{}: the flattened layout fixes the observation length, so it cannot \
                         run the early-prediction curve; use aggregated",
                        model.label()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Full cross product: models outermost, then feature configs, then
    /// seeds. The order is part of the cell-index contract with worker
    /// processes.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::with_capacity(self.models.len() * self.feature_configs.len() * self.seeds.len());
        for model in &self.models {
            for &feature_config in &self.feature_configs {
                for &seed in &self.seeds {
                    out.push(Cell { model: model.clone(), feature_config, seed });
                }
            }
        }
        out
    }
}

/// Layout compatibility per family; mirrors what the training pipelines
/// themselves enforce so a bad pairing fails at config load, not mid-run.
fn pairing_error(model: &ModelSpec, fc: FeatureConfig) -> Option<String> {
    match model {
        ModelSpec::Classical(s) => (fc.layout == Layout::Sequence)
            .then(|| format!("{} cannot consume the {fc} layout", s.kind.name())),
        ModelSpec::Neural(s) => {
            let want = if s.kind.consumes_sequence() { Layout::Sequence } else { Layout::Aggregated };
            (fc.layout != want).then(|| format!("{} cannot consume the {fc} layout", s.kind.name()))
        }
        ModelSpec::Llm(_) => (fc.layout != Layout::Sequence)
            .then(|| format!("prompt serialization needs a sequence layout, got {fc}")),
    }
}

/// One grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub model: ModelSpec,
    pub feature_config: FeatureConfig,
    /// Replaces the model spec's own seed at execution time.
    pub seed: u64,
}

/// Identity of one result record. Any change to the cell, the protocols,
/// the dataset content or the crate version re-runs the cell.
pub fn cell_hash(cell: &Cell, protocols: Protocols, dataset_fingerprint: &str) -> String {
    #[derive(Serialize)]
    struct Identity<'a> {
        cell: &'a Cell,
        protocols: Protocols,
        dataset_fingerprint: &'a str,
        code_version: &'a str,
    }
    let canonical = serde_json::to_string(&Identity {
        cell,
        protocols,
        dataset_fingerprint,
        code_version: env!("CARGO_PKG_VERSION"),
    })
    .expect("cell identity serializes");
    let mut h = Sha256::new();
    h.update(canonical.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

/// One persisted cell outcome. Reports are rebuilt from these records
/// alone, so each carries its full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub hash: String,
    pub model_label: String,
    pub cell: Cell,
    pub protocols: Protocols,
    pub dataset_fingerprint: String,
    pub code_version: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forecast: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early: Option<EarlyCurve>,
    pub runtime_s: f64,
}

pub fn results_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("results")
}

fn record_path(out_dir: &Path, hash: &str) -> PathBuf {
    results_dir(out_dir).join(format!("{hash}.json"))
}

/// Serializes to a sibling temp file, then renames: a record either exists
/// completely or not at all, even across crashing workers.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), ExpError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_record(out_dir: &Path, record: &ResultRecord) -> Result<(), ExpError> {
    fs::create_dir_all(results_dir(out_dir))?;
    write_json_atomic(&record_path(out_dir, &record.hash), record)
}

fn read_record(out_dir: &Path, hash: &str) -> Option<ResultRecord> {
    let text = fs::read_to_string(record_path(out_dir, hash)).ok()?;
    serde_json::from_str(&text).ok()
}

/// A cell counts as done only when its record parses and succeeded.
fn completed(out_dir: &Path, hash: &str) -> bool {
    read_record(out_dir, hash).is_some_and(|r| r.status == RunStatus::Ok)
}

/// Every record in the store, sorted by (model, config, seed) for stable
/// reporting.
pub fn read_records(out_dir: &Path) -> Result<Vec<ResultRecord>, ExpError> {
    let dir = results_dir(out_dir);
    let mut out: Vec<ResultRecord> = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let record = serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| {
                ExpError::Config(format!("unreadable record {}: {e}", path.display()))
            })?;
            out.push(record);
        }
    }
    out.sort_by_key(|r| (r.model_label.clone(), r.cell.feature_config.to_string(), r.cell.seed));
    Ok(out)
}

pub fn load_dataset(source: &DatasetSource) -> Result<Dataset, ExpError> {
    match source {
        DatasetSource::Generate(config) => Ok(syngen::generate(config)?),
        DatasetSource::Import { path } => {
            let report = io::import_csv(path)?;
            if !report.skipped.is_empty() {
                log::warn!("import skipped {} malformed windows", report.skipped.len());
            }
            Ok(report.dataset)
        }
    }
}

/// Anything that can go wrong inside one cell; recorded, never fatal to
/// the run.
#[derive(Debug, Error)]
enum CellError {
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("llm client: {0}")]
    Client(#[from] LlmError),
    #[error("transcript store: {0}")]
    Transcript(String),
}

struct CellOutput {
    forecast: Option<EvalReport>,
    early: Option<EarlyCurve>,
}

fn run_protocols(
    forecaster: &dyn Forecaster,
    dataset: &Dataset,
    test: &[usize],
    protocols: Protocols,
) -> Result<CellOutput, EvalError> {
    let forecast = protocols
        .forecast
        .then(|| forecast_eval(forecaster, dataset, test, FORECAST_INPUT_DAYS))
        .transpose()?;
    let early = protocols
        .early_curve
        .then(|| early_curve(forecaster, dataset, test))
        .transpose()?;
    Ok(CellOutput { forecast, early })
}

fn classical_cell(
    dataset: &Dataset,
    split: &SplitAssignment,
    spec: &ClassicalSpec,
    fc: FeatureConfig,
    protocols: Protocols,
) -> Result<CellOutput, CellError> {
    let normalizer = features::fit_normalizer(dataset, &split.train)?;
    let map = CategoryMap::canonical().clone();
    // A flattened row's width is tied to the observation length, so the
    // model trains at the protocol's evaluation length. The other layouts
    // are length-independent and train on full windows.
    let train_t = if fc.layout == Layout::Flattened { FORECAST_INPUT_DAYS } else { WINDOW_DAYS };
    let mut rows = Vec::with_capacity(split.train.len());
    let mut labels: Vec<SeverityLevel> = Vec::with_capacity(split.train.len());
    for &i in &split.train {
        let sample = dataset.sample(i);
        rows.push(features::represent(sample, train_t, &normalizer, &map, fc, true)?.values);
        labels.push(sample.label);
    }
    let user_index = match spec.personalization {
        Personalization::Agnostic => None,
        Personalization::OneHotId => {
            let mut users: Vec<&str> = split
                .train
                .iter()
                .map(|&i| dataset.sample(i).participant_id.as_str())
                .collect();
            users.sort();
            users.dedup();
            let index: BTreeMap<String, usize> = users
                .into_iter()
                .enumerate()
                .map(|(row, user)| (user.to_string(), row))
                .collect();
            let ids: Vec<&str> = split
                .train
                .iter()
                .map(|&i| dataset.sample(i).participant_id.as_str())
                .collect();
            rows = classical::attach_user_onehot(&rows, &ids, &index);
            Some(index)
        }
    };
    let model = classical::fit(spec, &rows, &labels)?;
    let forecaster = ClassicalForecaster { model, normalizer, map, config: fc, user_index };
    Ok(run_protocols(&forecaster, dataset, &split.test, protocols)?)
}

fn neural_cell(
    dataset: &Dataset,
    split: &SplitAssignment,
    spec: &NeuralSpec,
    fc: FeatureConfig,
    protocols: Protocols,
) -> Result<CellOutput, CellError> {
    let trained = neural::train(spec, dataset, &split.train, &split.val, fc)?;
    let forecaster = NeuralForecaster { trained };
    Ok(run_protocols(&forecaster, dataset, &split.test, protocols)?)
}

fn llm_cell(
    dataset: &Dataset,
    split: &SplitAssignment,
    spec: &LlmSpec,
    fc: FeatureConfig,
    protocols: Protocols,
    transcript_path: &Path,
) -> Result<CellOutput, CellError> {
    let normalizer = features::fit_normalizer(dataset, &split.train)?;
    let map = CategoryMap::canonical().clone();
    let ctx = PromptContext {
        dataset,
        train: &split.train,
        config: fc,
        schema: FeatureSchema::canonical(),
        map: &map,
        normalizer: &normalizer,
        user_aware: spec.user_aware,
        patterns: spec.patterns.as_ref(),
    };
    let client: Box<dyn LlmClient> = match &spec.client {
        LlmClientSpec::Mock => Box::new(MockClient),
        LlmClientSpec::Replay { path } => Box::new(ReplayClient::from_path(path)?),
        LlmClientSpec::Http(config) => Box::new(HttpClient::new(config.clone())),
    };
    if let Some(parent) = transcript_path.parent() {
        fs::create_dir_all(parent).map_err(|e| CellError::Transcript(e.to_string()))?;
    }
    let transcript = TranscriptWriter::create(transcript_path)?;
    let forecaster = LlmForecaster {
        ctx,
        strategy: spec.strategy,
        client: client.as_ref(),
        max_in_flight: spec.max_in_flight,
        transcript: Some(&transcript),
    };
    Ok(run_protocols(&forecaster, dataset, &split.test, protocols)?)
}

fn execute_cell(
    dataset: &Dataset,
    cell: &Cell,
    protocols: Protocols,
    out_dir: &Path,
    hash: &str,
) -> Result<CellOutput, CellError> {
    let split = split_user_temporal(dataset)?;
    match &cell.model {
        ModelSpec::Classical(spec) => {
            let mut spec = spec.clone();
            spec.seed = cell.seed;
            classical_cell(dataset, &split, &spec, cell.feature_config, protocols)
        }
        ModelSpec::Neural(spec) => {
            let mut spec = spec.clone();
            spec.seed = cell.seed;
            neural_cell(dataset, &split, &spec, cell.feature_config, protocols)
        }
        ModelSpec::Llm(spec) => {
            // Prompt construction is deterministic; the seed only
            // distinguishes records.
            let transcript = out_dir.join("transcripts").join(format!("{hash}.jsonl"));
            llm_cell(dataset, &split, spec, cell.feature_config, protocols, &transcript)
        }
    }
}

/// Runs one cell against an already-loaded dataset and persists the
/// outcome, success or failure.
fn execute_and_record(
    dataset: &Dataset,
    cell: &Cell,
    protocols: Protocols,
    fingerprint: &str,
    out_dir: &Path,
) -> Result<ResultRecord, ExpError> {
    let hash = cell_hash(cell, protocols, fingerprint);
    let start = Instant::now();
    let outcome = execute_cell(dataset, cell, protocols, out_dir, &hash);
    let runtime_s = start.elapsed().as_secs_f64();
    let record = match outcome {
        Ok(out) => ResultRecord {
            hash,
            model_label: cell.model.label(),
            cell: cell.clone(),
            protocols,
            dataset_fingerprint: fingerprint.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Ok,
            error: None,
            forecast: out.forecast,
            early: out.early,
            runtime_s,
        },
        Err(e) => ResultRecord {
            hash,
            model_label: cell.model.label(),
            cell: cell.clone(),
            protocols,
            dataset_fingerprint: fingerprint.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            status: RunStatus::Failed,
            error: Some(e.to_string()),
            forecast: None,
            early: None,
            runtime_s,
        },
    };
    write_record(out_dir, &record)?;
    Ok(record)
}

/// Executes exactly one enumerated cell; the worker half of the process
/// pool. Loads the dataset itself so each cell is isolated end to end.
pub fn run_cell(
    config: &ExperimentConfig,
    out_dir: &Path,
    index: usize,
) -> Result<ResultRecord, ExpError> {
    config.validate()?;
    let cells = config.cells();
    let cell = cells.get(index).ok_or_else(|| {
        ExpError::Config(format!("cell index {index} out of range 0..{}", cells.len()))
    })?;
    let dataset = load_dataset(&config.dataset)?;
    let fingerprint = dataset.fingerprint();
    execute_and_record(&dataset, cell, config.protocols, &fingerprint, out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub executed: usize,
    pub skipped: usize,
    pub failed: usize,
}

struct PreparedRun {
    dataset: Dataset,
    fingerprint: String,
    cells: Vec<Cell>,
    /// (cell index, hash) pairs still to run.
    pending: Vec<(usize, String)>,
    skipped: usize,
}

/// Validates, persists the effective config next to the results for
/// provenance, and works out which cells still need to run.
fn prepare_run(config: &ExperimentConfig, out_dir: &Path) -> Result<PreparedRun, ExpError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    write_json_atomic(&out_dir.join("config.json"), config)?;
    let dataset = load_dataset(&config.dataset)?;
    let fingerprint = dataset.fingerprint();
    let cells = config.cells();
    let mut pending = Vec::new();
    let mut skipped = 0;
    for (index, cell) in cells.iter().enumerate() {
        let hash = cell_hash(cell, config.protocols, &fingerprint);
        if completed(out_dir, &hash) {
            skipped += 1;
        } else {
            pending.push((index, hash));
        }
    }
    Ok(PreparedRun { dataset, fingerprint, cells, pending, skipped })
}

/// Runs every pending cell in this process, in grid order.
pub fn run_grid(config: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, ExpError> {
    let prepared = prepare_run(config, out_dir)?;
    let mut summary = RunSummary {
        total: prepared.cells.len(),
        executed: 0,
        skipped: prepared.skipped,
        failed: 0,
    };
    for (index, _) in &prepared.pending {
        let cell = &prepared.cells[*index];
        let record = execute_and_record(
            &prepared.dataset,
            cell,
            config.protocols,
            &prepared.fingerprint,
            out_dir,
        )?;
        summary.executed += 1;
        if record.status == RunStatus::Failed {
            summary.failed += 1;
            log::warn!(
                "cell {index} ({}, {}, seed {}) failed: {}",
                record.model_label,
                cell.feature_config,
                cell.seed,
                record.error.as_deref().unwrap_or("unknown")
            );
        }
    }
    Ok(summary)
}

/// Runs pending cells in child processes, at most `workers` at a time.
/// Each child re-reads the persisted config and executes one cell, so a
/// crash or abort in one cell leaves only that cell failed.
pub fn run_grid_processes(
    config: &ExperimentConfig,
    out_dir: &Path,
    workers: usize,
) -> Result<RunSummary, ExpError> {
    let prepared = prepare_run(config, out_dir)?;
    // Children regenerate or re-read the dataset themselves.
    drop(prepared.dataset);
    let mut summary = RunSummary {
        total: prepared.cells.len(),
        executed: 0,
        skipped: prepared.skipped,
        failed: 0,
    };
    let config_path = out_dir.join("config.json");
    let exe = std::env::current_exe()?;
    let mut pending: VecDeque<(usize, String)> = prepared.pending.into();
    let mut active: Vec<(std::process::Child, usize, String)> = Vec::new();
    while !pending.is_empty() || !active.is_empty() {
        while active.len() < workers.max(1) {
            let Some((index, hash)) = pending.pop_front() else { break };
            let child = Command::new(&exe)
                .arg("run-cell")
                .arg("--config")
                .arg(&config_path)
                .arg("--out")
                .arg(out_dir)
                .arg("--cell")
                .arg(index.to_string())
                .stdout(Stdio::null())
                .spawn()?;
            active.push((child, index, hash));
        }
        let mut reaped = false;
        let mut slot = 0;
        while slot < active.len() {
            if let Some(status) = active[slot].0.try_wait()? {
                let (_, index, hash) = active.remove(slot);
                reaped = true;
                summary.executed += 1;
                match read_record(out_dir, &hash) {
                    Some(r) if r.status == RunStatus::Ok => {}
                    Some(_) => summary.failed += 1,
                    None => {
                        // The worker died before publishing its record.
                        summary.failed += 1;
                        let cell = &prepared.cells[index];
                        let record = ResultRecord {
                            hash,
                            model_label: cell.model.label(),
                            cell: cell.clone(),
                            protocols: config.protocols,
                            dataset_fingerprint: prepared.fingerprint.clone(),
                            code_version: env!("CARGO_PKG_VERSION").to_string(),
                            status: RunStatus::Failed,
                            error: Some(format!("worker exited ({status}) without a record")),
                            forecast: None,
                            early: None,
                            runtime_s: 0.0,
                        };
                        write_record(out_dir, &record)?;
                    }
                }
            } else {
                slot += 1;
            }
        }
        if !reaped && !active.is_empty() {
            std::thread::sleep(std::time::Duration::from_millis(25));
        }
    }
    Ok(summary)
}

/// Report tables rebuilt from stored records only.
pub struct ReportTables {
    pub markdown: String,
    pub csv: String,
}

struct GroupStats {
    seeds_ok: usize,
    seeds_total: usize,
    failed: usize,
    accuracy: Vec<f64>,
    macro_f1: Vec<f64>,
    unparseable: Vec<f64>,
    /// Per observation length 7..=14: macro-F1 values across seeds.
    early_f1: BTreeMap<usize, Vec<f64>>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn fmt_mean(values: &[f64]) -> String {
    mean(values).map_or_else(|| "-".into(), |m| format!("{m:.4}"))
}

/// One markdown row per (model, feature config), metrics averaged over
/// seeds; plus a long-format CSV with one row per record and protocol
/// point.
pub fn report_tables(records: &[ResultRecord]) -> ReportTables {
    let mut groups: BTreeMap<(String, String), GroupStats> = BTreeMap::new();
    for r in records {
        let key = (r.model_label.clone(), r.cell.feature_config.to_string());
        let g = groups.entry(key).or_insert_with(|| GroupStats {
            seeds_ok: 0,
            seeds_total: 0,
            failed: 0,
            accuracy: Vec::new(),
            macro_f1: Vec::new(),
            unparseable: Vec::new(),
            early_f1: BTreeMap::new(),
        });
        g.seeds_total += 1;
        match r.status {
            RunStatus::Failed => g.failed += 1,
            RunStatus::Ok => {
                g.seeds_ok += 1;
                if let Some(report) = &r.forecast {
                    g.accuracy.push(report.accuracy);
                    g.macro_f1.push(report.macro_f1);
                    g.unparseable.push(report.unparseable as f64);
                }
                if let Some(curve) = &r.early {
                    for (t, report) in &curve.points {
                        g.early_f1.entry(*t).or_default().push(report.macro_f1);
                    }
                }
            }
        }
    }

    let mut md = String::new();
    md.push_str("# Experiment report\n\n");
    md.push_str("## Forecast (first observed week)\n\n");
    md.push_str("| Model | Config | Seeds | Accuracy | Macro-F1 | Unparseable | Failed |\n");
    md.push_str("|---|---|---|---|---|---|---|\n");
    for ((model, config), g) in &groups {
        md.push_str(&format!(
            "| {model} | {config} | {}/{} | {} | {} | {} | {} |\n",
            g.seeds_ok,
            g.seeds_total,
            fmt_mean(&g.accuracy),
            fmt_mean(&g.macro_f1),
            fmt_mean(&g.unparseable),
            g.failed
        ));
    }
    if groups.values().any(|g| !g.early_f1.is_empty()) {
        md.push_str("\n## Early prediction (macro-F1 by observation length)\n\n");
        md.push_str("| Model | Config |");
        for t in FORECAST_INPUT_DAYS..=WINDOW_DAYS {
            md.push_str(&format!(" T={t} |"));
        }
        md.push('\n');
        md.push_str("|---|---|");
        for _ in FORECAST_INPUT_DAYS..=WINDOW_DAYS {
            md.push_str("---|");
        }
        md.push('\n');
        for ((model, config), g) in &groups {
            if g.early_f1.is_empty() {
                continue;
            }
            md.push_str(&format!("| {model} | {config} |"));
            for t in FORECAST_INPUT_DAYS..=WINDOW_DAYS {
                let cell = g.early_f1.get(&t).map_or("-".into(), |v| fmt_mean(v));
                md.push_str(&format!(" {cell} |"));
            }
            md.push('\n');
        }
    }

    let mut csv = String::from("model,config,seed,status,protocol,t,accuracy,macro_f1,unparseable\n");
    for r in records {
        let base = format!("{},{},{}", r.model_label, r.cell.feature_config, r.cell.seed);
        match r.status {
            RunStatus::Failed => csv.push_str(&format!("{base},failed,,,,,\n")),
            RunStatus::Ok => {
                if let Some(report) = &r.forecast {
                    csv.push_str(&format!(
                        "{base},ok,forecast,{},{:.6},{:.6},{}\n",
                        FORECAST_INPUT_DAYS, report.accuracy, report.macro_f1, report.unparseable
                    ));
                }
                if let Some(curve) = &r.early {
                    for (t, report) in &curve.points {
                        csv.push_str(&format!(
                            "{base},ok,early,{t},{:.6},{:.6},{}\n",
                            report.accuracy, report.macro_f1, report.unparseable
                        ));
                    }
                }
            }
        }
    }
    ReportTables { markdown: md, csv }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::ClassicalKind;
    use crate::features::{Dimension, Granularity};

    fn small_source() -> DatasetSource {
        DatasetSource::Generate(GeneratorConfig {
            num_users: 8,
            samples_per_user: (6, 8),
            class_proportions: [0.4, 0.3, 0.2, 0.1],
            separability: 2.0,
            user_heterogeneity: 0.0,
            user_feature_saliency: 0.0,
            noise_std: 0.5,
            seed: 7,
        })
    }

    fn classical(kind: ClassicalKind) -> ModelSpec {
        ModelSpec::Classical(ClassicalSpec::new(kind))
    }

    fn aggregated(dimension: Dimension) -> FeatureConfig {
        FeatureConfig::new(dimension, Granularity::Daily, Layout::Aggregated)
    }

    fn two_by_two_by_three() -> ExperimentConfig {
        ExperimentConfig {
            dataset: small_source(),
            feature_configs: vec![aggregated(Dimension::D35), aggregated(Dimension::D5)],
            models: vec![
                classical(ClassicalKind::LogisticRegression),
                classical(ClassicalKind::DecisionTree),
            ],
            protocols: Protocols { forecast: true, early_curve: true },
            seeds: vec![1, 2, 3],
        }
    }

    #[test]
    fn grid_is_the_full_cross_product() {
        let config = two_by_two_by_three();
        config.validate().unwrap();
        let cells = config.cells();
        assert_eq!(cells.len(), 12);
        // Models outermost, seeds innermost.
        assert_eq!(cells[0].seed, 1);
        assert_eq!(cells[2].seed, 3);
        assert_eq!(cells[0].model, cells[5].model);
        assert_ne!(cells[5].model, cells[6].model);
        assert_eq!(cells[0].feature_config, cells[2].feature_config);
        assert_ne!(cells[2].feature_config, cells[3].feature_config);
    }

    #[test]
    fn run_persists_every_cell_and_rerun_skips_them() {
        let config = two_by_two_by_three();
        let dir = tempfile::tempdir().unwrap();
        let first = run_grid(&config, dir.path()).unwrap();
        assert_eq!(
            (first.total, first.executed, first.skipped, first.failed),
            (12, 12, 0, 0)
        );
        let records = read_records(dir.path()).unwrap();
        assert_eq!(records.len(), 12);
        for r in &records {
            assert_eq!(r.status, RunStatus::Ok);
            assert!(r.forecast.is_some());
            let curve = r.early.as_ref().unwrap();
            assert_eq!(curve.points.len(), WINDOW_DAYS - FORECAST_INPUT_DAYS + 1);
            assert!(!r.dataset_fingerprint.is_empty());
            assert_eq!(r.code_version, env!("CARGO_PKG_VERSION"));
        }
        let rerun = run_grid(&config, dir.path()).unwrap();
        assert_eq!(
            (rerun.total, rerun.executed, rerun.skipped, rerun.failed),
            (12, 0, 12, 0)
        );
    }

    #[test]
    fn failed_cells_are_recorded_and_retried() {
        // The replay client points at a file that does not exist, so its
        // cell fails at client construction while the mock cell succeeds.
        let config = ExperimentConfig {
            dataset: small_source(),
            feature_configs: vec![FeatureConfig::new(
                Dimension::D35,
                Granularity::Daily,
                Layout::Sequence,
            )],
            models: vec![
                ModelSpec::Llm(LlmSpec {
                    strategy: Strategy::ZeroShot,
                    user_aware: false,
                    client: LlmClientSpec::Mock,
                    patterns: None,
                    max_in_flight: 2,
                }),
                ModelSpec::Llm(LlmSpec {
                    strategy: Strategy::ZeroShot,
                    user_aware: true,
                    client: LlmClientSpec::Replay { path: "/nonexistent/transcript.jsonl".into() },
                    patterns: None,
                    max_in_flight: 2,
                }),
            ],
            protocols: Protocols { forecast: true, early_curve: false },
            seeds: vec![9],
        };
        let dir = tempfile::tempdir().unwrap();
        let first = run_grid(&config, dir.path()).unwrap();
        assert_eq!((first.executed, first.failed), (2, 1));
        let records = read_records(dir.path()).unwrap();
        let failed: Vec<_> =
            records.iter().filter(|r| r.status == RunStatus::Failed).collect();
        assert_eq!(failed.len(), 1);
        assert!(failed[0].error.as_deref().unwrap().contains("transcript"));
        // Only the successful cell is cached; the failure runs again.
        let rerun = run_grid(&config, dir.path()).unwrap();
        assert_eq!(
            (rerun.executed, rerun.skipped, rerun.failed),
            (1, 1, 1)
        );
    }

    #[test]
    fn hash_changes_with_cell_dataset_and_protocols() {
        let config = two_by_two_by_three();
        let cells = config.cells();
        let p = config.protocols;
        let a = cell_hash(&cells[0], p, "fp");
        assert_eq!(a, cell_hash(&cells[0], p, "fp"));
        assert_ne!(a, cell_hash(&cells[1], p, "fp"));
        assert_ne!(a, cell_hash(&cells[0], p, "other"));
        assert_ne!(
            a,
            cell_hash(&cells[0], Protocols { forecast: true, early_curve: false }, "fp")
        );
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = two_by_two_by_three();

        let mut c = base.clone();
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(ExpError::Config(_))));

        let mut c = base.clone();
        c.seeds = vec![1, 1];
        assert!(matches!(c.validate(), Err(ExpError::Config(_))));

        let mut c = base.clone();
        c.protocols = Protocols { forecast: false, early_curve: false };
        assert!(matches!(c.validate(), Err(ExpError::Config(_))));

        // Classical models cannot consume sequences.
        let mut c = base.clone();
        c.feature_configs =
            vec![FeatureConfig::new(Dimension::D35, Granularity::Daily, Layout::Sequence)];
        assert!(matches!(c.validate(), Err(ExpError::Config(_))));

        // Flattened fixes the observation length, incompatible with the
        // expanding-window curve.
        let mut c = base.clone();
        c.feature_configs =
            vec![FeatureConfig::new(Dimension::D35, Granularity::Daily, Layout::Flattened)];
        assert!(matches!(c.validate(), Err(ExpError::Config(_))));

        // The pattern strategy needs its pattern block.
        let mut c = base.clone();
        c.feature_configs =
            vec![FeatureConfig::new(Dimension::D35, Granularity::Daily, Layout::Sequence)];
        c.models = vec![ModelSpec::Llm(LlmSpec {
            strategy: Strategy::Pattern,
            user_aware: false,
            client: LlmClientSpec::Mock,
            patterns: None,
            max_in_flight: 1,
        })];
        assert!(matches!(c.validate(), Err(ExpError::Config(_))));
    }

    #[test]
    fn flattened_models_run_the_forecast_protocol() {
        let config = ExperimentConfig {
            dataset: small_source(),
            feature_configs: vec![FeatureConfig::new(
                Dimension::D5,
                Granularity::Daily,
                Layout::Flattened,
            )],
            models: vec![classical(ClassicalKind::DecisionTree)],
            protocols: Protocols { forecast: true, early_curve: false },
            seeds: vec![4],
        };
        let dir = tempfile::tempdir().unwrap();
        let summary = run_grid(&config, dir.path()).unwrap();
        assert_eq!((summary.executed, summary.failed), (1, 0));
        let records = read_records(dir.path()).unwrap();
        assert!(records[0].forecast.is_some());
    }

    #[test]
    fn config_json_round_trips_across_all_families() {
        let text = r#"{
            "dataset": {"source": "generate", "num_users": 8, "seed": 7},
            "feature_configs": [
                {"dimension": "d35", "granularity": "daily", "layout": "sequence"}
            ],
            "models": [
                {"family": "classical", "kind": "xgboost_style_gbdt",
                 "personalization": "one_hot_id"},
                {"family": "neural", "kind": "transformer_encoder", "hidden": 32,
                 "depth": 2, "heads": 4, "kernel": 3, "dropout": 0.1,
                 "personalization": {"mode": "agnostic"},
                 "loss": {"kind": "cross_entropy"},
                 "optimizer": {"epochs": 5}, "seed": 0},
                {"family": "llm", "strategy": "few_shot_recency", "k": 3,
                 "user_aware": true}
            ],
            "seeds": [1, 2]
        }"#;
        let config: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(config.cells().len(), 6);
        assert_eq!(config.protocols, Protocols::default());
        match &config.models[2] {
            ModelSpec::Llm(s) => {
                assert_eq!(s.strategy, Strategy::FewShotRecency { k: 3 });
                assert!(s.user_aware);
                assert_eq!(s.client, LlmClientSpec::Mock);
            }
            other => panic!("wrong family: {other:?}"),
        }
        let round: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&config).unwrap()).unwrap();
        assert_eq!(round, config);
    }

    #[test]
    fn run_cell_executes_a_single_index() {
        let config = two_by_two_by_three();
        let dir = tempfile::tempdir().unwrap();
        let record = run_cell(&config, dir.path(), 3).unwrap();
        assert_eq!(record.status, RunStatus::Ok);
        assert_eq!(record.cell, config.cells()[3]);
        assert_eq!(read_records(dir.path()).unwrap().len(), 1);
        assert!(matches!(
            run_cell(&config, dir.path(), 12),
            Err(ExpError::Config(_))
        ));
    }

    #[test]
    fn report_covers_every_group_and_failure() {
        let config = two_by_two_by_three();
        let dir = tempfile::tempdir().unwrap();
        run_grid(&config, dir.path()).unwrap();
        let records = read_records(dir.path()).unwrap();
        let tables = report_tables(&records);
        assert!(tables.markdown.contains("| logistic_regression | d35-daily-aggregated | 3/3 |"));
        assert!(tables.markdown.contains("| decision_tree | d5-daily-aggregated | 3/3 |"));
        assert!(tables.markdown.contains("T=14"));
        // Header plus one forecast row and eight curve rows per record.
        assert_eq!(tables.csv.lines().count(), 1 + 12 * 9);
    }
}
