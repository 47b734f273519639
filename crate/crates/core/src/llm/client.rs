//! Completion clients and batched dispatch.
//!
//! Experiments talk to a [`LlmClient`]; runs are made repeatable by logging
//! every exchange to a JSONL transcript keyed by prompt hash, which a
//! [`ReplayClient`] can serve back verbatim. The [`MockClient`] needs no
//! network and answers deterministically, echoing the label of the last
//! in-context example when one is present.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SeverityLevel;
use crate::error::LlmError;

pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;

    /// Label written into transcripts.
    fn model_name(&self) -> String;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Offline stand-in for a real model. If the prompt ends with labeled
/// examples, it parrots the last example's label; otherwise it answers with
/// a label chosen by hashing the prompt, so any change to prompt content
/// shows up as a (possibly) different answer.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockClient;

impl LlmClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let echoed = prompt
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Assessment: "))
            .and_then(|name| SeverityLevel::from_name(name.trim()));
        if let Some(level) = echoed {
            return Ok(format!("Based on similar records, the forecast is {level}."));
        }
        let level = SeverityLevel::ALL[(fnv1a(prompt.as_bytes()) % 4) as usize];
        Ok(format!("The forecast severity level is {level}."))
    }

    fn model_name(&self) -> String {
        "mock".into()
    }
}

fn io_err(e: impl std::fmt::Display) -> LlmError {
    LlmError::Io(e.to_string())
}

/// One prompt/response exchange. The prompt itself is stored only as a
/// hash; prompts are reproducible from the dataset and config, and keeping
/// them out makes transcripts small.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub id: String,
    pub prompt_sha256: String,
    pub model: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

/// Appends records to a JSONL file; safe to share across worker threads.
pub struct TranscriptWriter {
    inner: Mutex<BufWriter<File>>,
}

impl TranscriptWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let file = File::create(path).map_err(io_err)?;
        Ok(Self { inner: Mutex::new(BufWriter::new(file)) })
    }

    /// Writes and flushes one record, so a crashed run keeps what it paid
    /// for.
    pub fn append(&self, record: &TranscriptRecord) -> Result<(), LlmError> {
        let line = serde_json::to_string(record).map_err(io_err)?;
        let mut w = self.inner.lock().expect("transcript lock");
        writeln!(w, "{line}").map_err(io_err)?;
        w.flush().map_err(io_err)
    }
}

pub fn read_transcript(path: impl AsRef<Path>) -> Result<Vec<TranscriptRecord>, LlmError> {
    let path = path.as_ref();
    let at = |e: String| LlmError::Io(format!("{}: {e}", path.display()));
    let file = File::open(path).map_err(|e| at(e.to_string()))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| at(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| at(e.to_string()))?);
    }
    Ok(records)
}

/// Serves recorded responses keyed by prompt hash; unknown prompts fail
/// loudly instead of silently re-querying anything.
pub struct ReplayClient {
    by_hash: HashMap<String, String>,
}

impl ReplayClient {
    pub fn from_records(records: &[TranscriptRecord]) -> Self {
        let by_hash = records
            .iter()
            .filter_map(|r| {
                r.response
                    .as_ref()
                    .map(|resp| (r.prompt_sha256.clone(), resp.clone()))
            })
            .collect();
        Self { by_hash }
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        Ok(Self::from_records(&read_transcript(path)?))
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }
}

impl LlmClient for ReplayClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let hash = prompt_sha256(prompt);
        self.by_hash.get(&hash).cloned().ok_or_else(|| {
            LlmError::Client(format!("no recorded response for prompt {hash}"))
        })
    }

    fn model_name(&self) -> String {
        "replay".into()
    }
}

fn default_api_key_env() -> String {
    "LLM_API_KEY".into()
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    250
}

fn default_timeout_s() -> u64 {
    60
}

/// Settings for a chat-completions style HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token; requests
    /// go out unauthenticated when it is unset.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    /// Retries after the first attempt, on transport errors, 429 and 5xx.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// First retry delay; doubles per retry.
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

pub struct HttpClient {
    config: HttpClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_s)))
            .http_status_as_error(false)
            .build();
        let api_key = std::env::var(&config.api_key_env).ok();
        Self { config, agent: agent_config.into(), api_key }
    }

    fn attempt(&self, payload: &serde_json::Value) -> Result<String, RetryOutcome> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(payload)
            .map_err(|e| RetryOutcome::Retry(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(RetryOutcome::Retry(format!("http status {status}")));
        }
        if status >= 400 {
            return Err(RetryOutcome::Fatal(format!("http status {status}")));
        }
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| RetryOutcome::Fatal(format!("invalid response body: {e}")))?;
        extract_completion(&value).map_err(RetryOutcome::Fatal)
    }
}

enum RetryOutcome {
    Retry(String),
    Fatal(String),
}

fn extract_completion(value: &serde_json::Value) -> Result<String, String> {
    let choice = &value["choices"][0];
    choice["message"]["content"]
        .as_str()
        .or_else(|| choice["text"].as_str())
        .map(str::to_string)
        .ok_or_else(|| format!("response carries no completion text: {value}"))
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let payload = serde_json::json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut delay = self.config.initial_backoff_ms;
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(delay));
                delay = delay.saturating_mul(2);
            }
            match self.attempt(&payload) {
                Ok(text) => return Ok(text),
                Err(RetryOutcome::Fatal(msg)) => return Err(LlmError::Client(msg)),
                Err(RetryOutcome::Retry(msg)) => last = msg,
            }
        }
        Err(LlmError::Client(format!(
            "gave up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }

    fn model_name(&self) -> String {
        self.config.model.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRequest {
    pub id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchResult {
    pub id: String,
    /// Completion text, or the client error message.
    pub outcome: Result<String, String>,
}

/// Runs all requests through the client with at most `max_in_flight`
/// concurrent calls. Per-request failures land in their result instead of
/// aborting the batch. Results come back in request order regardless of
/// completion order.
pub fn complete_batch(
    client: &dyn LlmClient,
    requests: &[BatchRequest],
    max_in_flight: usize,
    transcript: Option<&TranscriptWriter>,
) -> Result<Vec<BatchResult>, LlmError> {
    if max_in_flight == 0 {
        return Err(LlmError::Client("max_in_flight must be >= 1".into()));
    }
    let mut seen = HashSet::new();
    for r in requests {
        if !seen.insert(r.id.as_str()) {
            return Err(LlmError::Client(format!("duplicate request id {:?}", r.id)));
        }
    }

    let slots: Vec<Mutex<Option<BatchResult>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    let cursor = AtomicUsize::new(0);
    let model = client.model_name();
    let log_failure = Mutex::new(None::<LlmError>);

    std::thread::scope(|scope| {
        for _ in 0..max_in_flight.min(requests.len().max(1)) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                let Some(req) = requests.get(i) else { break };
                let outcome = client.complete(&req.prompt).map_err(|e| e.to_string());
                if let Some(t) = transcript {
                    let record = TranscriptRecord {
                        id: req.id.clone(),
                        prompt_sha256: prompt_sha256(&req.prompt),
                        model: model.clone(),
                        response: outcome.as_ref().ok().cloned(),
                        error: outcome.as_ref().err().cloned(),
                    };
                    if let Err(e) = t.append(&record) {
                        log_failure.lock().expect("failure lock").get_or_insert(e);
                    }
                }
                *slots[i].lock().expect("slot lock") =
                    Some(BatchResult { id: req.id.clone(), outcome });
            });
        }
    });

    if let Some(e) = log_failure.into_inner().expect("failure lock") {
        return Err(e);
    }
    Ok(slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("all slots filled"))
        .collect())
}
