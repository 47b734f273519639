//! Forecasting with instruction-following language models.
//!
//! A window's behavior becomes a markdown table, a strategy decides what
//! supporting knowledge rides along (labeled examples, per-class
//! statistics, or pattern summaries), and a completion client answers with
//! a severity level. Everything up to the client call is deterministic, and
//! transcripts plus a replay client make the client call repeatable too.
//! The [`encoder`] submodule pretrains a window embedder by masked
//! reconstruction for similarity search over prompts.

mod client;
mod encoder;
mod forecast;
mod parse;
mod peft;
mod prompt;
mod serialize;
mod stats;

#[cfg(test)]
mod tests;

pub use client::{
    complete_batch, prompt_sha256, read_transcript, BatchRequest, BatchResult, HttpClient,
    HttpClientConfig, LlmClient, MockClient, ReplayClient, TranscriptRecord, TranscriptWriter,
};
pub use encoder::{
    masked_reconstruction_error, pretrain_prompt_encoder, EncoderSpec, PretrainOutcome,
    PromptEncoder,
};
pub use forecast::LlmForecaster;
pub use parse::parse_response;
pub use peft::{export_peft_records, read_peft_jsonl, write_peft_jsonl, PeftRecord};
pub use prompt::{
    BuiltPrompt, PatternKnowledge, PromptBundle, PromptContext, Strategy, DEFAULT_FEW_SHOT_K,
};
pub use serialize::{parse_behavior_table, serialize_window, BehaviorTable, TABLE_DECIMALS};
pub use stats::{
    individual_statistics, population_statistics, ClassFeatureStats, ClassStatistics, StatsLevel,
};
