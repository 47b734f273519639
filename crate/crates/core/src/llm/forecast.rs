//! Adapter that runs prompt-based strategies under the standard evaluation
//! protocols.

use super::client::{complete_batch, BatchRequest, LlmClient, TranscriptWriter};
use super::parse::parse_response;
use super::prompt::{PromptContext, Strategy};
use crate::data::Dataset;
use crate::error::{EvalError, LlmError};
use crate::eval::{Forecaster, Prediction};

/// Builds one prompt per test window, dispatches them through the client,
/// and parses the answers. Responses naming no level score as unparseable
/// rather than failing the run; client errors do fail it.
pub struct LlmForecaster<'a> {
    pub ctx: PromptContext<'a>,
    pub strategy: Strategy,
    pub client: &'a dyn LlmClient,
    pub max_in_flight: usize,
    pub transcript: Option<&'a TranscriptWriter>,
}

impl Forecaster for LlmForecaster<'_> {
    fn forecast(
        &self,
        dataset: &Dataset,
        windows: &[usize],
        t: usize,
    ) -> Result<Vec<Prediction>, EvalError> {
        // The context's training history must come from the dataset being
        // scored, or example lookups would silently cross datasets.
        if !std::ptr::eq(self.ctx.dataset, dataset) {
            return Err(EvalError::Forecast(
                "forecaster is bound to a different dataset".into(),
            ));
        }
        let mut requests = Vec::with_capacity(windows.len());
        for (i, &w) in windows.iter().enumerate() {
            let sample = dataset.sample(w);
            let built = self
                .ctx
                .build_prompt(self.strategy, sample, t)
                .map_err(|e| EvalError::Forecast(e.to_string()))?;
            for warning in &built.warnings {
                log::warn!("{warning}");
            }
            requests.push(BatchRequest {
                id: format!("{i}:{}:{}", sample.participant_id, sample.start_day),
                prompt: built.bundle.render(),
            });
        }
        let results = complete_batch(self.client, &requests, self.max_in_flight, self.transcript)
            .map_err(|e| EvalError::Forecast(e.to_string()))?;
        results
            .into_iter()
            .map(|r| match r.outcome {
                Ok(text) => Ok(match parse_response(&text) {
                    Ok(level) => Prediction::Label(level),
                    Err(LlmError::Unparseable(raw)) => {
                        log::warn!("unparseable response for {}: {raw:?}", r.id);
                        Prediction::Unparseable
                    }
                    Err(other) => return Err(EvalError::Forecast(other.to_string())),
                }),
                Err(msg) => Err(EvalError::Forecast(format!("request {}: {msg}", r.id))),
            })
            .collect()
    }
}
