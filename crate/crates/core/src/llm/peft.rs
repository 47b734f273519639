//! Export of training windows as prompt/completion pairs for
//! parameter-efficient fine-tuning.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::prompt::{PromptContext, Strategy};
use crate::data::WINDOW_DAYS;
use crate::error::LlmError;

/// One fine-tuning pair. `id` is `"{participant}-{start_day}"`, unique
/// because a user's windows start on distinct days.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeftRecord {
    pub id: String,
    pub user: String,
    pub prompt: String,
    pub completion: String,
}

/// Builds one record per training window: the zero-shot prompt over the full
/// window against its observed label. Records follow `ctx.train` order.
pub fn export_peft_records(ctx: &PromptContext<'_>) -> Result<Vec<PeftRecord>, LlmError> {
    if ctx.train.is_empty() {
        return Err(LlmError::EmptySplit);
    }
    let mut records = Vec::with_capacity(ctx.train.len());
    for &i in ctx.train {
        let w = ctx.dataset.sample(i);
        let built = ctx.build_prompt(Strategy::ZeroShot, w, WINDOW_DAYS)?;
        records.push(PeftRecord {
            id: format!("{}-{}", w.participant_id, w.start_day),
            user: w.participant_id.clone(),
            prompt: built.bundle.render(),
            completion: w.label.to_string(),
        });
    }
    Ok(records)
}

/// Writes records as JSON Lines, one object per line.
pub fn write_peft_jsonl(records: &[PeftRecord], mut out: impl Write) -> Result<(), LlmError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| LlmError::Io(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| LlmError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn read_peft_jsonl(input: impl BufRead) -> Result<Vec<PeftRecord>, LlmError> {
    let mut records = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| LlmError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| LlmError::Io(e.to_string()))?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SeverityLevel;
    use crate::features::{
        fit_normalizer, CategoryMap, Dimension, FeatureConfig, Granularity, Layout, Normalizer,
    };
    use crate::llm::prompt::PromptBundle;
    use crate::schema::FeatureSchema;
    use crate::split::split_user_temporal;
    use crate::syngen::{generate, GeneratorConfig};
    use std::collections::HashSet;
    use std::io::BufReader;

    struct Fixture {
        ds: crate::data::Dataset,
        train: Vec<usize>,
        norm: Normalizer,
    }

    fn fixture() -> Fixture {
        let ds = generate(&GeneratorConfig {
            num_users: 4,
            samples_per_user: (6, 7),
            class_proportions: [0.25; 4],
            separability: 1.0,
            seed: 77,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let split = split_user_temporal(&ds).unwrap();
        let norm = fit_normalizer(&ds, &split.train).unwrap();
        Fixture {
            ds,
            train: split.train,
            norm,
        }
    }

    fn ctx(f: &Fixture, user_aware: bool) -> PromptContext<'_> {
        PromptContext {
            dataset: &f.ds,
            train: &f.train,
            config: FeatureConfig::new(Dimension::D35, Granularity::Daily, Layout::Sequence),
            schema: FeatureSchema::canonical(),
            map: CategoryMap::canonical(),
            normalizer: &f.norm,
            user_aware,
            patterns: None,
        }
    }

    #[test]
    fn one_record_per_training_window_with_unique_ids() {
        let f = fixture();
        let records = export_peft_records(&ctx(&f, false)).unwrap();
        assert_eq!(records.len(), f.train.len());
        let ids: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids.len(), records.len());
        for (r, &i) in records.iter().zip(&f.train) {
            let w = f.ds.sample(i);
            assert_eq!(r.user, w.participant_id);
            assert_eq!(r.id, format!("{}-{}", w.participant_id, w.start_day));
            assert_eq!(r.completion, w.label.to_string());
            assert!(SeverityLevel::from_name(&r.completion).is_some());
        }
    }

    #[test]
    fn prompts_parse_back_into_bundles() {
        let f = fixture();
        let records = export_peft_records(&ctx(&f, false)).unwrap();
        for r in &records {
            let bundle = PromptBundle::parse(&r.prompt).unwrap();
            assert!(bundle.context_block.is_empty());
            // Full window: every day appears as a row.
            assert_eq!(
                bundle.behavior_table.matches("| Day ").count(),
                WINDOW_DAYS
            );
        }
    }

    #[test]
    fn user_aware_prompts_name_the_user_exactly_once() {
        let f = fixture();
        let records = export_peft_records(&ctx(&f, true)).unwrap();
        for r in &records {
            assert_eq!(r.prompt.matches(&r.user).count(), 1, "{}", r.id);
        }
    }

    #[test]
    fn jsonl_round_trips() {
        let f = fixture();
        let records = export_peft_records(&ctx(&f, false)).unwrap();
        let mut buf = Vec::new();
        write_peft_jsonl(&records, &mut buf).unwrap();
        assert_eq!(
            buf.iter().filter(|&&b| b == b'\n').count(),
            records.len(),
            "one line per record"
        );
        let back = read_peft_jsonl(BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let f = fixture();
        let empty: Vec<usize> = Vec::new();
        let c = PromptContext {
            train: &empty,
            ..ctx(&f, false)
        };
        assert!(matches!(export_peft_records(&c), Err(LlmError::EmptySplit)));
    }
}
