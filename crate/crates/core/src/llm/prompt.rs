//! Prompt assembly for text-based forecasting.
//!
//! Six strategies decide what goes into the context block: nothing
//! (zero-shot), labeled examples picked by recency or by cosine similarity,
//! per-class statistics at the individual or population level, or injected
//! behavioral pattern summaries. Assembly is a pure function of its inputs,
//! so identical inputs render byte-identical prompts, and the context only
//! ever draws on the supplied training history.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::serialize::serialize_window;
use super::stats::{individual_statistics, population_statistics};
use crate::data::{Dataset, SampleWindow, NUM_CLASSES};
use crate::error::LlmError;
use crate::features::{CategoryMap, FeatureConfig, Layout, Normalizer};
use crate::schema::FeatureSchema;

/// Default number of in-context examples when a strategy does not say.
pub const DEFAULT_FEW_SHOT_K: usize = 3;

/// The four texts that make up one rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instruction: String,
    /// Strategy-dependent knowledge; empty for zero-shot.
    pub context_block: String,
    /// Markdown behavior table of the target window prefix.
    pub behavior_table: String,
    pub answer_format_instruction: String,
}

const SECTION_TASK: &str = "## Task";
const SECTION_CONTEXT: &str = "## Context";
const SECTION_BEHAVIOR: &str = "## Behavior";
const SECTION_ANSWER: &str = "## Answer format";

impl PromptBundle {
    /// Renders the bundle as the prompt text sent to a client. Sections are
    /// delimited by markdown headers; the context section is omitted when
    /// empty.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut push = |header: &str, body: &str| {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(header);
            out.push('\n');
            out.push_str(body);
            out.push('\n');
        };
        push(SECTION_TASK, &self.system_instruction);
        if !self.context_block.is_empty() {
            push(SECTION_CONTEXT, &self.context_block);
        }
        push(SECTION_BEHAVIOR, &self.behavior_table);
        push(SECTION_ANSWER, &self.answer_format_instruction);
        out
    }

    /// Parses a rendered prompt back into its sections. Best-effort inverse
    /// of [`render`](Self::render): section content that itself contains a
    /// section header line cannot round-trip.
    pub fn parse(text: &str) -> Result<PromptBundle, LlmError> {
        let mut sections: Vec<(&str, String)> = Vec::new();
        for line in text.lines() {
            if matches!(
                line,
                SECTION_TASK | SECTION_CONTEXT | SECTION_BEHAVIOR | SECTION_ANSWER
            ) {
                if sections.iter().any(|(h, _)| *h == line) {
                    return Err(LlmError::Prompt(format!("duplicate section {line:?}")));
                }
                sections.push((line, String::new()));
            } else if let Some((_, body)) = sections.last_mut() {
                if !body.is_empty() {
                    body.push('\n');
                }
                body.push_str(line);
            } else if !line.trim().is_empty() {
                return Err(LlmError::Prompt(format!(
                    "content before the first section: {line:?}"
                )));
            }
        }
        let get = |header: &str| {
            sections
                .iter()
                .find(|(h, _)| *h == header)
                .map(|(_, b)| b.trim_end().to_string())
        };
        let require = |header: &str| {
            get(header).ok_or_else(|| LlmError::Prompt(format!("missing section {header:?}")))
        };
        Ok(PromptBundle {
            system_instruction: require(SECTION_TASK)?,
            context_block: get(SECTION_CONTEXT).unwrap_or_default(),
            behavior_table: require(SECTION_BEHAVIOR)?,
            answer_format_instruction: require(SECTION_ANSWER)?,
        })
    }
}

/// Free-text behavioral pattern summaries, one per severity class, produced
/// by an external summarizer and injected verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternKnowledge {
    /// Identifier of the model that wrote the summaries.
    pub provenance: String,
    /// Indexed by severity rank.
    pub per_class: [String; NUM_CLASSES],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    ZeroShot,
    FewShotRecency { k: usize },
    FewShotSimilarity { k: usize },
    StatisticalIndividual,
    StatisticalPopulation,
    Pattern,
}

impl Strategy {
    pub const ALL_NAMES: [&'static str; 6] = [
        "zero_shot",
        "few_shot_recency",
        "few_shot_similarity",
        "statistical_individual",
        "statistical_population",
        "pattern",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::ZeroShot => "zero_shot",
            Strategy::FewShotRecency { .. } => "few_shot_recency",
            Strategy::FewShotSimilarity { .. } => "few_shot_similarity",
            Strategy::StatisticalIndividual => "statistical_individual",
            Strategy::StatisticalPopulation => "statistical_population",
            Strategy::Pattern => "pattern",
        }
    }

    /// The six strategies with default parameters.
    pub fn all_default() -> Vec<Strategy> {
        vec![
            Strategy::ZeroShot,
            Strategy::FewShotRecency { k: DEFAULT_FEW_SHOT_K },
            Strategy::FewShotSimilarity { k: DEFAULT_FEW_SHOT_K },
            Strategy::StatisticalIndividual,
            Strategy::StatisticalPopulation,
            Strategy::Pattern,
        ]
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self {
            Strategy::FewShotRecency { k } | Strategy::FewShotSimilarity { k } if *k == 0 => {
                Err(LlmError::InvalidStrategy(format!(
                    "{} needs k >= 1",
                    self.name()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Everything prompt assembly may draw on: the training history and the
/// representation settings. Holds no test-split state by construction.
pub struct PromptContext<'a> {
    pub dataset: &'a Dataset,
    /// Training window indices; the only windows whose content may enter a
    /// context block.
    pub train: &'a [usize],
    pub config: FeatureConfig,
    pub schema: &'a FeatureSchema,
    pub map: &'a CategoryMap,
    pub normalizer: &'a Normalizer,
    /// Insert the participant id into the task header.
    pub user_aware: bool,
    /// Required by the pattern strategy.
    pub patterns: Option<&'a PatternKnowledge>,
}

/// A built prompt plus anything the caller should know about how it was
/// built (currently only few-shot fallbacks).
#[derive(Debug, Clone)]
pub struct BuiltPrompt {
    pub bundle: PromptBundle,
    pub warnings: Vec<String>,
}

impl PromptContext<'_> {
    /// Builds the prompt for forecasting `target`'s severity from its first
    /// `t` days.
    pub fn build_prompt(
        &self,
        strategy: Strategy,
        target: &SampleWindow,
        t: usize,
    ) -> Result<BuiltPrompt, LlmError> {
        strategy.validate()?;
        if self.config.layout != Layout::Sequence {
            return Err(LlmError::SequenceLayoutRequired(format!("{}", self.config)));
        }
        let behavior_table = self.table(target, t)?;
        let mut warnings = Vec::new();

        let context_block = match strategy {
            Strategy::ZeroShot => String::new(),
            Strategy::FewShotRecency { k } | Strategy::FewShotSimilarity { k } => {
                let history = self.user_history(&target.participant_id);
                if history.is_empty() {
                    warnings.push(format!(
                        "participant {} has no training windows; fell back to zero-shot",
                        target.participant_id
                    ));
                    String::new()
                } else {
                    let chosen = match strategy {
                        Strategy::FewShotRecency { .. } => {
                            // Latest k, kept in chronological order.
                            history[history.len().saturating_sub(k)..].to_vec()
                        }
                        _ => self.most_similar(&history, target, t, k)?,
                    };
                    self.example_block(&chosen, t)?
                }
            }
            Strategy::StatisticalIndividual => individual_statistics(
                self.dataset,
                self.train,
                &target.participant_id,
                self.schema,
            )?
            .to_markdown()
            .trim_end()
            .to_string(),
            Strategy::StatisticalPopulation => {
                population_statistics(self.dataset, self.train, self.schema)?
                    .to_markdown()
                    .trim_end()
                    .to_string()
            }
            Strategy::Pattern => {
                let patterns = self.patterns.ok_or(LlmError::MissingPatterns)?;
                let mut block = format!(
                    "Known behavioral patterns per severity level (summarized by {}):",
                    patterns.provenance
                );
                for level in crate::data::SeverityLevel::ALL {
                    block.push_str(&format!(
                        "\n\n{}: {}",
                        level,
                        patterns.per_class[level.rank()].trim()
                    ));
                }
                block
            }
        };

        let id_header = if self.user_aware {
            format!("You are analyzing participant {}. ", target.participant_id)
        } else {
            String::new()
        };
        let system_instruction = format!(
            "{id_header}The table below records a participant's recent smartphone sensing \
             behavior, one row per observed period. Forecast the participant's mental-health \
             severity level for the week after the last observed period."
        );
        let answer_format_instruction =
            "Respond with exactly one word: Normal, Mild, Moderate, or Severe.".to_string();

        Ok(BuiltPrompt {
            bundle: PromptBundle {
                system_instruction,
                context_block,
                behavior_table,
                answer_format_instruction,
            },
            warnings,
        })
    }

    fn table(&self, window: &SampleWindow, t: usize) -> Result<String, LlmError> {
        Ok(serialize_window(
            window,
            t,
            self.config,
            self.schema,
            self.map,
            Some(self.normalizer),
        )?
        .trim_end()
        .to_string())
    }

    /// The participant's training windows, ascending by start day.
    fn user_history(&self, participant: &str) -> Vec<usize> {
        let in_train: HashSet<usize> = self.train.iter().copied().collect();
        self.dataset
            .user_samples(participant)
            .iter()
            .copied()
            .filter(|i| in_train.contains(i))
            .collect()
    }

    /// Top-k history windows by cosine similarity between flattened
    /// normalized `t`-day prefixes, most similar first. Ties break toward
    /// the earlier window.
    fn most_similar(
        &self,
        history: &[usize],
        target: &SampleWindow,
        t: usize,
        k: usize,
    ) -> Result<Vec<usize>, LlmError> {
        let query = self.prefix_vector(target, t)?;
        let mut scored: Vec<(f64, usize)> = history
            .iter()
            .map(|&i| {
                self.prefix_vector(self.dataset.sample(i), t)
                    .map(|v| (cosine(&query, &v), i))
            })
            .collect::<Result<_, _>>()?;
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
    }

    fn prefix_vector(&self, window: &SampleWindow, t: usize) -> Result<Vec<f64>, LlmError> {
        let tensor = crate::features::represent(
            window,
            t,
            self.normalizer,
            self.map,
            self.config,
            true,
        )?;
        Ok(tensor.values)
    }

    fn example_block(&self, chosen: &[usize], t: usize) -> Result<String, LlmError> {
        let mut block = String::from(
            "Labeled examples from the same participant's training history:",
        );
        for (n, &i) in chosen.iter().enumerate() {
            let w = self.dataset.sample(i);
            block.push_str(&format!(
                "\n\nExample {}:\n{}\nAssessment: {}",
                n + 1,
                self.table(w, t)?,
                w.label
            ));
        }
        Ok(block)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
