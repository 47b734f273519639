//! Per-class behavioral statistics injected into prompts as quantitative
//! priors.
//!
//! Each training window is summarized by its per-feature mean over the 14
//! days; class statistics are the mean and population variance of those
//! window summaries. Population statistics pool every training window;
//! individual statistics use one participant's training windows only, so
//! classes that participant never exhibited are absent and flagged.

use crate::data::{Dataset, SeverityLevel, NUM_CLASSES};
use crate::error::LlmError;
use crate::schema::FeatureSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsLevel {
    Individual,
    Population,
}

/// Mean/variance per feature for one severity class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureStats {
    /// Training windows the statistics were computed from.
    pub windows: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatistics {
    pub level: StatsLevel,
    /// Target participant for individual-level statistics.
    pub participant: Option<String>,
    /// Feature display names, matching mean/variance order.
    pub columns: Vec<String>,
    /// Indexed by severity rank; `None` when the class is unrepresented.
    pub per_class: [Option<ClassFeatureStats>; NUM_CLASSES],
}

pub fn population_statistics(
    dataset: &Dataset,
    train: &[usize],
    schema: &FeatureSchema,
) -> Result<ClassStatistics, LlmError> {
    if train.is_empty() {
        return Err(LlmError::EmptySplit);
    }
    Ok(ClassStatistics {
        level: StatsLevel::Population,
        participant: None,
        columns: display_columns(schema),
        per_class: accumulate(dataset, train.iter().copied()),
    })
}

pub fn individual_statistics(
    dataset: &Dataset,
    train: &[usize],
    participant: &str,
    schema: &FeatureSchema,
) -> Result<ClassStatistics, LlmError> {
    let own: Vec<usize> = train
        .iter()
        .copied()
        .filter(|&i| dataset.sample(i).participant_id == participant)
        .collect();
    if own.is_empty() {
        return Err(LlmError::EmptyHistory(participant.to_string()));
    }
    Ok(ClassStatistics {
        level: StatsLevel::Individual,
        participant: Some(participant.to_string()),
        columns: display_columns(schema),
        per_class: accumulate(dataset, own.into_iter()),
    })
}

fn display_columns(schema: &FeatureSchema) -> Vec<String> {
    schema
        .features
        .iter()
        .map(|f| {
            if f.display.trim().is_empty() {
                f.name.clone()
            } else {
                f.display.clone()
            }
        })
        .collect()
}

fn accumulate(
    dataset: &Dataset,
    windows: impl Iterator<Item = usize>,
) -> [Option<ClassFeatureStats>; NUM_CLASSES] {
    let dim = crate::schema::NUM_FEATURES;
    let mut count = [0usize; NUM_CLASSES];
    let mut sum = vec![vec![0.0f64; dim]; NUM_CLASSES];
    let mut sum_sq = vec![vec![0.0f64; dim]; NUM_CLASSES];
    for i in windows {
        let w = dataset.sample(i);
        let c = w.label.rank();
        count[c] += 1;
        for (f, (s, sq)) in sum[c].iter_mut().zip(sum_sq[c].iter_mut()).enumerate() {
            let m: f64 = w.days.iter().map(|d| d.features[f]).sum::<f64>() / w.days.len() as f64;
            *s += m;
            *sq += m * m;
        }
    }
    std::array::from_fn(|c| {
        if count[c] == 0 {
            return None;
        }
        let n = count[c] as f64;
        let mean: Vec<f64> = sum[c].iter().map(|s| s / n).collect();
        let variance: Vec<f64> = sum_sq[c]
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0))
            .collect();
        Some(ClassFeatureStats {
            windows: count[c],
            mean,
            variance,
        })
    })
}

impl ClassStatistics {
    /// Severity classes with at least one contributing window.
    pub fn present_classes(&self) -> Vec<SeverityLevel> {
        SeverityLevel::ALL
            .into_iter()
            .filter(|l| self.per_class[l.rank()].is_some())
            .collect()
    }

    /// Renders a markdown table: one row per feature, a mean and variance
    /// column per represented class, and a note naming absent classes.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let scope = match self.level {
            StatsLevel::Individual => "this participant's training history",
            StatsLevel::Population => "all participants' training history",
        };
        out.push_str(&format!(
            "Per-class feature statistics computed from {scope}:\n"
        ));
        let absent: Vec<&str> = SeverityLevel::ALL
            .iter()
            .filter(|l| self.per_class[l.rank()].is_none())
            .map(|l| l.name())
            .collect();
        if !absent.is_empty() {
            out.push_str(&format!(
                "No training windows for: {}. Those classes are omitted below.\n",
                absent.join(", ")
            ));
        }
        let present = self.present_classes();
        out.push_str("| feature");
        for l in &present {
            let windows = self.per_class[l.rank()].as_ref().unwrap().windows;
            out.push_str(&format!(" | {} mean (n={windows}) | {} variance", l, l));
        }
        out.push_str(" |\n| ---");
        for _ in &present {
            out.push_str(" | --- | ---");
        }
        out.push_str(" |\n");
        for (f, name) in self.columns.iter().enumerate() {
            out.push_str(&format!("| {}", name.replace(['|', '\n'], " ")));
            for l in &present {
                let s = self.per_class[l.rank()].as_ref().unwrap();
                out.push_str(&format!(" | {:.2} | {:.2}", s.mean[f], s.variance[f]));
            }
            out.push_str(" |\n");
        }
        out
    }
}
