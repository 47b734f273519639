//! Canonical daily-feature schema: the 35 named behavioral features, their
//! units, valid ranges, and the human-readable display names used when
//! behavior is rendered as text.
//!
//! The schema ships as an embedded JSON asset so the feature set is explicit
//! and overridable without recompiling; custom schemas can be loaded from
//! disk for non-default imports.

use std::collections::HashMap;
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::SchemaError;

/// Number of daily behavioral features in the canonical schema.
pub const NUM_FEATURES: usize = 35;

/// Value type of a feature, used for range validation and generator clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Minutes per day, nonnegative.
    DurationMin,
    /// Event count per day, nonnegative.
    Count,
    /// Fraction of time in [0, 1].
    Proportion,
    /// Hour-of-day style value (may exceed 24 for events past midnight).
    ClockHour,
}

/// One feature definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
    pub unit: String,
    /// Human-readable rename with units, used for text serialization.
    pub display: String,
    /// Inclusive valid range; values are clipped here by the generator and
    /// validated here on construction.
    pub range: (f64, f64),
    /// Hand-set plausible daily mean (generator fixture).
    pub mean: f64,
    /// Hand-set plausible daily std (generator fixture).
    pub std: f64,
}

/// The full ordered feature schema. Feature order is significant: vectors,
/// CSV columns and tensors all follow it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub schema_version: u32,
    #[serde(default)]
    pub description: String,
    pub features: Vec<FeatureDef>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

static CANONICAL: LazyLock<FeatureSchema> = LazyLock::new(|| {
    FeatureSchema::from_json(include_str!("../assets/feature_schema.json"))
        .expect("embedded feature schema is valid")
});

impl FeatureSchema {
    /// The embedded canonical 35-feature schema.
    pub fn canonical() -> &'static FeatureSchema {
        &CANONICAL
    }

    pub fn from_json(json: &str) -> Result<FeatureSchema, SchemaError> {
        let mut schema: FeatureSchema =
            serde_json::from_str(json).map_err(|e| SchemaError::Parse(e.to_string()))?;
        schema.rebuild_index()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<FeatureSchema, SchemaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SchemaError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn rebuild_index(&mut self) -> Result<(), SchemaError> {
        self.index.clear();
        for (i, f) in self.features.iter().enumerate() {
            if self.index.insert(f.name.clone(), i).is_some() {
                return Err(SchemaError::DuplicateFeature(f.name.clone()));
            }
            if f.range.0 > f.range.1 {
                return Err(SchemaError::InvalidRange(f.name.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn def(&self, idx: usize) -> &FeatureDef {
        &self.features[idx]
    }

    /// Validates a value vector against kinds and ranges.
    /// Returns the name of the first offending feature.
    pub fn validate_values(&self, values: &[f64]) -> Result<(), SchemaError> {
        if values.len() != self.features.len() {
            return Err(SchemaError::WrongArity {
                expected: self.features.len(),
                got: values.len(),
            });
        }
        for (f, &v) in self.features.iter().zip(values) {
            if !v.is_finite() {
                return Err(SchemaError::NonFinite(f.name.clone()));
            }
            let ok = match f.kind {
                FeatureKind::Proportion => (0.0..=1.0).contains(&v),
                _ => v >= 0.0,
            };
            if !ok || v < f.range.0 || v > f.range.1 {
                return Err(SchemaError::OutOfRange {
                    feature: f.name.clone(),
                    value: v,
                });
            }
        }
        Ok(())
    }

    /// Clips a value into the feature's valid range.
    pub fn clip(&self, idx: usize, value: f64) -> f64 {
        let f = &self.features[idx];
        value.clamp(f.range.0, f.range.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_has_35_features() {
        let s = FeatureSchema::canonical();
        assert_eq!(s.len(), NUM_FEATURES);
        // Names from the published top-20 importance list must all be present.
        for name in [
            "sleep_duration",
            "act_running",
            "act_walking",
            "loc_home_dur",
            "act_on_bike",
            "act_still",
            "loc_home_audio_voice",
            "loc_workout_dur",
            "sleep_start",
            "loc_other_dorm_dur",
            "sleep_end",
            "act_on_foot",
            "loc_leisure_dur",
            "loc_study_dur",
            "loc_self_dorm_dur",
        ] {
            assert!(s.position(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn validation_rejects_out_of_range_proportion() {
        let s = FeatureSchema::canonical();
        let mut vals = vec![0.0; NUM_FEATURES];
        // sane defaults inside ranges
        for (i, f) in s.features.iter().enumerate() {
            vals[i] = f.mean.clamp(f.range.0, f.range.1);
        }
        s.validate_values(&vals).unwrap();

        let prop_idx = s.position("audio_voice_prop").unwrap();
        vals[prop_idx] = 1.5;
        let err = s.validate_values(&vals).unwrap_err();
        assert!(err.to_string().contains("audio_voice_prop"));
    }

    #[test]
    fn validation_rejects_wrong_arity() {
        let s = FeatureSchema::canonical();
        assert!(s.validate_values(&[1.0; 10]).is_err());
    }
}
