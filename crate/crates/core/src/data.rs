//! Domain types: severity levels, daily sensing records, two-week sample
//! windows, and the dataset container.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::schema::FeatureSchema;

/// Days per sample window (two weeks of sensing paired with one label).
pub const WINDOW_DAYS: usize = 14;

/// Number of severity classes.
pub const NUM_CLASSES: usize = 4;

/// Discretized PHQ-4 severity level, ordered from least to most severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SeverityLevel {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl SeverityLevel {
    pub const ALL: [SeverityLevel; NUM_CLASSES] = [
        SeverityLevel::Normal,
        SeverityLevel::Mild,
        SeverityLevel::Moderate,
        SeverityLevel::Severe,
    ];

    /// Ordinal rank 0..=3.
    pub fn rank(self) -> usize {
        match self {
            SeverityLevel::Normal => 0,
            SeverityLevel::Mild => 1,
            SeverityLevel::Moderate => 2,
            SeverityLevel::Severe => 3,
        }
    }

    pub fn from_rank(rank: usize) -> Option<SeverityLevel> {
        Self::ALL.get(rank).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SeverityLevel::Normal => "Normal",
            SeverityLevel::Mild => "Mild",
            SeverityLevel::Moderate => "Moderate",
            SeverityLevel::Severe => "Severe",
        }
    }

    /// Exact display-name lookup; free text goes through the llm parser.
    pub fn from_name(name: &str) -> Option<SeverityLevel> {
        Self::ALL.into_iter().find(|l| l.name() == name)
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps a total PHQ-4 score (0..=12) onto its severity bracket:
/// 0-3 Normal, 4-6 Mild, 7-9 Moderate, 10-12 Severe.
pub fn phq4_to_severity(score: i64) -> Result<SeverityLevel, DataError> {
    match score {
        0..=3 => Ok(SeverityLevel::Normal),
        4..=6 => Ok(SeverityLevel::Mild),
        7..=9 => Ok(SeverityLevel::Moderate),
        10..=12 => Ok(SeverityLevel::Severe),
        other => Err(DataError::Phq4OutOfRange(other)),
    }
}

/// One participant-day of the 35 behavioral features, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySensingRecord {
    pub participant_id: String,
    /// Days since the participant's first record (participant-relative, not
    /// a calendar date).
    pub day_index: u32,
    /// Feature values in canonical schema order.
    pub features: Vec<f64>,
}

impl DailySensingRecord {
    pub fn new(
        participant_id: impl Into<String>,
        day_index: u32,
        features: Vec<f64>,
        schema: &FeatureSchema,
    ) -> Result<Self, DataError> {
        schema.validate_values(&features)?;
        Ok(Self {
            participant_id: participant_id.into(),
            day_index,
            features,
        })
    }

    pub fn feature(&self, idx: usize) -> f64 {
        self.features[idx]
    }
}

/// Fourteen consecutive days of records plus the severity label observed at
/// the end of the window. The atomic dataset unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleWindow {
    pub participant_id: String,
    pub start_day: u32,
    pub days: Vec<DailySensingRecord>,
    /// The raw questionnaire total, retained alongside the discretized label.
    pub phq4_score: u8,
    pub label: SeverityLevel,
}

impl SampleWindow {
    pub fn new(
        participant_id: impl Into<String>,
        start_day: u32,
        days: Vec<DailySensingRecord>,
        phq4_score: u8,
    ) -> Result<Self, DataError> {
        let participant_id = participant_id.into();
        if days.len() != WINDOW_DAYS {
            return Err(DataError::WrongWindowLength {
                participant: participant_id,
                start_day,
                got: days.len(),
                expected: WINDOW_DAYS,
            });
        }
        for (offset, day) in days.iter().enumerate() {
            if day.participant_id != participant_id {
                return Err(DataError::MixedParticipants {
                    participant: participant_id,
                });
            }
            if day.day_index != start_day + offset as u32 {
                return Err(DataError::NonConsecutiveDays {
                    participant: participant_id,
                    start_day,
                });
            }
        }
        let label = phq4_to_severity(phq4_score as i64)?;
        Ok(Self {
            participant_id,
            start_day,
            days,
            phq4_score,
            label,
        })
    }

    /// The first `t` days of the window (the forecast protocols feed models
    /// truncated prefixes).
    pub fn prefix(&self, t: usize) -> &[DailySensingRecord] {
        &self.days[..t.min(self.days.len())]
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Synthetic,
    CesImport,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Synthetic => f.write_str("synthetic"),
            Provenance::CesImport => f.write_str("ces-import"),
        }
    }
}

/// Immutable collection of sample windows with a per-user index ordered by
/// start day. Construction validates per-user temporal ordering; afterwards
/// the dataset is safe for concurrent reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<SampleWindow>,
    /// participant id -> indices into `samples`, ascending by start_day.
    by_user: BTreeMap<String, Vec<usize>>,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<SampleWindow>, provenance: Provenance) -> Result<Self, DataError> {
        let mut by_user: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_user.entry(s.participant_id.clone()).or_default().push(i);
        }
        for (user, idxs) in &mut by_user {
            idxs.sort_by_key(|&i| samples[i].start_day);
            let strictly_increasing = idxs
                .windows(2)
                .all(|w| samples[w[0]].start_day < samples[w[1]].start_day);
            if !strictly_increasing {
                return Err(DataError::UnorderedWindows {
                    participant: user.clone(),
                });
            }
        }
        Ok(Self {
            samples,
            by_user,
            provenance,
        })
    }

    pub fn samples(&self) -> &[SampleWindow] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(|s| s.as_str())
    }

    pub fn num_users(&self) -> usize {
        self.by_user.len()
    }

    /// Sample indices for one user, ascending by start day.
    pub fn user_samples(&self, user: &str) -> &[usize] {
        self.by_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Stable user -> dense index mapping (sorted by participant id).
    pub fn user_index(&self) -> BTreeMap<String, usize> {
        self.by_user
            .keys()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect()
    }

    pub fn sample(&self, idx: usize) -> &SampleWindow {
        &self.samples[idx]
    }

    /// Content hash over every sample (ids, days, feature bits, labels).
    /// Stable across runs; used for checkpoint and result provenance.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update([self.provenance as u8]);
        h.update((self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            h.update(s.participant_id.as_bytes());
            h.update([0]);
            h.update(s.start_day.to_le_bytes());
            h.update([s.phq4_score]);
            for day in &s.days {
                for v in &day.features {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

/// Counts samples per severity level. The four counts sum to `dataset.len()`.
pub fn class_counts(dataset: &Dataset) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for s in dataset.samples() {
        counts[s.label.rank()] += 1;
    }
    counts
}

/// Counts labels in an arbitrary label slice (split-scoped counting).
pub fn label_counts(labels: &[SeverityLevel]) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.rank()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::NUM_FEATURES;

    fn record(user: &str, day: u32) -> DailySensingRecord {
        DailySensingRecord {
            participant_id: user.to_string(),
            day_index: day,
            features: vec![0.5; NUM_FEATURES],
        }
    }

    pub(crate) fn window(user: &str, start: u32, phq4: u8) -> SampleWindow {
        let days = (0..WINDOW_DAYS as u32)
            .map(|o| record(user, start + o))
            .collect();
        SampleWindow::new(user, start, days, phq4).unwrap()
    }

    #[test]
    fn phq4_bracket_boundaries() {
        assert_eq!(phq4_to_severity(0).unwrap(), SeverityLevel::Normal);
        assert_eq!(phq4_to_severity(3).unwrap(), SeverityLevel::Normal);
        assert_eq!(phq4_to_severity(4).unwrap(), SeverityLevel::Mild);
        assert_eq!(phq4_to_severity(6).unwrap(), SeverityLevel::Mild);
        assert_eq!(phq4_to_severity(7).unwrap(), SeverityLevel::Moderate);
        assert_eq!(phq4_to_severity(9).unwrap(), SeverityLevel::Moderate);
        assert_eq!(phq4_to_severity(10).unwrap(), SeverityLevel::Severe);
        assert_eq!(phq4_to_severity(12).unwrap(), SeverityLevel::Severe);
    }

    #[test]
    fn phq4_out_of_range_is_rejected_with_value() {
        let err = phq4_to_severity(13).unwrap_err();
        assert!(err.to_string().contains("13"));
        assert!(phq4_to_severity(-1).is_err());
    }

    #[test]
    fn phq4_total_and_monotone() {
        let mut last = SeverityLevel::Normal;
        for score in 0..=12 {
            let level = phq4_to_severity(score).unwrap();
            assert!(level >= last, "severity must be nondecreasing in score");
            last = level;
        }
    }

    #[test]
    fn window_requires_14_consecutive_days() {
        let days: Vec<_> = (0..13).map(|o| record("u1", o)).collect();
        assert!(matches!(
            SampleWindow::new("u1", 0, days, 2),
            Err(DataError::WrongWindowLength { got: 13, .. })
        ));

        let mut days: Vec<_> = (0..14).map(|o| record("u1", o)).collect();
        days[5].day_index = 99;
        assert!(matches!(
            SampleWindow::new("u1", 0, days, 2),
            Err(DataError::NonConsecutiveDays { .. })
        ));
    }

    #[test]
    fn class_counts_on_small_sets() {
        let empty = Dataset::new(vec![], Provenance::Synthetic).unwrap();
        assert_eq!(class_counts(&empty), [0, 0, 0, 0]);

        let one = Dataset::new(vec![window("u1", 0, 8)], Provenance::Synthetic).unwrap();
        assert_eq!(class_counts(&one), [0, 0, 1, 0]);
    }

    #[test]
    fn dataset_rejects_duplicate_start_days_per_user() {
        let samples = vec![window("u1", 0, 2), window("u1", 0, 5)];
        assert!(matches!(
            Dataset::new(samples, Provenance::Synthetic),
            Err(DataError::UnorderedWindows { .. })
        ));
    }
}
