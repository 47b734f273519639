//! User-level temporal split: every participant contributes the earliest 70%
//! of their windows to train, the next 10% to validation, and the final 20%
//! to test. Chronology is never shuffled, so the test windows of each user
//! strictly postdate their train and validation windows.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::SplitError;

/// Minimum windows per user for a 7:1:2 split to be well defined.
pub const MIN_SAMPLES_PER_USER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Sample indices (into the dataset) per split, each ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitAssignment {
    pub fn role_of(&self, idx: usize) -> Option<SplitRole> {
        if self.train.binary_search(&idx).is_ok() {
            Some(SplitRole::Train)
        } else if self.val.binary_search(&idx).is_ok() {
            Some(SplitRole::Val)
        } else if self.test.binary_search(&idx).is_ok() {
            Some(SplitRole::Test)
        } else {
            None
        }
    }

    pub fn indices(&self, role: SplitRole) -> &[usize] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Val => &self.val,
            SplitRole::Test => &self.test,
        }
    }
}

/// Per-user split sizes for `n` windows: floor(0.7n) / floor(0.1n) /
/// remainder. A user whose validation share floors to zero still gets one
/// validation window, taken from the train share.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let mut n_train = n * 7 / 10;
    let mut n_val = n / 10;
    if n_val == 0 && n >= MIN_SAMPLES_PER_USER {
        n_train -= 1;
        n_val = 1;
    }
    (n_train, n_val, n - n_train - n_val)
}

/// Splits every user's chronologically ordered windows 7:1:2. Users with
/// fewer than [`MIN_SAMPLES_PER_USER`] windows make the split ill defined and
/// are reported together in the error.
pub fn split_user_temporal(dataset: &Dataset) -> Result<SplitAssignment, SplitError> {
    if dataset.is_empty() {
        return Err(SplitError::EmptyDataset);
    }
    let too_few: Vec<String> = dataset
        .users()
        .filter(|u| dataset.user_samples(u).len() < MIN_SAMPLES_PER_USER)
        .map(str::to_string)
        .collect();
    if !too_few.is_empty() {
        return Err(SplitError::TooFewSamples {
            min: MIN_SAMPLES_PER_USER,
            users: too_few,
        });
    }

    let mut assignment = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for user in dataset.users() {
        let idxs = dataset.user_samples(user);
        let (n_train, n_val, _) = split_sizes(idxs.len());
        assignment.train.extend_from_slice(&idxs[..n_train]);
        assignment.val.extend_from_slice(&idxs[n_train..n_train + n_val]);
        assignment.test.extend_from_slice(&idxs[n_train + n_val..]);
    }
    assignment.train.sort_unstable();
    assignment.val.sort_unstable();
    assignment.test.sort_unstable();
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Provenance, SampleWindow, WINDOW_DAYS};
    use crate::schema::NUM_FEATURES;
    use proptest::prelude::*;

    fn window(user: &str, start: u32) -> SampleWindow {
        let days = (0..WINDOW_DAYS as u32)
            .map(|o| crate::data::DailySensingRecord {
                participant_id: user.to_string(),
                day_index: start + o,
                features: vec![0.25; NUM_FEATURES],
            })
            .collect();
        SampleWindow::new(user, start, days, 1).unwrap()
    }

    fn dataset(counts: &[(&str, usize)]) -> Dataset {
        let mut samples = Vec::new();
        for (user, n) in counts {
            for k in 0..*n {
                samples.push(window(user, (k * WINDOW_DAYS) as u32));
            }
        }
        Dataset::new(samples, Provenance::Synthetic).unwrap()
    }

    #[test]
    fn sizes_match_rounding_rule() {
        assert_eq!(split_sizes(206), (144, 20, 42));
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(3), (1, 1, 1));
        assert_eq!(split_sizes(9), (5, 1, 3));
        assert_eq!(split_sizes(4), (1, 1, 2));
    }

    #[test]
    fn splits_each_user_temporally() {
        let ds = dataset(&[("u1", 10), ("u2", 3)]);
        let split = split_user_temporal(&ds).unwrap();
        assert_eq!(split.train.len(), 7 + 1);
        assert_eq!(split.val.len(), 1 + 1);
        assert_eq!(split.test.len(), 2 + 1);

        for user in ds.users() {
            let latest_train = ds
                .user_samples(user)
                .iter()
                .filter(|i| split.train.contains(i))
                .map(|&i| ds.sample(i).start_day)
                .max()
                .unwrap();
            let earliest_val = ds
                .user_samples(user)
                .iter()
                .filter(|i| split.val.contains(i))
                .map(|&i| ds.sample(i).start_day)
                .min()
                .unwrap();
            let earliest_test = ds
                .user_samples(user)
                .iter()
                .filter(|i| split.test.contains(i))
                .map(|&i| ds.sample(i).start_day)
                .min()
                .unwrap();
            assert!(latest_train < earliest_val);
            assert!(earliest_val < earliest_test);
        }
    }

    #[test]
    fn too_few_samples_lists_offending_users() {
        let ds = dataset(&[("ok", 5), ("tiny_a", 2), ("tiny_b", 1)]);
        match split_user_temporal(&ds) {
            Err(SplitError::TooFewSamples { min, users }) => {
                assert_eq!(min, MIN_SAMPLES_PER_USER);
                assert_eq!(users, vec!["tiny_a".to_string(), "tiny_b".to_string()]);
            }
            other => panic!("expected TooFewSamples, got {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset::new(vec![], Provenance::Synthetic).unwrap();
        assert!(matches!(
            split_user_temporal(&ds),
            Err(SplitError::EmptyDataset)
        ));
    }

    proptest! {
        /// The three splits partition the dataset and every user appears in
        /// all three with chronology preserved.
        #[test]
        fn split_partitions_and_preserves_chronology(
            counts in proptest::collection::vec(3usize..20, 1..8)
        ) {
            let named: Vec<(String, usize)> =
                counts.iter().enumerate().map(|(i, &n)| (format!("u{i}"), n)).collect();
            let refs: Vec<(&str, usize)> =
                named.iter().map(|(u, n)| (u.as_str(), *n)).collect();
            let ds = dataset(&refs);
            let split = split_user_temporal(&ds).unwrap();

            let mut all: Vec<usize> = split
                .train.iter().chain(&split.val).chain(&split.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());

            for user in ds.users() {
                let idxs = ds.user_samples(user);
                let (n_train, n_val, n_test) = split_sizes(idxs.len());
                prop_assert!(n_train >= 1 && n_val >= 1 && n_test >= 1);
                for (k, i) in idxs.iter().enumerate() {
                    let role = split.role_of(*i).unwrap();
                    let expected = if k < n_train {
                        SplitRole::Train
                    } else if k < n_train + n_val {
                        SplitRole::Val
                    } else {
                        SplitRole::Test
                    };
                    prop_assert_eq!(role, expected);
                }
            }
        }
    }
}
