//! Scoring and evaluation protocols.
//!
//! Metrics: per-class precision / recall / F1 with supports, accuracy, and
//! macro-F1. Zero-denominator precision or recall is 0; classes with zero
//! gold support are excluded from macro-F1 (their supports are still
//! reported, so the exclusion is visible). Unparseable predictions (LLM
//! runs) count as wrong for the gold class and are tallied separately.
//!
//! Protocols: forecasting feeds models only the first week of each test
//! window (T=7, with the label a week away); the early-prediction curve
//! re-evaluates the same windows for every T in 7..=14.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SeverityLevel, NUM_CLASSES, WINDOW_DAYS};
use crate::error::EvalError;

/// First week of a window; the forecasting protocol's input length.
pub const FORECAST_INPUT_DAYS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    Label(SeverityLevel),
    /// Model output that names no severity level.
    Unparseable,
}

impl From<SeverityLevel> for Prediction {
    fn from(l: SeverityLevel) -> Self {
        Prediction::Label(l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Indexed by severity rank.
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub accuracy: f64,
    /// Unweighted mean F1 over classes with nonzero gold support.
    pub macro_f1: f64,
    pub unparseable: usize,
    pub total: usize,
}

/// Scores predictions against gold labels.
pub fn score(predictions: &[Prediction], gold: &[SeverityLevel]) -> Result<EvalReport, EvalError> {
    if predictions.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            gold: gold.len(),
        });
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    let mut missed = [0usize; NUM_CLASSES]; // unparseable per gold class
    let mut unparseable = 0usize;
    for (p, g) in predictions.iter().zip(gold) {
        match p {
            Prediction::Label(l) => confusion[g.rank()][l.rank()] += 1,
            Prediction::Unparseable => {
                missed[g.rank()] += 1;
                unparseable += 1;
            }
        }
    }

    let mut per_class = [ClassMetrics {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        support: 0,
    }; NUM_CLASSES];
    let mut correct = 0usize;
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c];
        let predicted: usize = (0..NUM_CLASSES).map(|g| confusion[g][c]).sum();
        let support: usize = confusion[c].iter().sum::<usize>() + missed[c];
        let precision = if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if support > 0 {
            tp as f64 / support as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class[c] = ClassMetrics {
            precision,
            recall,
            f1,
            support,
        };
        correct += tp;
    }

    let total = gold.len();
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let macro_f1 = if present.is_empty() {
        0.0
    } else {
        present.iter().map(|m| m.f1).sum::<f64>() / present.len() as f64
    };
    let accuracy = if total > 0 {
        correct as f64 / total as f64
    } else {
        0.0
    };
    Ok(EvalReport {
        per_class,
        accuracy,
        macro_f1,
        unparseable,
        total,
    })
}

/// Scores plain label predictions.
pub fn score_labels(
    predictions: &[SeverityLevel],
    gold: &[SeverityLevel],
) -> Result<EvalReport, EvalError> {
    let preds: Vec<Prediction> = predictions.iter().map(|&l| Prediction::Label(l)).collect();
    score(&preds, gold)
}

/// Anything that can predict labels for test windows truncated to their
/// first `t` days.
pub trait Forecaster {
    fn forecast(
        &self,
        dataset: &Dataset,
        windows: &[usize],
        t: usize,
    ) -> Result<Vec<Prediction>, EvalError>;
}

/// Evaluates under the forecasting protocol: inputs are days 1..=t of each
/// test window (default t = 7), the label is the window's own (end-of-window)
/// severity level.
pub fn forecast_eval(
    forecaster: &dyn Forecaster,
    dataset: &Dataset,
    test: &[usize],
    t: usize,
) -> Result<EvalReport, EvalError> {
    if t == 0 || t > WINDOW_DAYS {
        return Err(EvalError::Forecast(format!(
            "input length {t} outside 1..={WINDOW_DAYS}"
        )));
    }
    let predictions = forecaster.forecast(dataset, test, t)?;
    let gold: Vec<SeverityLevel> = test.iter().map(|&i| dataset.sample(i).label).collect();
    score(&predictions, &gold)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyCurve {
    /// One report per observation length T = 7..=14, ascending.
    pub points: Vec<(usize, EvalReport)>,
}

/// Expanding-window evaluation: same windows and targets, inputs grow one
/// day at a time from 7 to 14 days.
pub fn early_curve(
    forecaster: &dyn Forecaster,
    dataset: &Dataset,
    test: &[usize],
) -> Result<EarlyCurve, EvalError> {
    let mut points = Vec::new();
    for t in FORECAST_INPUT_DAYS..=WINDOW_DAYS {
        points.push((t, forecast_eval(forecaster, dataset, test, t)?));
    }
    Ok(EarlyCurve { points })
}

impl EvalReport {
    /// Aligned-column text table: one row per class plus summary lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>9} {:>9} {:>9} {:>9}\n",
            "Class", "Pre", "Rec", "F1", "Support"
        ));
        for level in SeverityLevel::ALL {
            let m = &self.per_class[level.rank()];
            out.push_str(&format!(
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
                level.name(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            ));
        }
        out.push_str(&format!(
            "Accuracy {:.4}  Macro-F1 {:.4}  N {}  Unparseable {}\n",
            self.accuracy, self.macro_f1, self.total, self.unparseable
        ));
        out
    }
}

impl EarlyCurve {
    /// CSV with one row per T: headline metrics plus per-class columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,accuracy,macro_f1,unparseable");
        for level in SeverityLevel::ALL {
            let n = level.name().to_lowercase();
            out.push_str(&format!(",precision_{n},recall_{n},f1_{n},support_{n}"));
        }
        out.push('\n');
        for (t, r) in &self.points {
            out.push_str(&format!("{t},{},{},{}", r.accuracy, r.macro_f1, r.unparseable));
            for level in SeverityLevel::ALL {
                let m = &r.per_class[level.rank()];
                out.push_str(&format!(
                    ",{},{},{},{}",
                    m.precision, m.recall, m.f1, m.support
                ));
            }
            out.push('\n');
        }
        out
    }

    pub fn report_at(&self, t: usize) -> Option<&EvalReport> {
        self.points.iter().find(|(pt, _)| *pt == t).map(|(_, r)| r)
    }
}

/// Classical-model adapter: represents each window prefix under one feature
/// config, optionally appends the one-hot user block, and predicts.
pub struct ClassicalForecaster {
    pub model: crate::classical::ClassicalModel,
    pub normalizer: crate::features::Normalizer,
    pub map: crate::features::CategoryMap,
    pub config: crate::features::FeatureConfig,
    /// Present when the model was trained with one-hot user ids.
    pub user_index: Option<std::collections::BTreeMap<String, usize>>,
}

impl Forecaster for ClassicalForecaster {
    fn forecast(
        &self,
        dataset: &Dataset,
        windows: &[usize],
        t: usize,
    ) -> Result<Vec<Prediction>, EvalError> {
        let mut rows = Vec::with_capacity(windows.len());
        for &i in windows {
            let tensor = crate::features::represent(
                dataset.sample(i),
                t,
                &self.normalizer,
                &self.map,
                self.config,
                true,
            )
            .map_err(|e| EvalError::Forecast(e.to_string()))?;
            rows.push(tensor.values);
        }
        if let Some(index) = &self.user_index {
            let ids: Vec<&str> = windows
                .iter()
                .map(|&i| dataset.sample(i).participant_id.as_str())
                .collect();
            rows = crate::classical::attach_user_onehot(&rows, &ids, index);
        }
        let labels = self.model.predict(&rows).map_err(|e| match e {
            crate::error::ModelError::WidthMismatch { expected, got } => EvalError::LayoutMismatch(
                format!("model expects width {expected}, representation produced {got} (flattened layouts cannot change T at test time)"),
            ),
            other => EvalError::Forecast(other.to_string()),
        })?;
        Ok(labels.into_iter().map(Prediction::Label).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use SeverityLevel::{Mild, Moderate, Normal, Severe};

    fn labels(ranks: &[usize]) -> Vec<SeverityLevel> {
        ranks
            .iter()
            .map(|&r| SeverityLevel::from_rank(r).unwrap())
            .collect()
    }

    #[test]
    fn all_correct_scores_ones() {
        let gold = vec![Normal, Mild, Moderate, Severe, Normal];
        let report = score_labels(&gold, &gold).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        for m in &report.per_class {
            if m.support > 0 {
                assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
            }
        }
    }

    #[test]
    fn hand_computed_four_sample_example() {
        let gold = vec![Normal, Normal, Moderate, Severe];
        let pred = vec![Normal, Moderate, Moderate, Normal];
        let r = score_labels(&pred, &gold).unwrap();

        let n = &r.per_class[Normal.rank()];
        assert_eq!((n.precision, n.recall, n.f1), (0.5, 0.5, 0.5));
        // Mild has zero gold support: excluded from macro, support visible.
        assert_eq!(r.per_class[Mild.rank()].support, 0);
        let m = &r.per_class[Moderate.rank()];
        assert!((m.precision - 0.5).abs() < 1e-12);
        assert!((m.recall - 1.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        let s = &r.per_class[Severe.rank()];
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));

        assert!((r.macro_f1 - (0.5 + 2.0 / 3.0 + 0.0) / 3.0).abs() < 1e-12);
        assert!((r.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn majority_class_baseline_on_published_proportions() {
        let counts = [15_477usize, 6_524, 1_795, 982];
        let mut gold = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            gold.extend(labels(&vec![c; n]));
        }
        let pred = vec![Normal; gold.len()];
        let r = score_labels(&pred, &gold).unwrap();

        let p = 15_477.0 / 24_778.0;
        assert!((r.accuracy - 0.6246).abs() < 5e-4);
        let f1_normal = 2.0 * p / (1.0 + p);
        assert!((r.per_class[0].f1 - f1_normal).abs() < 1e-12);
        assert!((f1_normal - 0.7689).abs() < 5e-4);
        assert!((r.macro_f1 - f1_normal / 4.0).abs() < 1e-12);
        assert!((r.macro_f1 - 0.1922).abs() < 5e-4);
    }

    #[test]
    fn unparseable_counts_as_wrong_for_gold() {
        let gold = vec![Normal, Mild];
        let pred = vec![Prediction::Unparseable, Prediction::Label(Mild)];
        let r = score(&pred, &gold).unwrap();
        assert_eq!(r.unparseable, 1);
        assert_eq!(r.per_class[Normal.rank()].support, 1);
        assert_eq!(r.per_class[Normal.rank()].recall, 0.0);
        assert!((r.accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let gold = vec![Normal];
        assert!(matches!(
            score(&[], &gold),
            Err(EvalError::LengthMismatch { predictions: 0, gold: 1 })
        ));
    }

    /// Independent brute-force implementation used as the scoring oracle.
    pub(crate) fn brute_force(preds: &[Prediction], gold: &[SeverityLevel]) -> EvalReport {
        let mut per_class = [ClassMetrics {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            support: 0,
        }; NUM_CLASSES];
        let mut correct = 0usize;
        for c in 0..NUM_CLASSES {
            let is_c = |p: &Prediction| matches!(p, Prediction::Label(l) if l.rank() == c);
            let tp = preds
                .iter()
                .zip(gold)
                .filter(|(p, g)| is_c(p) && g.rank() == c)
                .count();
            let fp = preds
                .iter()
                .zip(gold)
                .filter(|(p, g)| is_c(p) && g.rank() != c)
                .count();
            let support = gold.iter().filter(|g| g.rank() == c).count();
            let fnn = support - tp;
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if tp + fnn > 0 { tp as f64 / (tp + fnn) as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            per_class[c] = ClassMetrics { precision, recall, f1, support };
            correct += tp;
        }
        let present: Vec<f64> = per_class
            .iter()
            .filter(|m| m.support > 0)
            .map(|m| m.f1)
            .collect();
        EvalReport {
            per_class,
            accuracy: correct as f64 / gold.len().max(1) as f64,
            macro_f1: present.iter().sum::<f64>() / present.len().max(1) as f64,
            unparseable: preds.iter().filter(|p| matches!(p, Prediction::Unparseable)).count(),
            total: gold.len(),
        }
    }

    pub(crate) fn assert_reports_match(a: &EvalReport, b: &EvalReport, tol: f64) {
        assert!((a.accuracy - b.accuracy).abs() <= tol);
        assert!((a.macro_f1 - b.macro_f1).abs() <= tol);
        assert_eq!(a.unparseable, b.unparseable);
        assert_eq!(a.total, b.total);
        for (x, y) in a.per_class.iter().zip(&b.per_class) {
            assert!((x.precision - y.precision).abs() <= tol);
            assert!((x.recall - y.recall).abs() <= tol);
            assert!((x.f1 - y.f1).abs() <= tol);
            assert_eq!(x.support, y.support);
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force_oracle(
            pairs in proptest::collection::vec((0usize..5, 0usize..4), 1..60)
        ) {
            let preds: Vec<Prediction> = pairs
                .iter()
                .map(|&(p, _)| match p {
                    4 => Prediction::Unparseable,
                    r => Prediction::Label(SeverityLevel::from_rank(r).unwrap()),
                })
                .collect();
            let gold: Vec<SeverityLevel> =
                pairs.iter().map(|&(_, g)| SeverityLevel::from_rank(g).unwrap()).collect();
            let fast = score(&preds, &gold).unwrap();
            let slow = brute_force(&preds, &gold);
            assert_reports_match(&fast, &slow, 1e-12);
        }

        /// Accuracy equals support-weighted mean recall.
        #[test]
        fn accuracy_is_weighted_recall(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60)
        ) {
            let preds: Vec<SeverityLevel> =
                pairs.iter().map(|&(p, _)| SeverityLevel::from_rank(p).unwrap()).collect();
            let gold: Vec<SeverityLevel> =
                pairs.iter().map(|&(_, g)| SeverityLevel::from_rank(g).unwrap()).collect();
            let r = score_labels(&preds, &gold).unwrap();
            let weighted: f64 = r
                .per_class
                .iter()
                .map(|m| m.recall * m.support as f64 / gold.len() as f64)
                .sum();
            prop_assert!((r.accuracy - weighted).abs() < 1e-12);
        }

        /// Relabeling classes consistently leaves macro-F1 unchanged.
        #[test]
        fn macro_f1_permutation_invariant(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
            perm_seed in 0usize..24
        ) {
            let mut perm = [0usize, 1, 2, 3];
            // Enumerate the 24 permutations deterministically.
            let mut k = perm_seed;
            for i in (1..4).rev() {
                perm.swap(i, k % (i + 1));
                k /= i + 1;
            }
            let apply = |r: usize| SeverityLevel::from_rank(perm[r]).unwrap();
            let preds: Vec<SeverityLevel> =
                pairs.iter().map(|&(p, _)| SeverityLevel::from_rank(p).unwrap()).collect();
            let gold: Vec<SeverityLevel> =
                pairs.iter().map(|&(_, g)| SeverityLevel::from_rank(g).unwrap()).collect();
            let base = score_labels(&preds, &gold).unwrap();

            let preds_p: Vec<SeverityLevel> = pairs.iter().map(|&(p, _)| apply(p)).collect();
            let gold_p: Vec<SeverityLevel> = pairs.iter().map(|&(_, g)| apply(g)).collect();
            let permuted = score_labels(&preds_p, &gold_p).unwrap();
            prop_assert!((base.macro_f1 - permuted.macro_f1).abs() < 1e-12);
            prop_assert!((base.accuracy - permuted.accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn early_curve_csv_and_lookup() {
        struct Fixed;
        impl Forecaster for Fixed {
            fn forecast(
                &self,
                dataset: &Dataset,
                windows: &[usize],
                _t: usize,
            ) -> Result<Vec<Prediction>, EvalError> {
                Ok(windows
                    .iter()
                    .map(|&i| Prediction::Label(dataset.sample(i).label))
                    .collect())
            }
        }
        let ds = crate::syngen::generate(&crate::syngen::GeneratorConfig {
            num_users: 2,
            samples_per_user: (3, 3),
            ..Default::default()
        })
        .unwrap();
        let idxs: Vec<usize> = (0..ds.len()).collect();
        let curve = early_curve(&Fixed, &ds, &idxs).unwrap();
        assert_eq!(curve.points.len(), 8);
        assert_eq!(curve.points.first().unwrap().0, 7);
        assert_eq!(curve.points.last().unwrap().0, 14);
        assert_eq!(curve.report_at(14).unwrap().accuracy, 1.0);
        let csv = curve.to_csv();
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with("t,accuracy,macro_f1,unparseable"));
    }

    #[test]
    fn text_table_is_aligned_and_complete() {
        let gold = vec![Normal, Mild, Moderate, Severe];
        let r = score_labels(&gold, &gold).unwrap();
        let text = r.to_text();
        assert!(text.contains("Severe"));
        assert!(text.contains("Macro-F1 1.0000"));
        let widths: Vec<usize> = text.lines().map(str::len).collect();
        assert_eq!(widths[0], widths[1]);
    }
}
