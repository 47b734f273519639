use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::data::{SeverityLevel, NUM_CLASSES};
use crate::error::ModelError;

use super::*;

/// Four Gaussian blobs in `dim` dims; class c's mean is `gap * c` along the
/// first two axes. `counts` controls imbalance.
fn blobs(
    counts: [usize; NUM_CLASSES],
    dim: usize,
    gap: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<SeverityLevel>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let row: Vec<f64> = (0..dim)
                .map(|f| {
                    let noise: f64 = rng.sample(StandardNormal);
                    // Centered like the z-normalized pipeline inputs.
                    let mean = if f < 2 { gap * (c as f64 - 1.5) } else { 0.0 };
                    mean + noise
                })
                .collect();
            xs.push(row);
            ys.push(SeverityLevel::from_rank(c).unwrap());
        }
    }
    (xs, ys)
}

fn train_accuracy(model: &ClassicalModel, xs: &[Vec<f64>], ys: &[SeverityLevel]) -> f64 {
    let preds = model.predict(xs).unwrap();
    let hits = preds.iter().zip(ys).filter(|(p, y)| p == y).count();
    hits as f64 / ys.len() as f64
}

#[test]
fn contract_suite_over_all_kinds() {
    let (xs, ys) = blobs([40, 40, 40, 40], 6, 4.0, 9);
    for kind in ClassicalKind::ALL {
        let mut spec = ClassicalSpec::new(kind);
        spec.seed = 3;
        // Keep iterative kinds quick.
        spec.params.epochs = 150;
        spec.params.rounds = 15;
        spec.params.num_trees = 15;

        let model = fit(&spec, &xs, &ys).unwrap();
        let preds = model.predict(&xs).unwrap();
        assert_eq!(preds.len(), xs.len(), "{kind:?}");

        let probas = model.predict_proba(&xs).unwrap();
        for p in &probas {
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "{kind:?}: proba sum {sum}");
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?}");
        }

        // Well-separated blobs should be learnable by every kind.
        let acc = train_accuracy(&model, &xs, &ys);
        assert!(acc > 0.9, "{kind:?}: train accuracy {acc}");

        // Same spec, fresh fit: identical predictions.
        let again = fit(&spec, &xs, &ys).unwrap();
        assert_eq!(preds, again.predict(&xs).unwrap(), "{kind:?} nondeterministic");

        // Width mismatch is rejected.
        let narrow = vec![vec![0.0; 3]];
        assert!(matches!(
            model.predict(&narrow),
            Err(ModelError::WidthMismatch { expected: 6, got: 3 })
        ));

        // Degenerate label sets are rejected.
        let one_class = vec![SeverityLevel::Normal; xs.len()];
        assert!(matches!(
            fit(&spec, &xs, &one_class),
            Err(ModelError::DegenerateLabels(1))
        ));
        assert!(matches!(fit(&spec, &[], &[]), Err(ModelError::EmptySet)));
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = ClassicalSpec::new(ClassicalKind::LogisticRegression);
    spec.params.learning_rate = 0.0;
    assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));

    let mut spec = ClassicalSpec::new(ClassicalKind::DecisionTree);
    spec.params.max_depth = 0;
    assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));

    let mut spec = ClassicalSpec::new(ClassicalKind::XgboostStyleGbdt);
    spec.params.eta = 1.5;
    assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));

    let mut spec = ClassicalSpec::new(ClassicalKind::LightgbmStyleGbdt);
    spec.params.max_leaves = 1;
    assert!(matches!(spec.validate(), Err(ModelError::InvalidSpec(_))));
}

#[test]
fn tree_shatters_separable_toy_set() {
    // Two features, four classes in distinct quadrant-ish regions.
    let xs = vec![
        vec![0.0, 0.0],
        vec![0.2, 0.1],
        vec![5.0, 0.0],
        vec![5.2, 0.3],
        vec![0.0, 5.0],
        vec![0.1, 5.2],
        vec![5.0, 5.0],
        vec![5.3, 5.1],
    ];
    let ys = vec![
        SeverityLevel::Normal,
        SeverityLevel::Normal,
        SeverityLevel::Mild,
        SeverityLevel::Mild,
        SeverityLevel::Moderate,
        SeverityLevel::Moderate,
        SeverityLevel::Severe,
        SeverityLevel::Severe,
    ];
    let mut spec = ClassicalSpec::new(ClassicalKind::DecisionTree);
    spec.params.min_samples_leaf = 1;
    let model = fit(&spec, &xs, &ys).unwrap();
    assert_eq!(train_accuracy(&model, &xs, &ys), 1.0);
}

#[test]
fn inverse_frequency_weights_match_published_counts() {
    let w = inverse_frequency_weights(&[15_477, 6_524, 1_795, 982]);
    let expected = [0.4003, 0.9496, 3.4510, 6.3080];
    for (got, want) in w.iter().zip(expected) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    // Uniform counts give unit weights.
    assert_eq!(inverse_frequency_weights(&[5, 5, 5, 5]), [1.0; 4]);
    // Absent class weight is zero, others still well-defined.
    let w = inverse_frequency_weights(&[6, 2, 0, 4]);
    assert_eq!(w[2], 0.0);
    assert!((w[0] - 12.0 / (4.0 * 6.0)).abs() < 1e-12);
}

#[test]
fn weighting_raises_minority_recall() {
    // Imbalanced, overlapping blobs: unweighted fits drown the Severe class.
    let mut wins = Vec::new();
    for seed in 0..5 {
        let (xs, ys) = blobs([600, 250, 80, 40], 8, 1.0, 100 + seed);
        let recall_severe = |weighting: ClassWeighting| {
            let mut spec = ClassicalSpec::new(ClassicalKind::LogisticRegression);
            spec.class_weighting = weighting;
            spec.params.epochs = 200;
            let model = fit(&spec, &xs, &ys).unwrap();
            let preds = model.predict(&xs).unwrap();
            let mut tp = 0usize;
            let mut fns = 0usize;
            for (p, y) in preds.iter().zip(&ys) {
                if *y == SeverityLevel::Severe {
                    if *p == SeverityLevel::Severe {
                        tp += 1;
                    } else {
                        fns += 1;
                    }
                }
            }
            tp as f64 / (tp + fns) as f64
        };
        let weighted = recall_severe(ClassWeighting::InverseFrequency);
        let plain = recall_severe(ClassWeighting::None);
        wins.push(weighted - plain);
    }
    wins.sort_by(f64::total_cmp);
    let median = wins[wins.len() / 2];
    assert!(median > 0.0, "median recall gain {median:?} (runs: {wins:?})");
}

#[test]
fn onehot_appends_unit_vector_per_user() {
    let user_index: BTreeMap<String, usize> =
        [("a", 0usize), ("b", 1), ("c", 2)].map(|(u, i)| (u.to_string(), i)).into();
    let inputs = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
    let out = attach_user_onehot(&inputs, &["b", "zz_unseen", "b"], &user_index);
    assert_eq!(out[0], vec![1.0, 2.0, 0.0, 1.0, 0.0]);
    assert_eq!(out[1], vec![3.0, 4.0, 0.0, 0.0, 0.0]);
    assert_eq!(out[2][2..], out[0][2..]);
    for row in &out {
        assert_eq!(row.len(), 2 + user_index.len());
    }
}

#[test]
fn gbdt_gains_identify_planted_feature() {
    // Only feature 0 carries signal; both engines should put the bulk of
    // their split gain there.
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for c in 0..NUM_CLASSES {
        for _ in 0..50 {
            let mut row: Vec<f64> = (0..10).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            row[0] += 3.0 * c as f64;
            xs.push(row);
            ys.push(SeverityLevel::from_rank(c).unwrap());
        }
    }
    for kind in [ClassicalKind::XgboostStyleGbdt, ClassicalKind::LightgbmStyleGbdt] {
        let mut spec = ClassicalSpec::new(kind);
        spec.params.rounds = 10;
        let model = fit(&spec, &xs, &ys).unwrap();
        let gains = model.feature_gains().unwrap();
        let total: f64 = gains.iter().sum();
        assert!(
            gains[0] / total > 0.8,
            "{kind:?}: planted feature share {}",
            gains[0] / total
        );
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let (xs, ys) = blobs([30, 30, 30, 30], 5, 3.0, 4);
    let mut spec = ClassicalSpec::new(ClassicalKind::LightgbmStyleGbdt);
    spec.params.rounds = 8;
    let model = fit(&spec, &xs, &ys).unwrap();
    let preds = model.predict(&xs).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mccm");
    let header = CheckpointHeader {
        format_version: 1,
        spec: spec.clone(),
        train_fingerprint: train_fingerprint("dataset-abc", &[0, 1, 2]),
    };
    save_checkpoint(&path, &header, &model).unwrap();
    let (loaded_header, loaded) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_header.spec, spec);
    assert_eq!(loaded_header.train_fingerprint, header.train_fingerprint);
    assert_eq!(loaded.predict(&xs).unwrap(), preds);

    // Garbage files are rejected up front.
    let bogus = dir.path().join("bogus.mccm");
    std::fs::write(&bogus, b"nope").unwrap();
    assert!(matches!(
        load_checkpoint(&bogus),
        Err(ModelError::Checkpoint(_))
    ));
}
