//! Classical classifiers behind one adapter: fit on flat feature rows,
//! predict severity levels, expose class probabilities (native where the
//! model has them, softmax over margins otherwise).
//!
//! Six kinds: multinomial logistic regression, one-vs-rest linear SVM, a
//! CART decision tree, a random forest, and two gradient-boosted tree
//! variants (exact depth-wise splits vs histogram leaf-wise growth). All are
//! deterministic for a fixed spec and seed.

mod gbdt;
mod linear;
mod svm;
mod tree;

pub use gbdt::GbdtModel;
pub use linear::LogisticModel;
pub use svm::SvmModel;
pub use tree::{GiniTree, TreeParams};

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{label_counts, SeverityLevel, NUM_CLASSES};
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicalKind {
    LogisticRegression,
    Svm,
    DecisionTree,
    RandomForest,
    XgboostStyleGbdt,
    LightgbmStyleGbdt,
}

impl ClassicalKind {
    pub const ALL: [ClassicalKind; 6] = [
        ClassicalKind::LogisticRegression,
        ClassicalKind::Svm,
        ClassicalKind::DecisionTree,
        ClassicalKind::RandomForest,
        ClassicalKind::XgboostStyleGbdt,
        ClassicalKind::LightgbmStyleGbdt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassicalKind::LogisticRegression => "logistic_regression",
            ClassicalKind::Svm => "svm",
            ClassicalKind::DecisionTree => "decision_tree",
            ClassicalKind::RandomForest => "random_forest",
            ClassicalKind::XgboostStyleGbdt => "xgboost_style_gbdt",
            ClassicalKind::LightgbmStyleGbdt => "lightgbm_style_gbdt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Personalization {
    Agnostic,
    /// Caller appends a one-hot user-id block via [`attach_user_onehot`].
    OneHotId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    InverseFrequency,
}

/// Hyperparameters across all kinds; each kind validates and reads only its
/// own fields. Defaults are the documented small-grid choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassicalParams {
    /// Gradient-descent step size (logistic regression, SVM).
    pub learning_rate: f64,
    /// Full-batch epochs (logistic regression, SVM).
    pub epochs: usize,
    /// L2 regularization (logistic regression, SVM).
    pub l2: f64,
    /// Tree depth cap (tree, forest, xgboost-style).
    pub max_depth: usize,
    /// Minimum samples on each side of a split (tree family).
    pub min_samples_leaf: usize,
    /// Trees in the forest.
    pub num_trees: usize,
    /// Boosting rounds (each round adds one tree per class).
    pub rounds: usize,
    /// Boosting shrinkage.
    pub eta: f64,
    /// Boosting leaf L2.
    pub lambda: f64,
    /// Leaf cap for leaf-wise growth (lightgbm-style).
    pub max_leaves: usize,
    /// Histogram bins (lightgbm-style).
    pub max_bins: usize,
}

impl Default for ClassicalParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 300,
            l2: 1e-3,
            max_depth: 5,
            min_samples_leaf: 2,
            num_trees: 60,
            rounds: 60,
            eta: 0.15,
            lambda: 1.0,
            max_leaves: 31,
            max_bins: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassicalSpec {
    pub kind: ClassicalKind,
    #[serde(default)]
    pub params: ClassicalParams,
    #[serde(default = "default_personalization")]
    pub personalization: Personalization,
    #[serde(default = "default_weighting")]
    pub class_weighting: ClassWeighting,
    #[serde(default)]
    pub seed: u64,
}

fn default_personalization() -> Personalization {
    Personalization::Agnostic
}
fn default_weighting() -> ClassWeighting {
    ClassWeighting::None
}

impl ClassicalSpec {
    pub fn new(kind: ClassicalKind) -> Self {
        Self {
            kind,
            params: ClassicalParams::default(),
            personalization: Personalization::Agnostic,
            class_weighting: ClassWeighting::None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let p = &self.params;
        let bad = |msg: String| Err(ModelError::InvalidSpec(msg));
        match self.kind {
            ClassicalKind::LogisticRegression | ClassicalKind::Svm => {
                if !(p.learning_rate > 0.0 && p.learning_rate.is_finite()) {
                    return bad(format!("learning_rate {} must be > 0", p.learning_rate));
                }
                if p.epochs == 0 {
                    return bad("epochs must be >= 1".into());
                }
                if !(p.l2 >= 0.0 && p.l2.is_finite()) {
                    return bad(format!("l2 {} must be >= 0", p.l2));
                }
            }
            ClassicalKind::DecisionTree
            | ClassicalKind::RandomForest
            | ClassicalKind::XgboostStyleGbdt => {
                if p.max_depth == 0 {
                    return bad("max_depth must be >= 1".into());
                }
                if p.min_samples_leaf == 0 {
                    return bad("min_samples_leaf must be >= 1".into());
                }
                if self.kind == ClassicalKind::RandomForest && p.num_trees == 0 {
                    return bad("num_trees must be >= 1".into());
                }
                if self.kind == ClassicalKind::XgboostStyleGbdt {
                    self.validate_boosting()?;
                }
            }
            ClassicalKind::LightgbmStyleGbdt => {
                self.validate_boosting()?;
                if p.max_leaves < 2 {
                    return bad("max_leaves must be >= 2".into());
                }
                if p.max_bins < 2 {
                    return bad("max_bins must be >= 2".into());
                }
            }
        }
        Ok(())
    }

    fn validate_boosting(&self) -> Result<(), ModelError> {
        let p = &self.params;
        if p.rounds == 0 {
            return Err(ModelError::InvalidSpec("rounds must be >= 1".into()));
        }
        if !(p.eta > 0.0 && p.eta <= 1.0) {
            return Err(ModelError::InvalidSpec(format!("eta {} must be in (0, 1]", p.eta)));
        }
        if !(p.lambda >= 0.0 && p.lambda.is_finite()) {
            return Err(ModelError::InvalidSpec(format!("lambda {} must be >= 0", p.lambda)));
        }
        Ok(())
    }
}

/// Inverse-frequency class weights w_c = N / (K * n_c) over the four
/// canonical classes. A class absent from the counts gets weight 0 (it can
/// never contribute a sample) and is reported by the caller where that
/// matters.
pub fn inverse_frequency_weights(counts: &[usize; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let n: usize = counts.iter().sum();
    let mut w = [0.0f64; NUM_CLASSES];
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            w[c] = n as f64 / (NUM_CLASSES as f64 * count as f64);
        }
    }
    w
}

/// Per-sample weights under the spec's weighting mode.
fn sample_weights(weighting: ClassWeighting, labels: &[SeverityLevel]) -> Vec<f64> {
    match weighting {
        ClassWeighting::None => vec![1.0; labels.len()],
        ClassWeighting::InverseFrequency => {
            let w = inverse_frequency_weights(&label_counts(labels));
            labels.iter().map(|l| w[l.rank()]).collect()
        }
    }
}

/// Appends a one-hot user-id block to every row. Ids missing from the index
/// (users never seen in train) get an all-zeros block and a warning.
pub fn attach_user_onehot(
    inputs: &[Vec<f64>],
    participant_ids: &[&str],
    user_index: &BTreeMap<String, usize>,
) -> Vec<Vec<f64>> {
    let num_users = user_index.len();
    inputs
        .iter()
        .zip(participant_ids)
        .map(|(row, id)| {
            let mut out = Vec::with_capacity(row.len() + num_users);
            out.extend_from_slice(row);
            let mut block = vec![0.0; num_users];
            match user_index.get(*id) {
                Some(&k) => block[k] = 1.0,
                None => log::warn!("participant {id} not in train user index; zero id block"),
            }
            out.extend(block);
            out
        })
        .collect()
}

fn check_training_inputs(
    inputs: &[Vec<f64>],
    labels: &[SeverityLevel],
) -> Result<usize, ModelError> {
    if inputs.is_empty() {
        return Err(ModelError::EmptySet);
    }
    if inputs.len() != labels.len() {
        return Err(ModelError::InconsistentWidth(inputs.len(), labels.len()));
    }
    let width = inputs[0].len();
    for row in inputs {
        if row.len() != width {
            return Err(ModelError::InconsistentWidth(width, row.len()));
        }
    }
    let distinct = label_counts(labels).iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(ModelError::DegenerateLabels(distinct));
    }
    Ok(width)
}

/// A trained classical model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ClassicalModel {
    Logistic(LogisticModel),
    Svm(SvmModel),
    Tree { width: usize, tree: GiniTree },
    Forest { width: usize, trees: Vec<GiniTree> },
    Gbdt(GbdtModel),
}

pub fn fit(
    spec: &ClassicalSpec,
    inputs: &[Vec<f64>],
    labels: &[SeverityLevel],
) -> Result<ClassicalModel, ModelError> {
    spec.validate()?;
    let width = check_training_inputs(inputs, labels)?;
    let ys: Vec<usize> = labels.iter().map(|l| l.rank()).collect();
    let weights = sample_weights(spec.class_weighting, labels);

    let model = match spec.kind {
        ClassicalKind::LogisticRegression => {
            ClassicalModel::Logistic(linear::fit(inputs, &ys, &weights, &spec.params)?)
        }
        ClassicalKind::Svm => ClassicalModel::Svm(svm::fit(inputs, &ys, &weights, &spec.params)?),
        ClassicalKind::DecisionTree => ClassicalModel::Tree {
            width,
            tree: tree::fit_tree(inputs, &ys, &weights, &spec.params),
        },
        ClassicalKind::RandomForest => ClassicalModel::Forest {
            width,
            trees: tree::fit_forest(inputs, &ys, &weights, &spec.params, spec.seed),
        },
        ClassicalKind::XgboostStyleGbdt => {
            ClassicalModel::Gbdt(gbdt::fit(inputs, &ys, &weights, &spec.params, gbdt::SplitEngine::Exact)?)
        }
        ClassicalKind::LightgbmStyleGbdt => ClassicalModel::Gbdt(gbdt::fit(
            inputs,
            &ys,
            &weights,
            &spec.params,
            gbdt::SplitEngine::Histogram,
        )?),
    };
    Ok(model)
}

impl ClassicalModel {
    pub fn input_width(&self) -> usize {
        match self {
            ClassicalModel::Logistic(m) => m.width(),
            ClassicalModel::Svm(m) => m.width(),
            ClassicalModel::Tree { width, .. } | ClassicalModel::Forest { width, .. } => *width,
            ClassicalModel::Gbdt(m) => m.width(),
        }
    }

    fn check_width(&self, inputs: &[Vec<f64>]) -> Result<(), ModelError> {
        let expected = self.input_width();
        for row in inputs {
            if row.len() != expected {
                return Err(ModelError::WidthMismatch {
                    expected,
                    got: row.len(),
                });
            }
        }
        Ok(())
    }

    /// Per-class scores normalized to probabilities. Native probabilities
    /// for logistic regression, forests and boosted trees; softmax over
    /// one-vs-rest margins for the SVM.
    pub fn predict_proba(&self, inputs: &[Vec<f64>]) -> Result<Vec<[f64; NUM_CLASSES]>, ModelError> {
        self.check_width(inputs)?;
        Ok(match self {
            ClassicalModel::Logistic(m) => inputs.iter().map(|x| m.proba(x)).collect(),
            ClassicalModel::Svm(m) => inputs.iter().map(|x| m.proba(x)).collect(),
            ClassicalModel::Tree { tree, .. } => inputs.iter().map(|x| tree.proba(x)).collect(),
            ClassicalModel::Forest { trees, .. } => inputs
                .iter()
                .map(|x| {
                    let mut acc = [0.0f64; NUM_CLASSES];
                    for t in trees {
                        let p = t.proba(x);
                        for (a, v) in acc.iter_mut().zip(p) {
                            *a += v;
                        }
                    }
                    for a in &mut acc {
                        *a /= trees.len() as f64;
                    }
                    acc
                })
                .collect(),
            ClassicalModel::Gbdt(m) => inputs.iter().map(|x| m.proba(x)).collect(),
        })
    }

    pub fn predict(&self, inputs: &[Vec<f64>]) -> Result<Vec<SeverityLevel>, ModelError> {
        Ok(self
            .predict_proba(inputs)?
            .into_iter()
            .map(|p| SeverityLevel::from_rank(argmax(&p)).unwrap())
            .collect())
    }

    /// Total split gain per feature, summed over all trees. Only tree
    /// ensembles carry gains; other kinds return None.
    pub fn feature_gains(&self) -> Option<&[f64]> {
        match self {
            ClassicalModel::Gbdt(m) => Some(m.feature_gains()),
            _ => None,
        }
    }
}

/// First index of the maximum (stable tie-break toward lower severity).
pub fn argmax(scores: &[f64; NUM_CLASSES]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax4(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let mut e = [0.0f64; NUM_CLASSES];
    let mut sum = 0.0;
    for (i, &v) in z.iter().enumerate() {
        e[i] = (v - m).exp();
        sum += e[i];
    }
    for v in &mut e {
        *v /= sum;
    }
    e
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MCCM";

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub spec: ClassicalSpec,
    /// sha256 over dataset fingerprint + sorted train indices.
    pub train_fingerprint: String,
}

/// Fingerprint binding a checkpoint to the exact training subset.
pub fn train_fingerprint(dataset_fingerprint: &str, train: &[usize]) -> String {
    let mut h = Sha256::new();
    h.update(dataset_fingerprint.as_bytes());
    for &i in train {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Writes `MCCM` + length-prefixed JSON header + length-prefixed model body.
pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    model: &ClassicalModel,
) -> Result<(), ModelError> {
    let err = |e: std::io::Error| ModelError::Checkpoint(format!("{}: {e}", path.display()));
    let header_json = serde_json::to_vec(header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let body = serde_json::to_vec(model).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut f = std::fs::File::create(path).map_err(err)?;
    f.write_all(CHECKPOINT_MAGIC).map_err(err)?;
    f.write_all(&(header_json.len() as u64).to_le_bytes()).map_err(err)?;
    f.write_all(&header_json).map_err(err)?;
    f.write_all(&(body.len() as u64).to_le_bytes()).map_err(err)?;
    f.write_all(&body).map_err(err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ClassicalModel), ModelError> {
    let err = |e: std::io::Error| ModelError::Checkpoint(format!("{}: {e}", path.display()));
    let mut f = std::fs::File::open(path).map_err(err)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint(format!(
            "{}: not a classical model checkpoint",
            path.display()
        )));
    }
    let read_block = |f: &mut std::fs::File| -> Result<Vec<u8>, ModelError> {
        let mut len = [0u8; 8];
        f.read_exact(&mut len).map_err(err)?;
        let mut buf = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut buf).map_err(err)?;
        Ok(buf)
    };
    let header_json = read_block(&mut f)?;
    let body = read_block(&mut f)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let model: ClassicalModel =
        serde_json::from_slice(&body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    Ok((header, model))
}

#[cfg(test)]
mod tests;
