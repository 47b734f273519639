//! Classification losses over severity logits.
//!
//! All three reduce with a plain mean over the batch. Weighted
//! cross-entropy multiplies each sample's term by its class weight
//! `N / (K * n_c)` from train-split counts; focal loss down-weights easy
//! samples by `(1 - p)^gamma`.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, ValueId};
use crate::data::NUM_CLASSES;
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    /// Inverse-frequency class weights from train counts.
    WeightedCe,
    /// `alpha` defaults to inverse-frequency weights when omitted.
    Focal { gamma: f64, alpha: Option<[f64; 4]> },
}

impl LossKind {
    pub fn validate(&self) -> Result<(), ModelError> {
        if let LossKind::Focal { gamma, alpha } = self {
            if !gamma.is_finite() || *gamma < 0.0 {
                return Err(ModelError::InvalidSpec(format!(
                    "focal gamma must be finite and nonnegative, got {gamma}"
                )));
            }
            if let Some(a) = alpha {
                if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(ModelError::InvalidSpec(
                        "focal alpha entries must be finite and nonnegative".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Resolves per-class weights from train counts. Weighted variants need
    /// every class present; plain cross-entropy accepts any counts.
    pub fn resolve_weights(&self, class_counts: &[usize; 4]) -> Result<[f64; 4], ModelError> {
        match self {
            LossKind::CrossEntropy => Ok([1.0; 4]),
            LossKind::Focal { alpha: Some(a), .. } => Ok(*a),
            LossKind::WeightedCe | LossKind::Focal { alpha: None, .. } => {
                if let Some(c) = (0..NUM_CLASSES).find(|&c| class_counts[c] == 0) {
                    let name = crate::data::SeverityLevel::from_rank(c).unwrap().name();
                    return Err(ModelError::ZeroCountClass(name));
                }
                let total: usize = class_counts.iter().sum();
                let mut w = [0.0; 4];
                for c in 0..NUM_CLASSES {
                    w[c] = total as f64 / (NUM_CLASSES as f64 * class_counts[c] as f64);
                }
                Ok(w)
            }
        }
    }

    /// Builds the loss node for a `[batch, 4]` logits tensor.
    pub fn apply(
        &self,
        tape: &mut Tape,
        logits: ValueId,
        labels: &[usize],
        weights: &[f64; 4],
    ) -> ValueId {
        match self {
            LossKind::CrossEntropy | LossKind::WeightedCe => {
                tape.weighted_ce(logits, labels, weights)
            }
            LossKind::Focal { gamma, .. } => tape.focal(logits, labels, *gamma, weights),
        }
    }
}

/// Unweighted cross-entropy, mean over the batch.
pub fn cross_entropy(tape: &mut Tape, logits: ValueId, labels: &[usize]) -> ValueId {
    tape.weighted_ce(logits, labels, &[1.0; NUM_CLASSES])
}

/// Class-weighted cross-entropy.
pub fn weighted_ce(
    tape: &mut Tape,
    logits: ValueId,
    labels: &[usize],
    weights: &[f64; 4],
) -> ValueId {
    tape.weighted_ce(logits, labels, weights)
}

/// Focal loss with explicit alpha.
pub fn focal_loss(
    tape: &mut Tape,
    logits: ValueId,
    labels: &[usize],
    gamma: f64,
    alpha: &[f64; 4],
) -> ValueId {
    tape.focal(logits, labels, gamma, alpha)
}
