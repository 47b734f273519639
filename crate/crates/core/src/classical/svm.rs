//! One-vs-rest linear SVM trained by full-batch subgradient descent on the
//! hinge loss. Margins are turned into pseudo-probabilities via softmax so
//! the adapter contract (scores per class) is uniform across kinds.

use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::ModelError;

use super::{softmax4, ClassicalParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    /// Row-major (class, feature) weights of the K one-vs-rest machines.
    weights: Vec<f64>,
    bias: [f64; NUM_CLASSES],
    width: usize,
}

impl SvmModel {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn margins(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        let mut m = self.bias;
        for c in 0..NUM_CLASSES {
            let row = &self.weights[c * self.width..(c + 1) * self.width];
            m[c] += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        m
    }

    pub fn proba(&self, x: &[f64]) -> [f64; NUM_CLASSES] {
        softmax4(&self.margins(x))
    }
}

pub fn fit(
    inputs: &[Vec<f64>],
    ys: &[usize],
    sample_weights: &[f64],
    params: &ClassicalParams,
) -> Result<SvmModel, ModelError> {
    let width = inputs[0].len();
    let n = inputs.len();
    let total_weight: f64 = sample_weights.iter().sum();
    let mut model = SvmModel {
        weights: vec![0.0; NUM_CLASSES * width],
        bias: [0.0; NUM_CLASSES],
        width,
    };

    // Heavy-ball momentum, matching the logistic trainer.
    const MOMENTUM: f64 = 0.9;
    let mut vel_w = vec![0.0f64; NUM_CLASSES * width];
    let mut vel_b = [0.0f64; NUM_CLASSES];
    let mut grad_w = vec![0.0f64; NUM_CLASSES * width];
    let mut grad_b = [0.0f64; NUM_CLASSES];
    for epoch in 0..params.epochs {
        grad_w.fill(0.0);
        grad_b.fill(0.0);
        let mut finite = true;
        for i in 0..n {
            let m = model.margins(&inputs[i]);
            finite &= m.iter().all(|v| v.is_finite());
            for c in 0..NUM_CLASSES {
                let y = if ys[i] == c { 1.0 } else { -1.0 };
                // Subgradient of max(0, 1 - y m): -y when inside the margin.
                if y * m[c] < 1.0 {
                    let err = -y * sample_weights[i];
                    grad_b[c] += err;
                    let row = &mut grad_w[c * width..(c + 1) * width];
                    for (g, &v) in row.iter_mut().zip(&inputs[i]) {
                        *g += err * v;
                    }
                }
            }
        }
        if !finite {
            return Err(ModelError::Diverged { epoch });
        }
        let scale = params.learning_rate / total_weight;
        for c in 0..NUM_CLASSES {
            vel_b[c] = MOMENTUM * vel_b[c] - scale * grad_b[c];
            model.bias[c] += vel_b[c];
            for f in 0..width {
                let k = c * width + f;
                vel_w[k] = MOMENTUM * vel_w[k]
                    - scale * grad_w[k]
                    - params.learning_rate * params.l2 * model.weights[k];
                model.weights[k] += vel_w[k];
            }
        }
    }
    Ok(model)
}
