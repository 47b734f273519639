//! Mini-batch training with early stopping on validation macro-F1.
//!
//! Every sample trains on its full two-week window; the forecaster adapter
//! later truncates test inputs. Batches are shuffled with a seeded
//! generator and the whole loop is single-threaded, so a fixed spec
//! reproduces its run exactly.

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::models::{NeuralModel, NeuralSpec};
use super::tape::{Adam, ParamStore, Tape};
use crate::data::{Dataset, SeverityLevel, NUM_CLASSES, WINDOW_DAYS};
use crate::error::{EvalError, ModelError};
use crate::eval::{self, Forecaster, Prediction};
use crate::features::{self, CategoryMap, FeatureConfig, Layout, Normalizer};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_macro_f1,val_accuracy\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_macro_f1, r.val_accuracy
            ));
        }
        out
    }
}

/// A trained model bundled with everything needed to featurize new windows
/// the same way the training data was featurized.
#[derive(Debug)]
pub struct TrainedNeural {
    pub model: NeuralModel,
    pub normalizer: Normalizer,
    pub map: CategoryMap,
    pub config: FeatureConfig,
    pub history: TrainingHistory,
}

struct Prepared {
    /// Step-major values per sample.
    values: Vec<Vec<f64>>,
    labels: Vec<usize>,
    rows: Option<Vec<usize>>,
    time_steps: usize,
    dim: usize,
}

fn prepare(
    dataset: &Dataset,
    indices: &[usize],
    normalizer: &Normalizer,
    map: &CategoryMap,
    config: FeatureConfig,
    model: &NeuralModel,
) -> Result<Prepared, ModelError> {
    let mut values = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut rows = Vec::with_capacity(indices.len());
    let mut dims = None;
    for &i in indices {
        let sample = dataset.sample(i);
        let tensor = features::represent(sample, WINDOW_DAYS, normalizer, map, config, false)?;
        match dims {
            None => dims = Some((tensor.time_steps, tensor.dim)),
            Some(d) => assert_eq!(d, (tensor.time_steps, tensor.dim), "nonuniform batch shapes"),
        }
        values.push(tensor.values);
        labels.push(sample.label.rank());
        rows.push(model.user_row(&sample.participant_id));
    }
    let (time_steps, dim) = dims.unwrap();
    let rows = if model.users().is_empty() { None } else { Some(rows) };
    Ok(Prepared { values, labels, rows, time_steps, dim })
}

impl Prepared {
    fn len(&self) -> usize {
        self.values.len()
    }

    /// Assembles the tensor for a batch of sample positions.
    fn batch(&self, order: &[usize], sequence: bool) -> (ArrayD<f64>, Vec<usize>, Option<Vec<usize>>) {
        let b = order.len();
        let shape: Vec<usize> = if sequence {
            vec![b, self.time_steps, self.dim]
        } else {
            vec![b, self.dim]
        };
        let mut x = ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
        {
            let flat = x.as_slice_mut().unwrap();
            let width = if sequence { self.time_steps * self.dim } else { self.dim };
            for (bi, &si) in order.iter().enumerate() {
                flat[bi * width..(bi + 1) * width].copy_from_slice(&self.values[si]);
            }
        }
        let labels = order.iter().map(|&si| self.labels[si]).collect();
        let rows = self
            .rows
            .as_ref()
            .map(|r| order.iter().map(|&si| r[si]).collect());
        (x, labels, rows)
    }
}

fn eval_split(model: &NeuralModel, prepared: &Prepared, batch_size: usize) -> Vec<SeverityLevel> {
    let sequence = model.spec.kind.consumes_sequence();
    let order: Vec<usize> = (0..prepared.len()).collect();
    let mut out = Vec::with_capacity(prepared.len());
    for chunk in order.chunks(batch_size) {
        let (x, _, rows) = prepared.batch(chunk, sequence);
        let logits = model
            .logits(&x, rows.as_deref())
            .expect("prepared inputs match the model");
        for row in logits.rows() {
            let mut scores = [0.0; NUM_CLASSES];
            scores.copy_from_slice(row.as_slice().unwrap());
            out.push(SeverityLevel::from_rank(crate::classical::argmax(&scores)).unwrap());
        }
    }
    out
}

/// Trains a model from scratch on full windows; stops early when
/// validation macro-F1 stalls and restores the best epoch's parameters.
pub fn train(
    spec: &NeuralSpec,
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    config: FeatureConfig,
) -> Result<TrainedNeural, ModelError> {
    spec.validate()?;
    if train_idx.is_empty() {
        return Err(ModelError::EmptySet);
    }
    if val_idx.is_empty() {
        return Err(ModelError::InvalidSpec(
            "early stopping needs a nonempty validation split".into(),
        ));
    }
    let layout_ok = if spec.kind.consumes_sequence() {
        config.layout == Layout::Sequence
    } else {
        config.layout == Layout::Aggregated
    };
    if !layout_ok {
        return Err(ModelError::InvalidSpec(format!(
            "{} cannot consume the {} layout",
            spec.kind.name(),
            config
        )));
    }

    let mut class_counts = [0usize; NUM_CLASSES];
    for &i in train_idx {
        class_counts[dataset.sample(i).label.rank()] += 1;
    }
    let weights = spec.loss.resolve_weights(&class_counts)?;

    let normalizer = features::fit_normalizer(dataset, train_idx)?;
    let map = CategoryMap::canonical().clone();

    let users: Vec<String> = {
        let mut set: Vec<String> = train_idx
            .iter()
            .map(|&i| dataset.sample(i).participant_id.clone())
            .collect();
        set.sort();
        set.dedup();
        set
    };
    let mut model = NeuralModel::build(spec.clone(), config.step_dim(), &users)?;

    let train_data = prepare(dataset, train_idx, &normalizer, &map, config, &model)?;
    let val_data = prepare(dataset, val_idx, &normalizer, &map, config, &model)?;
    let val_gold: Vec<SeverityLevel> = val_idx.iter().map(|&i| dataset.sample(i).label).collect();

    let o = spec.optimizer;
    let mut opt = Adam::new(&model.params, o.learning_rate);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x7472_6169_6e);
    let sequence = spec.kind.consumes_sequence();

    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..o.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(o.batch_size) {
            let (x, labels, rows) = train_data.batch(chunk, sequence);
            let mut grads = {
                let mut tape = Tape::new(&model.params);
                let xv = tape.leaf(x);
                let logits = model.forward(&mut tape, xv, rows.as_deref(), Some(&mut rng));
                let loss = spec.loss.apply(&mut tape, logits, &labels, &weights);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(ModelError::Diverged { epoch });
                }
                loss_sum += value * chunk.len() as f64;
                tape.backward(loss)
            };
            opt.step(&mut model.params, &mut grads, o.grad_clip);
        }
        if model.params.any_non_finite() {
            return Err(ModelError::Diverged { epoch });
        }

        let val_pred = eval_split(&model, &val_data, o.batch_size);
        let report = eval::score_labels(&val_pred, &val_gold).expect("lengths match");
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_data.len() as f64,
            val_macro_f1: report.macro_f1,
            val_accuracy: report.accuracy,
        });

        let improved = best
            .as_ref()
            .map(|(_, f1, _)| report.macro_f1 > *f1 + 1e-12)
            .unwrap_or(true);
        if improved {
            best = Some((epoch, report.macro_f1, model.params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= o.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_macro_f1, best_params) = best.expect("at least one epoch ran");
    model.params = best_params;
    Ok(TrainedNeural {
        model,
        normalizer,
        map,
        config,
        history: TrainingHistory { records, best_epoch, best_val_macro_f1 },
    })
}

/// Neural adapter for the forecasting and early-prediction protocols.
pub struct NeuralForecaster {
    pub trained: TrainedNeural,
}

impl Forecaster for NeuralForecaster {
    fn forecast(
        &self,
        dataset: &Dataset,
        windows: &[usize],
        t: usize,
    ) -> Result<Vec<Prediction>, EvalError> {
        let tn = &self.trained;
        let sequence = tn.model.spec.kind.consumes_sequence();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(tn.model.spec.optimizer.batch_size.max(1)) {
            let mut values = Vec::with_capacity(chunk.len());
            let mut rows = Vec::with_capacity(chunk.len());
            let mut steps = None;
            for &i in chunk {
                let sample = dataset.sample(i);
                let tensor =
                    features::represent(sample, t, &tn.normalizer, &tn.map, tn.config, true)
                        .map_err(|e| EvalError::Forecast(e.to_string()))?;
                steps = Some(tensor.time_steps);
                values.push(tensor.values);
                rows.push(tn.model.user_row(&sample.participant_id));
            }
            let steps = steps.expect("nonempty chunk");
            let dim = tn.config.step_dim();
            let shape: Vec<usize> = if sequence {
                vec![chunk.len(), steps, dim]
            } else {
                vec![chunk.len(), dim]
            };
            let mut x = ArrayD::<f64>::zeros(ndarray::IxDyn(&shape));
            {
                let flat = x.as_slice_mut().unwrap();
                let width = if sequence { steps * dim } else { dim };
                for (bi, v) in values.iter().enumerate() {
                    flat[bi * width..(bi + 1) * width].copy_from_slice(v);
                }
            }
            let rows = (!tn.model.users().is_empty()).then_some(rows);
            let logits = tn.model.logits(&x, rows.as_deref()).map_err(|e| match e {
                ModelError::WidthMismatch { expected, got } => EvalError::LayoutMismatch(format!(
                    "model expects per-step width {expected}, got {got}"
                )),
                other => EvalError::Forecast(other.to_string()),
            })?;
            for row in logits.rows() {
                let mut scores = [0.0; NUM_CLASSES];
                scores.copy_from_slice(row.as_slice().unwrap());
                out.push(Prediction::Label(
                    SeverityLevel::from_rank(crate::classical::argmax(&scores)).unwrap(),
                ));
            }
        }
        Ok(out)
    }
}
