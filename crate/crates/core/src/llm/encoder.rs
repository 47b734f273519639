//! Self-supervised pretraining of a window encoder by masked-cell
//! reconstruction.
//!
//! Random cells of a z-scored window are zeroed and flagged, and a small
//! transformer learns to reconstruct the hidden values from the visible
//! ones. The reconstruction head is discarded at embedding time: a window's
//! embedding is the mean hidden state pushed through a frozen random
//! projection, kept outside the trained parameter store on purpose so the
//! embedding space never adapts to the reconstruction objective.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{Dataset, SampleWindow, WINDOW_DAYS};
use crate::error::{LlmError, ModelError};
use crate::features::{
    self, CategoryMap, Dimension, FeatureConfig, Granularity, Layout, Normalizer,
};
use crate::neural::{
    add_positions, affine_norm, init_dense, init_norm, init_tf_block, linear3, randn_init,
    transformer_block, Adam, Dense, NormAffine, ParamStore, Tape, TfBlock, ValueId,
};
use crate::schema::NUM_FEATURES;

const TRAIN_SEED_SALT: u64 = 0x6d61_736b;
const PROJECTOR_SEED_SALT: u64 = 0x70_726f_6a;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    /// Probability that a cell is hidden from the encoder, in (0, 1).
    pub mask_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Output width of the frozen random projection.
    pub projector_width: usize,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            hidden: 32,
            depth: 2,
            heads: 4,
            mask_fraction: 0.15,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            projector_width: 64,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<(), LlmError> {
        check_fraction(self.mask_fraction)?;
        if self.hidden == 0 || self.depth == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(LlmError::Client(
                "encoder spec sizes must be nonzero".into(),
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(LlmError::Client(format!(
                "hidden {} must divide evenly into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.projector_width == 0 {
            return Err(LlmError::Client("projector_width must be nonzero".into()));
        }
        Ok(())
    }
}

fn check_fraction(f: f64) -> Result<(), LlmError> {
    if !(f.is_finite() && f > 0.0 && f < 1.0) {
        return Err(LlmError::BadMaskFraction(f));
    }
    Ok(())
}

struct Layers {
    input: Dense,
    blocks: Vec<TfBlock>,
    norm: NormAffine,
    head: Dense,
}

/// A pretrained window encoder. The parameter store holds the trained
/// transformer; `projector` is the frozen random readout.
pub struct PromptEncoder {
    pub spec: EncoderSpec,
    params: ParamStore,
    layers: Layers,
    projector: Array2<f64>,
    /// Per-feature mean of z-scored training cells; the reconstruction
    /// baseline.
    train_mean: Vec<f64>,
}

pub struct PretrainOutcome {
    pub encoder: PromptEncoder,
    /// Mean masked reconstruction loss per epoch.
    pub loss_history: Vec<f64>,
}

fn z_config() -> FeatureConfig {
    FeatureConfig::new(Dimension::D35, Granularity::Daily, Layout::Sequence)
}

/// A window's z-scored values, step-major, `t * NUM_FEATURES` long.
fn z_values(
    window: &SampleWindow,
    t: usize,
    normalizer: &Normalizer,
) -> Result<Vec<f64>, LlmError> {
    let tensor = features::represent(
        window,
        t,
        normalizer,
        CategoryMap::canonical(),
        z_config(),
        true,
    )?;
    Ok(tensor.values)
}

/// iid Bernoulli mask over `t * NUM_FEATURES` cells; at least one cell is
/// always masked.
fn sample_mask(rng: &mut ChaCha20Rng, t: usize, fraction: f64) -> Vec<f64> {
    let mut mask: Vec<f64> = (0..t * NUM_FEATURES)
        .map(|_| if rng.random::<f64>() < fraction { 1.0 } else { 0.0 })
        .collect();
    if mask.iter().all(|&m| m == 0.0) {
        let forced = rng.random_range(0..mask.len());
        mask[forced] = 1.0;
    }
    mask
}

/// Packs z-values and a mask into the encoder input `[b, t, 2 * F]`:
/// masked cells are zeroed and flagged in the second half of each step.
fn pack_input(z: &[Vec<f64>], mask: &[Vec<f64>], t: usize) -> ArrayD<f64> {
    let b = z.len();
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[b, t, 2 * NUM_FEATURES]));
    let flat = x.as_slice_mut().unwrap();
    for (bi, (zv, mv)) in z.iter().zip(mask).enumerate() {
        for step in 0..t {
            let src = step * NUM_FEATURES;
            let dst = (bi * t + step) * 2 * NUM_FEATURES;
            for f in 0..NUM_FEATURES {
                let hidden = mv[src + f] == 1.0;
                flat[dst + f] = if hidden { 0.0 } else { zv[src + f] };
                flat[dst + NUM_FEATURES + f] = mv[src + f];
            }
        }
    }
    x
}

fn to_tensor(rows: &[Vec<f64>], t: usize, width: usize) -> ArrayD<f64> {
    let b = rows.len();
    let mut x = ArrayD::<f64>::zeros(IxDyn(&[b, t, width]));
    let flat = x.as_slice_mut().unwrap();
    for (bi, r) in rows.iter().enumerate() {
        flat[bi * t * width..(bi + 1) * t * width].copy_from_slice(r);
    }
    x
}

impl PromptEncoder {
    fn build(spec: &EncoderSpec) -> Self {
        let mut store = ParamStore::default();
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ TRAIN_SEED_SALT);
        let h = spec.hidden;
        let input = init_dense(&mut store, &mut rng, "enc.input", 2 * NUM_FEATURES, h);
        let blocks = (0..spec.depth)
            .map(|i| init_tf_block(&mut store, &mut rng, &format!("enc.{i}"), h))
            .collect();
        let norm = init_norm(&mut store, "enc.norm", h);
        let head = init_dense(&mut store, &mut rng, "enc.head", h, NUM_FEATURES);
        let mut proj_rng = ChaCha20Rng::seed_from_u64(spec.seed ^ PROJECTOR_SEED_SALT);
        let projector = randn_init(&mut proj_rng, &[h, spec.projector_width], 1.0 / (h as f64).sqrt())
            .into_dimensionality()
            .expect("2-d projector");
        Self {
            spec: spec.clone(),
            params: store,
            layers: Layers { input, blocks, norm, head },
            projector,
            train_mean: vec![0.0; NUM_FEATURES],
        }
    }

    /// Normalized hidden states `[b, t, hidden]`.
    fn states(&self, tape: &mut Tape, x: ArrayD<f64>) -> ValueId {
        let xv = tape.leaf(x);
        let mut h = linear3(tape, xv, &self.layers.input);
        h = add_positions(tape, h);
        for block in &self.layers.blocks {
            h = transformer_block(tape, h, block, self.spec.heads, 0.0, &mut None);
        }
        affine_norm(tape, h, &self.layers.norm)
    }

    /// Reconstructs all cells from a packed input; `[b, t, F]`.
    fn reconstruct(&self, tape: &mut Tape, x: ArrayD<f64>) -> ValueId {
        let states = self.states(tape, x);
        linear3(tape, states, &self.layers.head)
    }

    /// Embeds a window prefix: unmasked forward pass, hidden states
    /// mean-pooled over time, then the frozen projection.
    pub fn embed(
        &self,
        window: &SampleWindow,
        t: usize,
        normalizer: &Normalizer,
    ) -> Result<Vec<f64>, LlmError> {
        let z = z_values(window, t, normalizer)?;
        let mask = vec![0.0; z.len()];
        let x = pack_input(&[z], &[mask], t);
        let mut tape = Tape::new(&self.params);
        let states = self.states(&mut tape, x);
        let pooled = tape.mean_axis(states, 1);
        let hidden = tape.value(pooled);
        let hidden = hidden.as_slice().unwrap();
        let mut out = vec![0.0; self.spec.projector_width];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..self.spec.hidden)
                .map(|i| hidden[i] * self.projector[(i, j)])
                .sum();
        }
        Ok(out)
    }

    pub fn projector_shape(&self) -> (usize, usize) {
        (self.spec.hidden, self.spec.projector_width)
    }

    pub fn train_mean(&self) -> &[f64] {
        &self.train_mean
    }
}

/// Trains an encoder on the training windows by masked reconstruction.
/// Masks are redrawn every epoch from a generator seeded by the spec, so a
/// fixed spec reproduces its run exactly.
pub fn pretrain_prompt_encoder(
    dataset: &Dataset,
    train_idx: &[usize],
    normalizer: &Normalizer,
    spec: &EncoderSpec,
) -> Result<PretrainOutcome, LlmError> {
    spec.validate()?;
    if train_idx.is_empty() {
        return Err(LlmError::EmptySplit);
    }
    let t = WINDOW_DAYS;
    let z: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| z_values(dataset.sample(i), t, normalizer))
        .collect::<Result<_, _>>()?;

    let mut encoder = PromptEncoder::build(spec);
    let mut mean = vec![0.0; NUM_FEATURES];
    for zv in &z {
        for (c, &v) in zv.iter().enumerate() {
            mean[c % NUM_FEATURES] += v;
        }
    }
    let cells_per_feature = (z.len() * t) as f64;
    for m in &mut mean {
        *m /= cells_per_feature;
    }
    encoder.train_mean = mean;

    let mut opt = Adam::new(&encoder.params, spec.learning_rate);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ TRAIN_SEED_SALT ^ 0xff);
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut loss_history = Vec::with_capacity(spec.epochs);

    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let zb: Vec<Vec<f64>> = chunk.iter().map(|&i| z[i].clone()).collect();
            let mb: Vec<Vec<f64>> = chunk
                .iter()
                .map(|_| sample_mask(&mut rng, t, spec.mask_fraction))
                .collect();
            let x = pack_input(&zb, &mb, t);
            let target = to_tensor(&zb, t, NUM_FEATURES);
            let mask = to_tensor(&mb, t, NUM_FEATURES);
            let mut grads = {
                let mut tape = Tape::new(&encoder.params);
                let pred = encoder.reconstruct(&mut tape, x);
                let loss = tape.masked_mse(pred, target, mask);
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(ModelError::Diverged { epoch }.into());
                }
                loss_sum += value * chunk.len() as f64;
                tape.backward(loss)
            };
            opt.step(&mut encoder.params, &mut grads, Some(5.0));
        }
        if encoder.params.any_non_finite() {
            return Err(ModelError::Diverged { epoch }.into());
        }
        loss_history.push(loss_sum / z.len() as f64);
    }

    Ok(PretrainOutcome { encoder, loss_history })
}

/// Masked reconstruction error of the encoder and of the train-mean
/// baseline on the same freshly drawn masks, each as MSE over masked cells.
pub fn masked_reconstruction_error(
    encoder: &PromptEncoder,
    dataset: &Dataset,
    windows: &[usize],
    normalizer: &Normalizer,
    mask_fraction: f64,
    seed: u64,
) -> Result<(f64, f64), LlmError> {
    check_fraction(mask_fraction)?;
    if windows.is_empty() {
        return Err(LlmError::EmptySplit);
    }
    let t = WINDOW_DAYS;
    let z: Vec<Vec<f64>> = windows
        .iter()
        .map(|&i| z_values(dataset.sample(i), t, normalizer))
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let masks: Vec<Vec<f64>> = z.iter().map(|_| sample_mask(&mut rng, t, mask_fraction)).collect();

    let x = pack_input(&z, &masks, t);
    let mut tape = Tape::new(&encoder.params);
    let pred_id = encoder.reconstruct(&mut tape, x);
    let pred = tape.value(pred_id).as_slice().unwrap().to_vec();

    let width = t * NUM_FEATURES;
    let (mut model_se, mut base_se, mut count) = (0.0, 0.0, 0usize);
    for (bi, (zv, mv)) in z.iter().zip(&masks).enumerate() {
        for c in 0..width {
            if mv[c] == 1.0 {
                let gold = zv[c];
                let m = pred[bi * width + c] - gold;
                let b = encoder.train_mean[c % NUM_FEATURES] - gold;
                model_se += m * m;
                base_se += b * b;
                count += 1;
            }
        }
    }
    let n = count as f64;
    Ok((model_se / n, base_se / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::fit_normalizer;
    use crate::split::split_user_temporal;
    use crate::syngen::{generate, GeneratorConfig};

    fn fixture(seed: u64) -> (Dataset, Vec<usize>, Vec<usize>, Normalizer) {
        // High heterogeneity plants a per-user offset the encoder can read
        // off the unmasked cells of the same feature; the global mean
        // baseline cannot.
        let ds = generate(&GeneratorConfig {
            num_users: 6,
            samples_per_user: (6, 8),
            class_proportions: [0.25; 4],
            separability: 1.0,
            user_heterogeneity: 1.0,
            user_feature_saliency: 0.0,
            noise_std: 0.5,
            seed,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let split = split_user_temporal(&ds).unwrap();
        let norm = fit_normalizer(&ds, &split.train).unwrap();
        (ds, split.train, split.test, norm)
    }

    fn quick_spec(seed: u64) -> EncoderSpec {
        EncoderSpec {
            epochs: 6,
            batch_size: 16,
            seed,
            ..EncoderSpec::default()
        }
    }

    #[test]
    fn bad_mask_fractions_are_rejected() {
        for f in [0.0, 1.0, -0.2, 1.7, f64::NAN] {
            let spec = EncoderSpec { mask_fraction: f, ..EncoderSpec::default() };
            match spec.validate() {
                Err(LlmError::BadMaskFraction(got)) => {
                    assert!(got == f || (got.is_nan() && f.is_nan()))
                }
                other => panic!("fraction {f}: expected rejection, got {other:?}"),
            }
        }
        let spec = EncoderSpec { heads: 5, ..EncoderSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn loss_decreases_over_early_epochs() {
        let mut drops = Vec::new();
        for seed in [1, 2, 3] {
            let (ds, train, _, norm) = fixture(40 + seed);
            let out = pretrain_prompt_encoder(&ds, &train, &norm, &quick_spec(seed)).unwrap();
            assert_eq!(out.loss_history.len(), 6);
            drops.push(out.loss_history[0] - out.loss_history[4]);
        }
        drops.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            drops[1] > 0.0,
            "median loss drop over 5 epochs must be positive, got {drops:?}"
        );
    }

    #[test]
    fn reconstruction_beats_train_mean_baseline_on_held_out_windows() {
        let (ds, train, test, norm) = fixture(50);
        let spec = EncoderSpec { epochs: 20, batch_size: 16, seed: 5, ..EncoderSpec::default() };
        let out = pretrain_prompt_encoder(&ds, &train, &norm, &spec).unwrap();
        let (model, baseline) =
            masked_reconstruction_error(&out.encoder, &ds, &test, &norm, 0.15, 99).unwrap();
        assert!(
            model < baseline,
            "model mse {model:.4} must beat baseline mse {baseline:.4}"
        );
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (ds, train, test, norm) = fixture(60);
        let a = pretrain_prompt_encoder(&ds, &train, &norm, &quick_spec(9)).unwrap();
        let b = pretrain_prompt_encoder(&ds, &train, &norm, &quick_spec(9)).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        let w = ds.sample(test[0]);
        assert_eq!(
            a.encoder.embed(w, 7, &norm).unwrap(),
            b.encoder.embed(w, 7, &norm).unwrap()
        );
    }

    #[test]
    fn embeddings_use_the_frozen_projector() {
        let (ds, train, test, norm) = fixture(70);
        let spec = EncoderSpec { epochs: 1, projector_width: 24, seed: 3, ..EncoderSpec::default() };
        let out = pretrain_prompt_encoder(&ds, &train, &norm, &spec).unwrap();
        assert_eq!(out.encoder.projector_shape(), (32, 24));
        let e1 = out.encoder.embed(ds.sample(test[0]), 7, &norm).unwrap();
        let e2 = out.encoder.embed(ds.sample(test[1]), 7, &norm).unwrap();
        assert_eq!(e1.len(), 24);
        assert!(e1.iter().any(|v| v.abs() > 1e-9));
        assert_ne!(e1, e2, "different windows embed differently");
        // Prefix length changes the embedding too.
        let e3 = out.encoder.embed(ds.sample(test[0]), 14, &norm).unwrap();
        assert_ne!(e1, e3);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let (ds, train, _, norm) = fixture(80);
        let empty: Vec<usize> = Vec::new();
        assert!(matches!(
            pretrain_prompt_encoder(&ds, &empty, &norm, &quick_spec(1)),
            Err(LlmError::EmptySplit)
        ));
        let out = pretrain_prompt_encoder(&ds, &train, &norm, &quick_spec(1)).unwrap();
        assert!(matches!(
            masked_reconstruction_error(&out.encoder, &ds, &empty, &norm, 0.5, 1),
            Err(LlmError::EmptySplit)
        ));
        assert!(matches!(
            masked_reconstruction_error(&out.encoder, &ds, &train, &norm, 0.0, 1),
            Err(LlmError::BadMaskFraction(_))
        ));
    }
}
