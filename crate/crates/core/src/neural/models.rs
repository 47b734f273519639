//! The four sequence architectures and user-embedding personalization.
//!
//! All models map a batch of windows to severity logits `[batch, 4]`.
//! Sequence models (TCN, LSTM with attention, transformer encoder) consume
//! `[batch, time, dim]` and accept any number of time steps, so expanding
//! observation windows need no retraining. The MLP consumes statistically
//! aggregated `[batch, dim]` inputs.
//!
//! With user-embedding personalization each participant gets a learnable
//! row; the row is concatenated to the features at every time step (or to
//! the aggregated vector for the MLP). Participants unseen at training
//! time fall back to the mean of the learned rows.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossKind;
use super::tape::{ParamStore, Tape, ValueId, MEAN_ROW};
use crate::classical::argmax;
use crate::data::{SeverityLevel, NUM_CLASSES};
use crate::error::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuralKind {
    Mlp,
    Tcn,
    LstmAttention,
    TransformerEncoder,
}

impl NeuralKind {
    pub const ALL: [NeuralKind; 4] = [
        NeuralKind::Mlp,
        NeuralKind::Tcn,
        NeuralKind::LstmAttention,
        NeuralKind::TransformerEncoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NeuralKind::Mlp => "mlp",
            NeuralKind::Tcn => "tcn",
            NeuralKind::LstmAttention => "lstm_attention",
            NeuralKind::TransformerEncoder => "transformer_encoder",
        }
    }

    /// Sequence models take `[batch, time, dim]`; the MLP takes `[batch, dim]`.
    pub fn consumes_sequence(&self) -> bool {
        !matches!(self, NeuralKind::Mlp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NeuralPersonalization {
    Agnostic,
    UserEmbedding { dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a new best validation macro-F1 before stopping.
    pub patience: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 32,
            patience: 10,
            grad_clip: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralSpec {
    pub kind: NeuralKind,
    /// Hidden width: MLP layer size, TCN channels, LSTM state size,
    /// transformer model dimension.
    pub hidden: usize,
    /// MLP hidden layers, TCN residual blocks (block `i` dilates by `2^i`),
    /// stacked LSTM layers, or transformer encoder blocks.
    pub depth: usize,
    /// Attention heads (transformer only); must divide `hidden`.
    pub heads: usize,
    /// Convolution kernel size (TCN only).
    pub kernel: usize,
    pub dropout: f64,
    pub personalization: NeuralPersonalization,
    pub loss: LossKind,
    pub optimizer: OptimizerSettings,
    pub seed: u64,
}

impl NeuralSpec {
    pub fn new(kind: NeuralKind) -> Self {
        Self {
            kind,
            hidden: 32,
            depth: 2,
            heads: 4,
            kernel: 3,
            dropout: 0.1,
            personalization: NeuralPersonalization::Agnostic,
            loss: LossKind::CrossEntropy,
            optimizer: OptimizerSettings::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidSpec(msg));
        if self.hidden == 0 || self.depth == 0 {
            return bad(format!(
                "hidden ({}) and depth ({}) must be positive",
                self.hidden, self.depth
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.kind == NeuralKind::TransformerEncoder {
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return bad(format!(
                    "heads ({}) must divide hidden width ({})",
                    self.heads, self.hidden
                ));
            }
        }
        if self.kind == NeuralKind::Tcn && self.kernel == 0 {
            return bad("kernel must be positive".into());
        }
        if let NeuralPersonalization::UserEmbedding { dim } = self.personalization {
            if dim == 0 {
                return bad("user embedding dim must be positive".into());
            }
        }
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", o.learning_rate));
        }
        if o.epochs == 0 || o.batch_size == 0 || o.patience == 0 {
            return bad("epochs, batch_size, and patience must be positive".into());
        }
        if let Some(c) = o.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("grad clip {c} must be positive"));
            }
        }
        self.loss.validate()
    }

    pub fn embedding_dim(&self) -> usize {
        match self.personalization {
            NeuralPersonalization::Agnostic => 0,
            NeuralPersonalization::UserEmbedding { dim } => dim,
        }
    }
}

#[derive(Debug)]
pub(crate) struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug)]
struct Conv {
    w: usize,
    b: usize,
    dilation: usize,
}

#[derive(Debug)]
pub(crate) struct NormAffine {
    gain: usize,
    bias: usize,
}

/// Gate order: input, forget, cell, output.
#[derive(Debug)]
struct LstmLayer {
    wx: [usize; 4],
    wh: [usize; 4],
    b: [usize; 4],
}

#[derive(Debug)]
struct Additive {
    proj: Dense,
    score: usize,
}

#[derive(Debug)]
pub(crate) struct TfBlock {
    norm1: NormAffine,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    norm2: NormAffine,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Debug)]
enum Arch {
    Mlp { layers: Vec<Dense>, head: Dense },
    Tcn { lift: Conv, blocks: Vec<Conv>, head: Dense },
    Lstm { layers: Vec<LstmLayer>, attention: Additive, head: Dense },
    Transformer { input: Dense, blocks: Vec<TfBlock>, norm: NormAffine, head: Dense },
}

#[derive(Debug)]
pub struct NeuralModel {
    pub spec: NeuralSpec,
    /// Per-step width (sequence kinds) or aggregated width (MLP), before
    /// any embedding concatenation.
    pub input_dim: usize,
    pub params: ParamStore,
    /// Embedding row order; empty under agnostic personalization.
    users: Vec<String>,
    user_rows: BTreeMap<String, usize>,
    embedding_slot: Option<usize>,
    arch: Arch,
}

pub(crate) fn randn_init(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        rng.sample::<f64, _>(rand_distr::StandardNormal) * std
    })
}

pub(crate) fn init_dense(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Dense {
    let std = 1.0 / (fan_in as f64).sqrt();
    Dense {
        w: store.add(&format!("{name}.w"), randn_init(rng, &[fan_in, fan_out], std)),
        b: store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out]))),
    }
}

fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    name: &str,
    kernel: usize,
    cin: usize,
    cout: usize,
    dilation: usize,
) -> Conv {
    let std = 1.0 / ((kernel * cin) as f64).sqrt();
    Conv {
        w: store.add(&format!("{name}.w"), randn_init(rng, &[kernel, cin, cout], std)),
        b: store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))),
        dilation,
    }
}

pub(crate) fn init_norm(store: &mut ParamStore, name: &str, dim: usize) -> NormAffine {
    NormAffine {
        gain: store.add(&format!("{name}.gain"), ArrayD::from_elem(IxDyn(&[dim]), 1.0)),
        bias: store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dim]))),
    }
}

pub(crate) fn init_tf_block(
    store: &mut ParamStore,
    rng: &mut ChaCha20Rng,
    prefix: &str,
    h: usize,
) -> TfBlock {
    TfBlock {
        norm1: init_norm(store, &format!("{prefix}.norm1"), h),
        q: init_dense(store, rng, &format!("{prefix}.q"), h, h),
        k: init_dense(store, rng, &format!("{prefix}.k"), h, h),
        v: init_dense(store, rng, &format!("{prefix}.v"), h, h),
        o: init_dense(store, rng, &format!("{prefix}.o"), h, h),
        norm2: init_norm(store, &format!("{prefix}.norm2"), h),
        ff1: init_dense(store, rng, &format!("{prefix}.ff1"), h, 2 * h),
        ff2: init_dense(store, rng, &format!("{prefix}.ff2"), 2 * h, h),
    }
}

pub(crate) type DropRng<'a> = Option<&'a mut ChaCha20Rng>;

pub(crate) fn dropout(tape: &mut Tape, x: ValueId, p: f64, rng: &mut DropRng) -> ValueId {
    let Some(rng) = rng.as_deref_mut() else { return x };
    if p == 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let mask = ArrayD::from_shape_simple_fn(tape.value(x).raw_dim(), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = tape.leaf(mask);
    tape.mul(x, m)
}

/// Applies a dense layer across the last axis of a `[b,t,d]` tensor.
pub(crate) fn linear3(tape: &mut Tape, x: ValueId, layer: &Dense) -> ValueId {
    let shape = tape.value(x).shape().to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(x, &[b * t, d]);
    let w = tape.param(layer.w);
    let bv = tape.param(layer.b);
    let out = tape.matmul(flat, w);
    let out = tape.add_bias(out, bv);
    let e = tape.value(out).shape()[1];
    tape.reshape(out, &[b, t, e])
}

fn dense2(tape: &mut Tape, x: ValueId, layer: &Dense) -> ValueId {
    let w = tape.param(layer.w);
    let b = tape.param(layer.b);
    let out = tape.matmul(x, w);
    tape.add_bias(out, b)
}

pub(crate) fn affine_norm(tape: &mut Tape, x: ValueId, norm: &NormAffine) -> ValueId {
    let n = tape.layer_norm_last(x);
    let g = tape.param(norm.gain);
    let b = tape.param(norm.bias);
    let scaled = tape.mul_bias(n, g);
    tape.add_bias(scaled, b)
}

pub(crate) fn sinusoidal_positions(steps: usize, dim: usize) -> Array2<f64> {
    let mut table = Array2::zeros((steps, dim));
    for pos in 0..steps {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            table[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

/// Adds the fixed sinusoidal position table to a `[b,t,d]` tensor.
pub(crate) fn add_positions(tape: &mut Tape, h: ValueId) -> ValueId {
    let shape = tape.value(h).shape().to_vec();
    let (batch, steps, dm) = (shape[0], shape[1], shape[2]);
    let pos = sinusoidal_positions(steps, dm)
        .insert_axis(ndarray::Axis(0))
        .broadcast((batch, steps, dm))
        .unwrap()
        .to_owned()
        .into_dyn();
    let pos_id = tape.leaf(pos);
    tape.add(h, pos_id)
}

/// Pre-norm encoder block: multi-head self-attention and a feed-forward
/// expansion, each behind a residual connection.
pub(crate) fn transformer_block(
    tape: &mut Tape,
    h: ValueId,
    block: &TfBlock,
    heads: usize,
    p: f64,
    drop: &mut DropRng,
) -> ValueId {
    let shape = tape.value(h).shape().to_vec();
    let (batch, steps, dm) = (shape[0], shape[1], shape[2]);
    let dh = dm / heads;
    let mut h = h;

    let n1 = affine_norm(tape, h, &block.norm1);
    let split = |tape: &mut Tape, v: ValueId| {
        let r = tape.reshape(v, &[batch, steps, heads, dh]);
        let pm = tape.permute(r, &[0, 2, 1, 3]);
        tape.reshape(pm, &[batch * heads, steps, dh])
    };
    let q = linear3(tape, n1, &block.q);
    let k = linear3(tape, n1, &block.k);
    let v = linear3(tape, n1, &block.v);
    let qh = split(tape, q);
    let kh = split(tape, k);
    let vh = split(tape, v);
    let kt = tape.permute(kh, &[0, 2, 1]);
    let scores = tape.bat_matmul(qh, kt);
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = tape.softmax_last(scores);
    let ctx = tape.bat_matmul(attn, vh);
    let ctx = tape.reshape(ctx, &[batch, heads, steps, dh]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = tape.reshape(ctx, &[batch, steps, dm]);
    let ctx = linear3(tape, ctx, &block.o);
    let ctx = dropout(tape, ctx, p, drop);
    h = tape.add(h, ctx);

    let n2 = affine_norm(tape, h, &block.norm2);
    let ff = linear3(tape, n2, &block.ff1);
    let ff = tape.relu(ff);
    let ff = dropout(tape, ff, p, drop);
    let ff = linear3(tape, ff, &block.ff2);
    tape.add(h, ff)
}

impl NeuralModel {
    /// Builds a freshly initialized model. `users` is the embedding row
    /// order (train-split participants); ignored under agnostic
    /// personalization.
    pub fn build(spec: NeuralSpec, input_dim: usize, users: &[String]) -> Result<Self, ModelError> {
        spec.validate()?;
        if input_dim == 0 {
            return Err(ModelError::InvalidSpec("input dim must be positive".into()));
        }
        let de = spec.embedding_dim();
        if de > 0 && users.is_empty() {
            return Err(ModelError::InvalidSpec(
                "user embeddings need a nonempty user list".into(),
            ));
        }
        let users: Vec<String> = if de > 0 { users.to_vec() } else { Vec::new() };

        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed ^ 0x6e65_7572_616c);
        let embedding_slot = (de > 0).then(|| {
            store.add("user_embedding", randn_init(&mut rng, &[users.len(), de], 0.1))
        });
        let step_in = input_dim + de;
        let h = spec.hidden;

        let arch = match spec.kind {
            NeuralKind::Mlp => {
                let mut layers = Vec::new();
                let mut fan_in = step_in;
                for i in 0..spec.depth {
                    layers.push(init_dense(&mut store, &mut rng, &format!("mlp.{i}"), fan_in, h));
                    fan_in = h;
                }
                let head = init_dense(&mut store, &mut rng, "head", fan_in, NUM_CLASSES);
                Arch::Mlp { layers, head }
            }
            NeuralKind::Tcn => {
                let lift = init_conv(&mut store, &mut rng, "lift", 1, step_in, h, 1);
                let blocks = (0..spec.depth)
                    .map(|i| {
                        init_conv(
                            &mut store,
                            &mut rng,
                            &format!("block.{i}"),
                            spec.kernel,
                            h,
                            h,
                            1 << i,
                        )
                    })
                    .collect();
                let head = init_dense(&mut store, &mut rng, "head", h, NUM_CLASSES);
                Arch::Tcn { lift, blocks, head }
            }
            NeuralKind::LstmAttention => {
                let gate_names = ["i", "f", "g", "o"];
                let mut layers = Vec::new();
                let mut fan_in = step_in;
                for l in 0..spec.depth {
                    let mut wx = [0; 4];
                    let mut wh = [0; 4];
                    let mut b = [0; 4];
                    for (gi, gate) in gate_names.iter().enumerate() {
                        let std_x = 1.0 / (fan_in as f64).sqrt();
                        let std_h = 1.0 / (h as f64).sqrt();
                        wx[gi] = store.add(
                            &format!("lstm.{l}.wx{gate}"),
                            randn_init(&mut rng, &[fan_in, h], std_x),
                        );
                        wh[gi] = store.add(
                            &format!("lstm.{l}.wh{gate}"),
                            randn_init(&mut rng, &[h, h], std_h),
                        );
                        // Forget-gate bias starts at 1 so early training
                        // retains state.
                        let init = if *gate == "f" { 1.0 } else { 0.0 };
                        b[gi] = store.add(
                            &format!("lstm.{l}.b{gate}"),
                            ArrayD::from_elem(IxDyn(&[h]), init),
                        );
                    }
                    layers.push(LstmLayer { wx, wh, b });
                    fan_in = h;
                }
                let attention = Additive {
                    proj: init_dense(&mut store, &mut rng, "attn", h, h),
                    score: store.add("attn.score", randn_init(&mut rng, &[h, 1], 1.0 / (h as f64).sqrt())),
                };
                let head = init_dense(&mut store, &mut rng, "head", h, NUM_CLASSES);
                Arch::Lstm { layers, attention, head }
            }
            NeuralKind::TransformerEncoder => {
                let input = init_dense(&mut store, &mut rng, "input", step_in, h);
                let blocks = (0..spec.depth)
                    .map(|i| init_tf_block(&mut store, &mut rng, &format!("tf.{i}"), h))
                    .collect();
                let norm = init_norm(&mut store, "final_norm", h);
                let head = init_dense(&mut store, &mut rng, "head", h, NUM_CLASSES);
                Arch::Transformer { input, blocks, norm, head }
            }
        };

        let user_rows = users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        Ok(Self {
            spec,
            input_dim,
            params: store,
            users,
            user_rows,
            embedding_slot,
            arch,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    /// Embedding row for a participant; unseen participants get the mean
    /// of the learned rows.
    pub fn user_row(&self, participant_id: &str) -> usize {
        self.user_rows.get(participant_id).copied().unwrap_or(MEAN_ROW)
    }

    fn check_input(&self, x: &ArrayD<f64>, user_rows: Option<&[usize]>) -> Result<(), ModelError> {
        let want_rank = if self.spec.kind.consumes_sequence() { 3 } else { 2 };
        if x.ndim() != want_rank {
            return Err(ModelError::InvalidSpec(format!(
                "{} expects rank-{want_rank} input, got rank {}",
                self.spec.kind.name(),
                x.ndim()
            )));
        }
        let got = *x.shape().last().unwrap();
        if got != self.input_dim {
            return Err(ModelError::WidthMismatch { expected: self.input_dim, got });
        }
        if self.embedding_slot.is_some() {
            match user_rows {
                None => {
                    return Err(ModelError::InvalidSpec(
                        "user-embedding model needs participant rows".into(),
                    ))
                }
                Some(rows) if rows.len() != x.shape()[0] => {
                    return Err(ModelError::InvalidSpec(format!(
                        "{} participant rows for batch of {}",
                        rows.len(),
                        x.shape()[0]
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Forward pass to logits `[batch, 4]`. Dropout is active only when a
    /// noise source is supplied. Shapes must have been validated.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: ValueId,
        user_rows: Option<&[usize]>,
        mut drop: DropRng,
    ) -> ValueId {
        let p = self.spec.dropout;
        let x = self.concat_embedding(tape, x, user_rows);
        match &self.arch {
            Arch::Mlp { layers, head } => {
                let mut h = x;
                for layer in layers {
                    h = dense2(tape, h, layer);
                    h = tape.relu(h);
                    h = dropout(tape, h, p, &mut drop);
                }
                dense2(tape, h, head)
            }
            Arch::Tcn { lift, blocks, head } => {
                let mut h = self.conv_layer(tape, x, lift);
                h = tape.relu(h);
                for block in blocks {
                    let mut y = self.conv_layer(tape, h, block);
                    y = tape.relu(y);
                    y = dropout(tape, y, p, &mut drop);
                    h = tape.add(h, y);
                }
                let steps = tape.value(h).shape()[1];
                let last = tape.select_time(h, steps - 1);
                dense2(tape, last, head)
            }
            Arch::Lstm { layers, attention, head } => {
                let shape = tape.value(x).shape().to_vec();
                let (batch, steps) = (shape[0], shape[1]);
                let hsz = self.spec.hidden;
                let mut inputs: Vec<ValueId> =
                    (0..steps).map(|t| tape.select_time(x, t)).collect();
                for (li, layer) in layers.iter().enumerate() {
                    let mut h = tape.leaf(ArrayD::zeros(IxDyn(&[batch, hsz])));
                    let mut c = tape.leaf(ArrayD::zeros(IxDyn(&[batch, hsz])));
                    let mut outputs = Vec::with_capacity(steps);
                    for &xt in &inputs {
                        let gate = |tape: &mut Tape, gi: usize| {
                            let wx = tape.param(layer.wx[gi]);
                            let wh = tape.param(layer.wh[gi]);
                            let b = tape.param(layer.b[gi]);
                            let a = tape.matmul(xt, wx);
                            let r = tape.matmul(h, wh);
                            let s = tape.add(a, r);
                            tape.add_bias(s, b)
                        };
                        let i_g = gate(tape, 0);
                        let i_g = tape.sigmoid(i_g);
                        let f_g = gate(tape, 1);
                        let f_g = tape.sigmoid(f_g);
                        let g_g = gate(tape, 2);
                        let g_g = tape.tanh(g_g);
                        let o_g = gate(tape, 3);
                        let o_g = tape.sigmoid(o_g);
                        let keep = tape.mul(f_g, c);
                        let write = tape.mul(i_g, g_g);
                        c = tape.add(keep, write);
                        let ct = tape.tanh(c);
                        h = tape.mul(o_g, ct);
                        outputs.push(h);
                    }
                    if li + 1 < layers.len() {
                        outputs = outputs
                            .into_iter()
                            .map(|o| dropout(tape, o, p, &mut drop))
                            .collect();
                    }
                    inputs = outputs;
                }
                // Additive attention over the final layer's hidden states.
                let mut scores = Vec::with_capacity(steps);
                let mut stacked = Vec::with_capacity(steps);
                for &ht in &inputs {
                    let e = dense2(tape, ht, &attention.proj);
                    let e = tape.tanh(e);
                    let v = tape.param(attention.score);
                    let e = tape.matmul(e, v);
                    scores.push(e);
                    stacked.push(tape.reshape(ht, &[batch, 1, hsz]));
                }
                let scores = tape.concat(&scores, 1);
                let weights = tape.softmax_last(scores);
                let weights = tape.reshape(weights, &[batch, 1, steps]);
                let states = tape.concat(&stacked, 1);
                let context = tape.bat_matmul(weights, states);
                let context = tape.reshape(context, &[batch, hsz]);
                let context = dropout(tape, context, p, &mut drop);
                dense2(tape, context, head)
            }
            Arch::Transformer { input, blocks, norm, head } => {
                let mut h = linear3(tape, x, input);
                h = add_positions(tape, h);
                for block in blocks {
                    h = transformer_block(tape, h, block, self.spec.heads, p, &mut drop);
                }
                let h = affine_norm(tape, h, norm);
                let pooled = tape.mean_axis(h, 1);
                dense2(tape, pooled, head)
            }
        }
    }

    fn concat_embedding(
        &self,
        tape: &mut Tape,
        x: ValueId,
        user_rows: Option<&[usize]>,
    ) -> ValueId {
        let Some(slot) = self.embedding_slot else { return x };
        let rows = user_rows.expect("validated: embedding model without rows");
        let table = tape.param(slot);
        let emb = tape.gather_rows(table, rows);
        if self.spec.kind.consumes_sequence() {
            let steps = tape.value(x).shape()[1];
            let tiled = tape.broadcast_time(emb, steps);
            tape.concat(&[x, tiled], 2)
        } else {
            tape.concat(&[x, emb], 1)
        }
    }

    fn conv_layer(&self, tape: &mut Tape, x: ValueId, conv: &Conv) -> ValueId {
        let w = tape.param(conv.w);
        let b = tape.param(conv.b);
        let y = tape.causal_conv(x, w, conv.dilation);
        tape.add_bias(y, b)
    }

    /// Evaluation-mode logits.
    pub fn logits(
        &self,
        x: &ArrayD<f64>,
        user_rows: Option<&[usize]>,
    ) -> Result<Array2<f64>, ModelError> {
        self.check_input(x, user_rows)?;
        let mut tape = Tape::new(&self.params);
        let xv = tape.leaf(x.clone());
        let out = self.forward(&mut tape, xv, user_rows, None);
        Ok(tape
            .value(out)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned())
    }

    /// Evaluation-mode class predictions; ties break toward lower severity.
    pub fn predict(
        &self,
        x: &ArrayD<f64>,
        participant_ids: Option<&[&str]>,
    ) -> Result<Vec<SeverityLevel>, ModelError> {
        let rows: Option<Vec<usize>> = if self.embedding_slot.is_some() {
            let ids = participant_ids.ok_or_else(|| {
                ModelError::InvalidSpec("user-embedding model needs participant ids".into())
            })?;
            Some(ids.iter().map(|id| self.user_row(id)).collect())
        } else {
            None
        };
        let logits = self.logits(x, rows.as_deref())?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut scores = [0.0; NUM_CLASSES];
                scores.copy_from_slice(r.as_slice().unwrap());
                SeverityLevel::from_rank(argmax(&scores)).unwrap()
            })
            .collect())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MCNC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    spec: NeuralSpec,
    input_dim: usize,
    users: Vec<String>,
    train_fingerprint: String,
}

pub fn save_checkpoint(
    model: &NeuralModel,
    train_fingerprint: &str,
    path: &Path,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        input_dim: model.input_dim,
        users: model.users.clone(),
        train_fingerprint: train_fingerprint.to_string(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let body_json =
        serde_json::to_vec(&model.params).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + header_json.len() + body_json.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&body_json);
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Restores a model and the fingerprint of the data it was trained on.
pub fn load_checkpoint(path: &Path) -> Result<(NeuralModel, String), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("not a neural checkpoint".into()));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(ModelError::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.format_version
        )));
    }
    let params: ParamStore = serde_json::from_slice(&bytes[12 + header_len..])
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut model = NeuralModel::build(header.spec, header.input_dim, &header.users)?;
    if params.len() != model.params.len() {
        return Err(ModelError::Checkpoint("parameter table mismatch".into()));
    }
    for slot in 0..params.len() {
        if params.name(slot) != model.params.name(slot)
            || params.value(slot).shape() != model.params.value(slot).shape()
        {
            return Err(ModelError::Checkpoint(format!(
                "parameter {} does not match the spec layout",
                params.name(slot)
            )));
        }
    }
    model.params = params;
    Ok((model, header.train_fingerprint))
}
