//! Define-by-run reverse-mode autodiff over dynamic-rank `f64` tensors.
//!
//! A forward pass appends nodes to a [`Tape`]; insertion order is a valid
//! topological order, so backward is a single reverse sweep. Learnable
//! tensors live in a [`ParamStore`] that outlives tapes; `Tape::param`
//! copies the current value in and records the slot so gradients can be
//! routed back out.
//!
//! Shapes are internal invariants of the model builders, so shape errors
//! panic rather than returning `Result`.

use ndarray::{concatenate, ArrayD, Axis, Ix2, Ix3, IxDyn};
use serde::{Deserialize, Serialize};

/// Row id passed to `gather_rows` meaning "average of all rows". Used for
/// participants absent from the training split.
pub const MEAN_ROW: usize = usize::MAX;

/// Named learnable tensors, persisted across training steps and checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> usize {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, slot: usize) -> &ArrayD<f64> {
        &self.entries[slot].1
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut ArrayD<f64> {
        &mut self.entries[slot].1
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn any_non_finite(&self) -> bool {
        self.entries
            .iter()
            .any(|(_, v)| v.iter().any(|x| !x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param { slot: usize },
    Add(ValueId, ValueId),
    AddBias(ValueId, ValueId),
    MulBias(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    MatMul(ValueId, ValueId),
    BatMatMul(ValueId, ValueId),
    Relu(ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    SoftmaxLast(ValueId),
    LayerNormLast(ValueId),
    Reshape(ValueId),
    Permute(ValueId, Vec<usize>),
    Concat(Vec<ValueId>, usize),
    SelectTime(ValueId, usize),
    MeanAxis(ValueId, usize),
    BroadcastTime(ValueId, usize),
    CausalConv { x: ValueId, w: ValueId, dilation: usize },
    GatherRows { table: ValueId, ids: Vec<usize> },
    SumAll(ValueId),
    WeightedCe { logits: ValueId, labels: Vec<usize>, weights: Vec<f64> },
    Focal { logits: ValueId, labels: Vec<usize>, gamma: f64, alpha: Vec<f64> },
    MaskedMse { pred: ValueId, target: ArrayD<f64>, mask: ArrayD<f64> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Parameter gradients from one backward sweep, indexed like the store.
pub struct Gradients {
    by_slot: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn slot(&self, slot: usize) -> Option<&ArrayD<f64>> {
        self.by_slot[slot].as_ref()
    }

    /// Euclidean norm over all parameter gradients jointly.
    pub fn global_norm(&self) -> f64 {
        self.by_slot
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.by_slot.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }
}

fn softmax_rows(logits: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = logits.clone();
    let last = out.ndim() - 1;
    for mut row in out.lanes_mut(Axis(last)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Sums `g` down to the shape of a rank-1 bias over the last axis.
fn sum_to_bias(g: &ArrayD<f64>) -> ArrayD<f64> {
    let mut acc = g.clone();
    while acc.ndim() > 1 {
        acc = acc.sum_axis(Axis(0));
    }
    acc
}

const LN_EPS: f64 = 1e-5;

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> ValueId {
        self.nodes.push(Node { value, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: ValueId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: ValueId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar() on non-scalar value");
        v.iter().next().copied().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, slot: usize) -> ValueId {
        let value = self.params.value(slot).clone();
        self.push(value, Op::Param { slot })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a rank-1 bias, broadcast over all leading axes.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> ValueId {
        let b = self.value(bias);
        assert_eq!(b.ndim(), 1, "bias must be rank 1");
        assert_eq!(
            self.value(x).shape().last(),
            b.shape().first(),
            "bias width mismatch"
        );
        let bb = b.broadcast(self.value(x).raw_dim()).unwrap().to_owned();
        let v = self.value(x) + &bb;
        self.push(v, Op::AddBias(x, bias))
    }

    /// Multiplies by a rank-1 gain, broadcast over all leading axes.
    pub fn mul_bias(&mut self, x: ValueId, gain: ValueId) -> ValueId {
        let g = self.value(gain);
        assert_eq!(g.ndim(), 1, "gain must be rank 1");
        assert_eq!(
            self.value(x).shape().last(),
            g.shape().first(),
            "gain width mismatch"
        );
        let gg = g.broadcast(self.value(x).raw_dim()).unwrap().to_owned();
        let v = self.value(x) * &gg;
        self.push(v, Op::MulBias(x, gain))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> ValueId {
        let v = self.value(x) * factor;
        self.push(v, Op::Scale(x, factor))
    }

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs rank");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs rank");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        self.push(v, Op::MatMul(a, b))
    }

    /// Batched matrix product `[b,m,k] x [b,k,n] -> [b,m,n]`.
    pub fn bat_matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().expect("bat_matmul lhs rank");
        let bv = self.value(b).view().into_dimensionality::<Ix3>().expect("bat_matmul rhs rank");
        assert_eq!(av.shape()[0], bv.shape()[0], "bat_matmul batch mismatch");
        assert_eq!(av.shape()[2], bv.shape()[1], "bat_matmul inner dim mismatch");
        let (nb, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((nb, m, n));
        for i in 0..nb {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        self.push(out.into_dyn(), Op::BatMatMul(a, b))
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).mapv(|v| v.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let v = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax_last(&mut self, x: ValueId) -> ValueId {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxLast(x))
    }

    /// Zero-mean unit-variance normalization over the last axis, no affine
    /// part (compose with `mul_bias` / `add_bias` for gain and shift).
    pub fn layer_norm_last(&mut self, x: ValueId) -> ValueId {
        let mut v = self.value(x).clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(v, Op::LayerNormLast(x))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> ValueId {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape length mismatch");
        self.push(v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: ValueId, axes: &[usize]) -> ValueId {
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Permute(x, axes.to_vec()))
    }

    pub fn concat(&mut self, inputs: &[ValueId], axis: usize) -> ValueId {
        assert!(!inputs.is_empty(), "concat of nothing");
        let views: Vec<_> = inputs.iter().map(|&id| self.value(id).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        self.push(
            v.as_standard_layout().to_owned(),
            Op::Concat(inputs.to_vec(), axis),
        )
    }

    /// Picks one time step from `[b,t,d]`, yielding `[b,d]`.
    pub fn select_time(&mut self, x: ValueId, t: usize) -> ValueId {
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("select_time rank");
        assert!(t < xv.shape()[1], "select_time index out of range");
        let v = xv.index_axis(Axis(1), t).to_owned().into_dyn();
        self.push(v.as_standard_layout().to_owned(), Op::SelectTime(x, t))
    }

    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> ValueId {
        let v = self
            .value(x)
            .mean_axis(Axis(axis))
            .expect("mean over empty axis");
        self.push(v, Op::MeanAxis(x, axis))
    }

    /// Repeats `[b,d]` across a new time axis, yielding `[b,t,d]`.
    pub fn broadcast_time(&mut self, x: ValueId, steps: usize) -> ValueId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("broadcast_time rank");
        let (b, d) = (xv.nrows(), xv.ncols());
        let v = xv
            .insert_axis(Axis(1))
            .broadcast((b, steps, d))
            .unwrap()
            .to_owned()
            .into_dyn();
        self.push(v, Op::BroadcastTime(x, steps))
    }

    /// Dilated causal convolution: `x [b,t,cin]`, `w [k,cin,cout]`, zero
    /// left-padding, so output step `t` sees inputs at `t, t-d, .., t-(k-1)d`.
    pub fn causal_conv(&mut self, x: ValueId, w: ValueId, dilation: usize) -> ValueId {
        assert!(dilation >= 1, "dilation must be >= 1");
        let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("conv input rank");
        let wv = self.value(w).view().into_dimensionality::<Ix3>().expect("conv kernel rank");
        let (b, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (k, wcin, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(cin, wcin, "conv channel mismatch");
        let mut out = ndarray::Array3::<f64>::zeros((b, t, cout));
        for bi in 0..b {
            for ti in 0..t {
                for ki in 0..k {
                    let back = (k - 1 - ki) * dilation;
                    if back > ti {
                        continue;
                    }
                    let si = ti - back;
                    for ci in 0..cin {
                        let xv_ = xv[[bi, si, ci]];
                        if xv_ == 0.0 {
                            continue;
                        }
                        for co in 0..cout {
                            out[[bi, ti, co]] += xv_ * wv[[ki, ci, co]];
                        }
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::CausalConv { x, w, dilation })
    }

    /// Looks up embedding rows: `table [u,d]`, one output row per id.
    /// [`MEAN_ROW`] selects the mean of all rows.
    pub fn gather_rows(&mut self, table: ValueId, ids: &[usize]) -> ValueId {
        let tv = self.value(table).view().into_dimensionality::<Ix2>().expect("gather table rank");
        let (u, d) = (tv.nrows(), tv.ncols());
        assert!(u > 0, "gather from empty table");
        let mean = tv.mean_axis(Axis(0)).unwrap();
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), d));
        for (row, &id) in ids.iter().enumerate() {
            if id == MEAN_ROW {
                out.row_mut(row).assign(&mean);
            } else {
                assert!(id < u, "gather id out of range");
                out.row_mut(row).assign(&tv.row(id));
            }
        }
        self.push(out.into_dyn(), Op::GatherRows { table, ids: ids.to_vec() })
    }

    pub fn sum_all(&mut self, x: ValueId) -> ValueId {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    /// Mean over the batch of `weights[y] * -log softmax(logits)[y]`.
    /// Plain cross-entropy is the all-ones weighting.
    pub fn weighted_ce(&mut self, logits: ValueId, labels: &[usize], weights: &[f64]) -> ValueId {
        let lv = self.value(logits).view().into_dimensionality::<Ix2>().expect("loss logits rank");
        assert_eq!(lv.nrows(), labels.len(), "loss label count mismatch");
        assert_eq!(lv.ncols(), weights.len(), "loss weight count mismatch");
        let probs = softmax_rows(self.value(logits));
        let pv = probs.view().into_dimensionality::<Ix2>().unwrap();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            // A gold-class probability that underflows to 0 sends the loss
            // to infinity, which the training loop reports as divergence.
            total += weights[y] * -pv[[i, y]].ln();
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / labels.len() as f64);
        self.push(
            v,
            Op::WeightedCe { logits, labels: labels.to_vec(), weights: weights.to_vec() },
        )
    }

    /// Mean over the batch of `-alpha[y] * (1 - p_y)^gamma * log p_y`.
    pub fn focal(
        &mut self,
        logits: ValueId,
        labels: &[usize],
        gamma: f64,
        alpha: &[f64],
    ) -> ValueId {
        assert!(gamma >= 0.0, "gamma must be nonnegative");
        let lv = self.value(logits).view().into_dimensionality::<Ix2>().expect("loss logits rank");
        assert_eq!(lv.nrows(), labels.len(), "loss label count mismatch");
        assert_eq!(lv.ncols(), alpha.len(), "loss alpha count mismatch");
        let probs = softmax_rows(self.value(logits));
        let pv = probs.view().into_dimensionality::<Ix2>().unwrap();
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let p = pv[[i, y]];
            total += -alpha[y] * (1.0 - p).powf(gamma) * p.ln();
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / labels.len() as f64);
        self.push(
            v,
            Op::Focal { logits, labels: labels.to_vec(), gamma, alpha: alpha.to_vec() },
        )
    }

    /// Mean squared error over masked cells only. `mask` entries are 0 or 1;
    /// at least one cell must be masked.
    pub fn masked_mse(&mut self, pred: ValueId, target: ArrayD<f64>, mask: ArrayD<f64>) -> ValueId {
        assert_eq!(self.value(pred).shape(), target.shape(), "mse target shape mismatch");
        assert_eq!(self.value(pred).shape(), mask.shape(), "mse mask shape mismatch");
        let count = mask.sum();
        assert!(count > 0.0, "masked_mse with empty mask");
        let diff = self.value(pred) - &target;
        let v = ArrayD::from_elem(IxDyn(&[]), (&diff * &diff * &mask).sum() / count);
        self.push(v, Op::MaskedMse { pred, target, mask })
    }

    /// Reverse sweep from a scalar root; returns parameter gradients.
    pub fn backward(&mut self, root: ValueId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), 1.0));
        let mut by_slot: Vec<Option<ArrayD<f64>>> = vec![None; self.params.len()];

        fn acc(grads: &mut [Option<ArrayD<f64>>], id: ValueId, delta: ArrayD<f64>) {
            match &mut grads[id.0] {
                Some(g) => *g += &delta,
                slot => *slot = Some(delta),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param { slot } => match &mut by_slot[*slot] {
                    Some(acc) => *acc += &g,
                    empty => *empty = Some(g),
                },
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(&mut grads, a, g.clone());
                    acc(&mut grads, b, g);
                }
                Op::AddBias(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    acc(&mut grads, bias, sum_to_bias(&g));
                    acc(&mut grads, x, g);
                }
                Op::MulBias(x, gain) => {
                    let (x, gain) = (*x, *gain);
                    let gv = self.nodes[gain.0]
                        .value
                        .broadcast(g.raw_dim())
                        .unwrap()
                        .to_owned();
                    acc(&mut grads, gain, sum_to_bias(&(&g * &self.nodes[x.0].value)));
                    acc(&mut grads, x, &g * &gv);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::Scale(x, factor) => {
                    let (x, factor) = (*x, *factor);
                    acc(&mut grads, x, &g * factor);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let ga = gv.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&gv).into_dyn();
                    acc(&mut grads, a, ga);
                    acc(&mut grads, b, gb);
                }
                Op::BatMatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let nb = av.shape()[0];
                    let mut ga = ndarray::Array3::<f64>::zeros((nb, av.shape()[1], av.shape()[2]));
                    let mut gb = ndarray::Array3::<f64>::zeros((nb, bv.shape()[1], bv.shape()[2]));
                    for i in 0..nb {
                        let gi = gv.index_axis(Axis(0), i);
                        ga.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
                        gb.index_axis_mut(Axis(0), i)
                            .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
                    }
                    acc(&mut grads, a, ga.into_dyn());
                    acc(&mut grads, b, gb.into_dyn());
                }
                Op::Relu(x) => {
                    let x = *x;
                    let mask = self.nodes[x.0].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, x, &g * &mask);
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let d = self.nodes[i].value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, x, &g * &d);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let d = self.nodes[i].value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, x, &g * &d);
                }
                Op::SoftmaxLast(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let mut gx = y * &g;
                    let last = gx.ndim() - 1;
                    for (mut gr, yr) in gx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                    {
                        let dot: f64 = gr.sum();
                        for (gi, yi) in gr.iter_mut().zip(yr.iter()) {
                            *gi -= dot * yi;
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                Op::LayerNormLast(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let xv = &self.nodes[x.0].value;
                    let mut gx = g.clone();
                    let last = gx.ndim() - 1;
                    for ((mut gr, yr), xr) in gx
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(y.lanes(Axis(last)))
                        .zip(xv.lanes(Axis(last)))
                    {
                        let n = gr.len() as f64;
                        let mean_x = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let mean_g = gr.sum() / n;
                        let mean_gy: f64 =
                            gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (gi, yi) in gr.iter_mut().zip(yr.iter()) {
                            *gi = inv * (*gi - mean_g - yi * mean_gy);
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                Op::Reshape(x) => {
                    let x = *x;
                    let shape = self.nodes[x.0].value.raw_dim();
                    acc(&mut grads, x, g.into_shape_with_order(shape).unwrap());
                }
                Op::Permute(x, axes) => {
                    let x = *x;
                    let mut inverse = vec![0usize; axes.len()];
                    for (k, &a) in axes.iter().enumerate() {
                        inverse[a] = k;
                    }
                    let gx = g
                        .view()
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .to_owned();
                    acc(&mut grads, x, gx);
                }
                Op::Concat(inputs, axis) => {
                    let (inputs, axis) = (inputs.clone(), *axis);
                    let mut offset = 0usize;
                    for id in inputs {
                        let width = self.nodes[id.0].value.shape()[axis];
                        let part = g
                            .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + width))
                            .to_owned();
                        acc(&mut grads, id, part.as_standard_layout().to_owned());
                        offset += width;
                    }
                }
                Op::SelectTime(x, t) => {
                    let (x, t) = (*x, *t);
                    let mut gx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    gx.index_axis_mut(Axis(1), t)
                        .assign(&g.view().into_dimensionality::<Ix2>().unwrap());
                    acc(&mut grads, x, gx);
                }
                Op::MeanAxis(x, axis) => {
                    let (x, axis) = (*x, *axis);
                    let shape = self.nodes[x.0].value.raw_dim();
                    let n = shape[axis] as f64;
                    let gx = g
                        .insert_axis(Axis(axis))
                        .broadcast(shape)
                        .unwrap()
                        .to_owned()
                        / n;
                    acc(&mut grads, x, gx);
                }
                Op::BroadcastTime(x, _steps) => {
                    let x = *x;
                    acc(&mut grads, x, g.sum_axis(Axis(1)));
                }
                Op::CausalConv { x, w, dilation } => {
                    let (x, w, dilation) = (*x, *w, *dilation);
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (b, t, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let (k, _, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                    let mut gx = ndarray::Array3::<f64>::zeros((b, t, cin));
                    let mut gw = ndarray::Array3::<f64>::zeros((k, cin, cout));
                    for bi in 0..b {
                        for ti in 0..t {
                            for ki in 0..k {
                                let back = (k - 1 - ki) * dilation;
                                if back > ti {
                                    continue;
                                }
                                let si = ti - back;
                                for ci in 0..cin {
                                    for co in 0..cout {
                                        let go = gv[[bi, ti, co]];
                                        gx[[bi, si, ci]] += go * wv[[ki, ci, co]];
                                        gw[[ki, ci, co]] += go * xv[[bi, si, ci]];
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, x, gx.into_dyn());
                    acc(&mut grads, w, gw.into_dyn());
                }
                Op::GatherRows { table, ids } => {
                    let (table, ids) = (*table, ids.clone());
                    let tshape = self.nodes[table.0].value.raw_dim();
                    let u = tshape[0];
                    let mut gt = ArrayD::<f64>::zeros(tshape);
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    let mut gt2 = gt.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (row, &id) in ids.iter().enumerate() {
                        if id == MEAN_ROW {
                            let spread = gv.row(row).mapv(|v| v / u as f64);
                            for r in 0..u {
                                let mut target = gt2.row_mut(r);
                                target += &spread;
                            }
                        } else {
                            let mut target = gt2.row_mut(id);
                            target += &gv.row(row);
                        }
                    }
                    acc(&mut grads, table, gt);
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let go = g.iter().next().copied().unwrap();
                    let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), go);
                    acc(&mut grads, x, gx);
                }
                Op::WeightedCe { logits, labels, weights } => {
                    let (logits, labels, weights) = (*logits, labels.clone(), weights.clone());
                    let go = g.iter().next().copied().unwrap();
                    let probs = softmax_rows(&self.nodes[logits.0].value);
                    let mut gl = probs.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                    let scale = go / labels.len() as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        gl[[i, y]] -= 1.0;
                        let w = weights[y] * scale;
                        for v in gl.row_mut(i) {
                            *v *= w;
                        }
                    }
                    acc(&mut grads, logits, gl.into_dyn());
                }
                Op::Focal { logits, labels, gamma, alpha } => {
                    let (logits, labels, gamma, alpha) =
                        (*logits, labels.clone(), *gamma, alpha.clone());
                    let go = g.iter().next().copied().unwrap();
                    let probs = softmax_rows(&self.nodes[logits.0].value);
                    let pv = probs.view().into_dimensionality::<Ix2>().unwrap();
                    let mut gl = ndarray::Array2::<f64>::zeros(pv.raw_dim());
                    let scale = go / labels.len() as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        let pt = pv[[i, y]].max(1e-300);
                        // dL/dp_t for L = -alpha (1-p)^gamma log p; the
                        // gamma=0 branch avoids 0^(-1) when p_t = 1.
                        let term1 = if gamma > 0.0 {
                            gamma * (1.0 - pt).powf(gamma - 1.0) * pt.ln()
                        } else {
                            0.0
                        };
                        let dldp = alpha[y] * (term1 - (1.0 - pt).powf(gamma) / pt);
                        for j in 0..pv.ncols() {
                            let delta = if j == y { 1.0 } else { 0.0 };
                            gl[[i, j]] = scale * dldp * pt * (delta - pv[[i, j]]);
                        }
                    }
                    acc(&mut grads, logits, gl.into_dyn());
                }
                Op::MaskedMse { pred, target, mask } => {
                    let pred = *pred;
                    let go = g.iter().next().copied().unwrap();
                    let count = mask.sum();
                    let gx = (&self.nodes[pred.0].value - target) * mask * (2.0 * go / count);
                    acc(&mut grads, pred, gx);
                }
            }
        }
        Gradients { by_slot }
    }
}

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |_: usize| {
            (0..store.len())
                .map(|i| ArrayD::zeros(store.value(i).raw_dim()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: zeros(0),
            v: zeros(0),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients, clip: Option<f64>) {
        if let Some(limit) = clip {
            let norm = grads.global_norm();
            if norm > limit {
                grads.scale(limit / norm);
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for slot in 0..store.len() {
            let Some(g) = grads.slot(slot) else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let value = store.value_mut(slot);
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *w -= self.lr * mh / (vh.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array, Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn randn(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_simple_fn(IxDyn(shape), || {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }

    /// Central finite differences on every parameter scalar against the
    /// analytic gradient of a scalar-valued builder.
    fn assert_grads_match(
        store: &mut ParamStore,
        build: impl Fn(&mut Tape) -> ValueId,
        tol: f64,
    ) {
        let analytic = {
            let mut tape = Tape::new(store);
            let root = build(&mut tape);
            tape.backward(root)
        };
        let h = 1e-5;
        for slot in 0..store.len() {
            let n = store.value(slot).len();
            for j in 0..n {
                let orig = store.value(slot).as_slice().unwrap()[j];
                store.value_mut(slot).as_slice_mut().unwrap()[j] = orig + h;
                let fp = {
                    let mut tape = Tape::new(store);
                    let root = build(&mut tape);
                    tape.scalar(root)
                };
                store.value_mut(slot).as_slice_mut().unwrap()[j] = orig - h;
                let fm = {
                    let mut tape = Tape::new(store);
                    let root = build(&mut tape);
                    tape.scalar(root)
                };
                store.value_mut(slot).as_slice_mut().unwrap()[j] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let exact = analytic
                    .slot(slot)
                    .map(|g| g.as_slice().unwrap()[j])
                    .unwrap_or(0.0);
                let denom = exact.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (exact - numeric).abs() / denom < tol,
                    "grad mismatch in {} [{j}]: analytic {exact}, numeric {numeric}",
                    store.name(slot)
                );
            }
        }
    }

    #[test]
    fn dense_chain_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", randn(&mut rng, &[4, 3]));
        let b1 = store.add("b1", randn(&mut rng, &[3]));
        let w2 = store.add("w2", randn(&mut rng, &[3, 2]));
        let x = randn(&mut rng, &[5, 4]);
        let probe = randn(&mut rng, &[5, 2]);
        assert_grads_match(
            &mut store,
            |t| {
                let xv = t.leaf(x.clone());
                let w1v = t.param(w1);
                let b1v = t.param(b1);
                let w2v = t.param(w2);
                let h = t.matmul(xv, w1v);
                let h = t.add_bias(h, b1v);
                let h = t.tanh(h);
                let out = t.matmul(h, w2v);
                let pv = t.leaf(probe.clone());
                let prod = t.mul(out, pv);
                t.sum_all(prod)
            },
            1e-4,
        );
    }

    #[test]
    fn pointwise_and_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let p = store.add("p", randn(&mut rng, &[2, 3, 4]));
        let gain = store.add("gain", randn(&mut rng, &[4]));
        let bias = store.add("bias", randn(&mut rng, &[4]));
        let probe = randn(&mut rng, &[2, 3, 4]);
        assert_grads_match(
            &mut store,
            |t| {
                let x = t.param(p);
                let x = t.relu(x);
                let x = t.layer_norm_last(x);
                let gv = t.param(gain);
                let bv = t.param(bias);
                let x = t.mul_bias(x, gv);
                let x = t.add_bias(x, bv);
                let x = t.sigmoid(x);
                let x = t.softmax_last(x);
                let pv = t.leaf(probe.clone());
                let prod = t.mul(x, pv);
                t.sum_all(prod)
            },
            1e-4,
        );
    }

    #[test]
    fn shape_op_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let p = store.add("p", randn(&mut rng, &[2, 4, 3]));
        let q = store.add("q", randn(&mut rng, &[2, 3, 4]));
        let probe = randn(&mut rng, &[2, 4, 4]);
        let probe2 = randn(&mut rng, &[2, 3]);
        assert_grads_match(
            &mut store,
            |t| {
                let a = t.param(p);
                let b = t.param(q);
                let prod = t.bat_matmul(a, b);
                let pv = t.leaf(probe.clone());
                let s1 = t.mul(prod, pv);
                let s1 = t.sum_all(s1);

                let perm = t.permute(b, &[0, 2, 1]);
                let flat = t.reshape(perm, &[2, 4, 3]);
                let mean = t.mean_axis(flat, 1);
                let sel = t.select_time(a, 2);
                let cat = t.concat(&[mean, sel], 1);
                let third = t.scale(cat, 0.5);
                let narrow = t.reshape(third, &[2, 2, 3]);
                let picked = t.select_time(narrow, 0);
                let pv2 = t.leaf(probe2.clone());
                let s2 = t.mul(picked, pv2);
                let s2 = t.sum_all(s2);
                t.add(s1, s2)
            },
            1e-4,
        );
    }

    #[test]
    fn conv_and_gather_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut store = ParamStore::new();
        let x = store.add("x", randn(&mut rng, &[2, 6, 3]));
        let w = store.add("w", randn(&mut rng, &[3, 3, 2]));
        let table = store.add("table", randn(&mut rng, &[4, 2]));
        let probe = randn(&mut rng, &[2, 6, 2]);
        let probe2 = randn(&mut rng, &[3, 2]);
        assert_grads_match(
            &mut store,
            |t| {
                let xv = t.param(x);
                let wv = t.param(w);
                let conv = t.causal_conv(xv, wv, 2);
                let pv = t.leaf(probe.clone());
                let s1 = t.mul(conv, pv);
                let s1 = t.sum_all(s1);

                let tv = t.param(table);
                let rows = t.gather_rows(tv, &[1, MEAN_ROW, 3]);
                let pv2 = t.leaf(probe2.clone());
                let s2 = t.mul(rows, pv2);
                let s2 = t.sum_all(s2);
                t.add(s1, s2)
            },
            1e-4,
        );
    }

    #[test]
    fn broadcast_time_repeats_and_sums_back() {
        let mut store = ParamStore::new();
        let p = store.add("p", arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let mut tape = Tape::new(&store);
        let x = tape.param(p);
        let rep = tape.broadcast_time(x, 3);
        assert_eq!(tape.value(rep).shape(), &[2, 3, 2]);
        let total = tape.sum_all(rep);
        assert_eq!(tape.scalar(total), 30.0);
        let grads = tape.backward(total);
        assert_eq!(
            grads.slot(p).unwrap(),
            &ArrayD::from_elem(IxDyn(&[2, 2]), 3.0)
        );
    }

    #[test]
    fn causal_conv_never_looks_ahead() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let store = ParamStore::new();
        let x0 = randn(&mut rng, &[1, 8, 2]);
        let w = randn(&mut rng, &[3, 2, 2]);
        let run = |input: &ArrayD<f64>| -> ArrayD<f64> {
            let mut tape = Tape::new(&store);
            let xv = tape.leaf(input.clone());
            let wv = tape.leaf(w.clone());
            let y = tape.causal_conv(xv, wv, 2);
            tape.value(y).clone()
        };
        let base = run(&x0);
        let mut bumped = x0.clone();
        let t = 5;
        bumped[[0usize, t, 0].as_ref()] += 10.0;
        let shifted = run(&bumped);
        for ti in 0..t {
            for co in 0..2 {
                assert_eq!(base[[0usize, ti, co].as_ref()], shifted[[0usize, ti, co].as_ref()]);
            }
        }
        assert_ne!(base[[0usize, t, 0].as_ref()], shifted[[0usize, t, 0].as_ref()]);
    }

    #[test]
    fn gather_mean_row_averages_the_table() {
        let store = {
            let mut s = ParamStore::new();
            s.add("t", arr2(&[[0.0, 2.0], [4.0, 6.0]]).into_dyn());
            s
        };
        let mut tape = Tape::new(&store);
        let table = tape.param(0);
        let rows = tape.gather_rows(table, &[0, MEAN_ROW]);
        let v = tape.value(rows);
        assert_eq!(v[[0usize, 0].as_ref()], 0.0);
        assert_eq!(v[[1usize, 0].as_ref()], 2.0);
        assert_eq!(v[[1usize, 1].as_ref()], 4.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let logits = arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn();
        let a = tape.leaf(logits.clone());
        let sa = tape.softmax_last(a);
        let b = tape.leaf(logits + 7.5);
        let sb = tape.softmax_last(b);
        let (va, vb) = (tape.value(sa), tape.value(sb));
        for (x, y) in va.iter().zip(vb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        let row: f64 = va.view().into_dimensionality::<Ix2>().unwrap().row(0).sum();
        assert!((row - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_reduces_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", arr1(&[5.0, -3.0, 2.0]).into_dyn());
        let mut opt = Adam::new(&store, 0.1);
        let loss_of = |s: &ParamStore| s.value(w).iter().map(|x| x * x).sum::<f64>();
        let initial = loss_of(&store);
        for _ in 0..200 {
            let mut grads = {
                let mut tape = Tape::new(&store);
                let wv = tape.param(w);
                let sq = tape.mul(wv, wv);
                let root = tape.sum_all(sq);
                tape.backward(root)
            };
            opt.step(&mut store, &mut grads, Some(5.0));
        }
        assert!(loss_of(&store) < initial * 1e-4);
    }

    #[test]
    fn masked_mse_only_sees_masked_cells() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let pred = tape.leaf(arr2(&[[1.0, 100.0], [3.0, -50.0]]).into_dyn());
        let target = arr2(&[[0.0, 0.0], [0.0, 0.0]]).into_dyn();
        let mask = arr2(&[[1.0, 0.0], [1.0, 0.0]]).into_dyn();
        let loss = tape.masked_mse(pred, target, mask);
        assert!((tape.scalar(loss) - (1.0 + 9.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn batched_matmul_matches_per_slice_product() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let a: Array3<f64> = Array3::from_shape_simple_fn((3, 2, 4), || rng.random::<f64>());
        let b: Array3<f64> = Array3::from_shape_simple_fn((3, 4, 5), || rng.random::<f64>());
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let av = tape.leaf(a.clone().into_dyn());
        let bv = tape.leaf(b.clone().into_dyn());
        let prod = tape.bat_matmul(av, bv);
        let got = tape.value(prod).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        for i in 0..3 {
            let expect: Array2<f64> =
                a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i));
            let diff = (&got.index_axis(Axis(0), i) - &expect)
                .iter()
                .map(|d| d.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }
}
