//! Reverse-mode automatic differentiation on an arena tape.
//!
//! The [`Tape`] owns every tensor produced during a forward pass; a
//! [`Var`] is an index into that arena plus the tape's identity, so vars
//! from different tapes cannot be mixed silently. Each recorded step
//! stores the operation kind and its input indices; [`Tape::backward`]
//! walks the steps in exact reverse execution order and accumulates
//! gradients with `+=`, so a value used twice receives both
//! contributions.
//!
//! Inner loops are written as contiguous-slice `axpy`/`dot` kernels:
//! independent output lanes vectorize, and reductions use split
//! accumulators so the compiler is not blocked by a serial dependency
//! chain. Reduction order is fixed, which keeps results bitwise
//! reproducible run to run.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{fmt_shape, Error, Result};
use crate::math;
use crate::tensor::Tensor;

static TAPE_IDS: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    ix: usize,
}

impl Var {
    /// Position of the value in tape execution order.
    pub fn index(&self) -> usize {
        self.ix
    }
}

/// Whether stateful operations (batch norm) use batch statistics and
/// update their running estimates, or read the stored estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Storage precision of values recorded on the tape. `F32` rounds every
/// produced value through `f32`, emulating single-precision storage
/// while accumulating in `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Running batch-norm statistics, owned by the layer, updated in train
/// mode with momentum and read in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self { running_mean: vec![0.0; channels], running_var: vec![1.0; channels] }
    }
}

enum Step {
    Leaf,
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    PermuteLast2 { x: usize },
    Relu { x: usize },
    SoftmaxRows { x: usize },
    Conv2d { x: usize, w: usize, stride_t: usize, pad_t: usize },
    AddBias { x: usize, b: usize, axis: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, var: Vec<f64>, eps: f64, train: bool },
    MixLast { x: usize, g: usize },
    GlobalAvgPool { x: usize },
    SumAll { x: usize },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

/// A read-only view of one recorded operation: its name, the shapes of
/// its tensor inputs, and the shape of its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpView {
    pub name: &'static str,
    pub input_shapes: Vec<Vec<usize>>,
    pub output_shape: Vec<usize>,
}

/// Gradients keyed by [`Var`], produced by [`Tape::backward`]. Only
/// gradient leaves are retained; intermediate gradients are dropped as
/// soon as the backward sweep has consumed them.
#[derive(Debug)]
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if `v` is from another tape, was not
    /// a retained leaf, or lies after the loss in execution order.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.ix).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.ix).and_then(|g| g.take())
    }
}

pub struct Tape {
    id: usize,
    vals: Vec<Tensor>,
    steps: Vec<Step>,
    precision: Precision,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            vals: Vec::new(),
            steps: Vec::new(),
            precision,
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Registers an input tensor. Its `requires_grad` flag decides
    /// whether [`Tape::backward`] retains a gradient for it.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        round_buf(self.precision, t.data_mut());
        self.push(t, Step::Leaf)
    }

    /// Value of a recorded var.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.vals[v.ix])
    }

    /// Read-only views of every recorded operation in execution order,
    /// for diagnostics and cost accounting.
    pub fn ops(&self) -> Vec<OpView> {
        let shape = |ix: &usize| self.vals[*ix].shape().to_vec();
        self.steps
            .iter()
            .enumerate()
            .map(|(i, step)| {
                let (name, input_shapes) = match step {
                    Step::Leaf => ("leaf", vec![]),
                    Step::Add { a, b } => ("add", vec![shape(a), shape(b)]),
                    Step::Mul { a, b } => ("mul", vec![shape(a), shape(b)]),
                    Step::Matmul { a, b } => ("matmul", vec![shape(a), shape(b)]),
                    Step::Transpose { x } => ("transpose2d", vec![shape(x)]),
                    Step::Reshape { x } => ("reshape", vec![shape(x)]),
                    Step::PermuteLast2 { x } => ("permute_last2", vec![shape(x)]),
                    Step::Relu { x } => ("relu", vec![shape(x)]),
                    Step::SoftmaxRows { x } => ("softmax_rows", vec![shape(x)]),
                    Step::Conv2d { x, w, .. } => ("conv2d", vec![shape(x), shape(w)]),
                    Step::AddBias { x, b, .. } => ("add_bias", vec![shape(x), shape(b)]),
                    Step::BatchNorm { x, gamma, beta, .. } => {
                        ("batch_norm", vec![shape(x), shape(gamma), shape(beta)])
                    }
                    Step::MixLast { x, g } => ("mix_last", vec![shape(x), shape(g)]),
                    Step::GlobalAvgPool { x } => ("global_avg_pool", vec![shape(x)]),
                    Step::SumAll { x } => ("sum_all", vec![shape(x)]),
                    Step::CrossEntropy { logits, .. } => ("cross_entropy", vec![shape(logits)]),
                };
                OpView { name, input_shapes, output_shape: self.vals[i].shape().to_vec() }
            })
            .collect()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.ix >= self.vals.len() {
            return Err(Error::Contract(alloc::format!(
                "var {} does not belong to this tape",
                v.ix
            )));
        }
        Ok(())
    }

    fn push(&mut self, t: Tensor, step: Step) -> Var {
        self.vals.push(t);
        self.steps.push(step);
        Var { tape: self.id, ix: self.vals.len() - 1 }
    }

    fn produce(&mut self, mut t: Tensor, step: Step) -> Var {
        round_buf(self.precision, t.data_mut());
        self.push(t, step)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.vals[a.ix], &self.vals[b.ix]);
        if ta.shape() != tb.shape() {
            return Err(Error::Dim(alloc::format!(
                "add expects equal shapes, got {} and {}",
                fmt_shape(ta.shape()),
                fmt_shape(tb.shape())
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.produce(out, Step::Add { a: a.ix, b: b.ix }))
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.vals[a.ix], &self.vals[b.ix]);
        if ta.shape() != tb.shape() {
            return Err(Error::Dim(alloc::format!(
                "mul expects equal shapes, got {} and {}",
                fmt_shape(ta.shape()),
                fmt_shape(tb.shape())
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.produce(out, Step::Mul { a: a.ix, b: b.ix }))
    }

    /// Matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.vals[a.ix], &self.vals[b.ix]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Dim(alloc::format!(
                "matmul expects [m, k] by [k, n], got {} and {}",
                fmt_shape(ta.shape()),
                fmt_shape(tb.shape())
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = mm(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(&[m, n], data)?;
        Ok(self.produce(out, Step::Matmul { a: a.ix, b: b.ix }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.vals[x.ix].transposed()?;
        Ok(self.produce(out, Step::Transpose { x: x.ix }))
    }

    /// Same buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.vals[x.ix].reshaped(shape)?;
        Ok(self.produce(out, Step::Reshape { x: x.ix }))
    }

    /// Swaps the last two axes of a rank-4 tensor.
    pub fn permute_last2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = &self.vals[x.ix];
        if tx.rank() != 4 {
            return Err(Error::Dim(alloc::format!(
                "permute_last2 expects rank 4, got {}",
                fmt_shape(tx.shape())
            )));
        }
        let (a, b, c, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let src = tx.data();
        let mut data = vec![0.0; src.len()];
        for ab in 0..a * b {
            let base = ab * c * d;
            for i in 0..c {
                for j in 0..d {
                    data[base + j * c + i] = src[base + i * d + j];
                }
            }
        }
        let out = Tensor::new(&[a, b, d, c], data)?;
        Ok(self.produce(out, Step::PermuteLast2 { x: x.ix }))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = &self.vals[x.ix];
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.produce(out, Step::Relu { x: x.ix }))
    }

    /// Row-wise softmax of a rank-2 tensor, computed with the max-shift
    /// for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = &self.vals[x.ix];
        if tx.rank() != 2 {
            return Err(Error::Dim(alloc::format!(
                "softmax_rows expects rank 2, got {}",
                fmt_shape(tx.shape())
            )));
        }
        let (n, k) = (tx.shape()[0], tx.shape()[1]);
        let src = tx.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for (o, &v) in data[i * k..(i + 1) * k].iter_mut().zip(row) {
                let e = math::exp(v - m);
                *o = e;
                s += e;
            }
            let inv = 1.0 / s;
            for o in &mut data[i * k..(i + 1) * k] {
                *o *= inv;
            }
        }
        let out = Tensor::new(&[n, k], data)?;
        Ok(self.produce(out, Step::SoftmaxRows { x: x.ix }))
    }

    /// 2-D convolution of `x: [n, c_in, t, v]` with `w: [c_out, c_in,
    /// k_t, k_v]`, cross-correlation convention. Temporal axis supports
    /// stride and symmetric zero padding; the vertex axis is valid-only:
    /// `t' = (t + 2*pad_t - k_t) / stride_t + 1`, `v' = v - k_v + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride_t: usize, pad_t: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (tx, tw) = (&self.vals[x.ix], &self.vals[w.ix]);
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(Error::Dim(alloc::format!(
                "conv2d expects rank-4 input and kernel, got {} and {}",
                fmt_shape(tx.shape()),
                fmt_shape(tw.shape())
            )));
        }
        let (n, ci, t, v) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (co, ciw, kt, kv) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if ci != ciw {
            return Err(Error::Dim(alloc::format!(
                "conv2d channel mismatch: input {} has {} channels, kernel {} expects {}",
                fmt_shape(tx.shape()),
                ci,
                fmt_shape(tw.shape()),
                ciw
            )));
        }
        if stride_t == 0 {
            return Err(Error::Config(alloc::format!("conv2d stride must be >= 1, got {stride_t}")));
        }
        if kt == 0 || kv == 0 || t + 2 * pad_t < kt || v < kv {
            return Err(Error::Dim(alloc::format!(
                "conv2d kernel {} does not fit input {} with pad_t {}",
                fmt_shape(tw.shape()),
                fmt_shape(tx.shape()),
                pad_t
            )));
        }
        let to = (t + 2 * pad_t - kt) / stride_t + 1;
        let vo = v - kv + 1;
        let xs = tx.data();
        let ws = tw.data();
        let mut data = vec![0.0; n * co * to * vo];
        for b in 0..n {
            for oc in 0..co {
                let out_plane = &mut data[(b * co + oc) * to * vo..(b * co + oc + 1) * to * vo];
                for icn in 0..ci {
                    let x_plane = &xs[(b * ci + icn) * t * v..(b * ci + icn + 1) * t * v];
                    for dt in 0..kt {
                        for dv in 0..kv {
                            let wv = ws[((oc * ci + icn) * kt + dt) * kv + dv];
                            if wv == 0.0 {
                                continue;
                            }
                            for ot in 0..to {
                                let it = (ot * stride_t + dt) as isize - pad_t as isize;
                                if it < 0 || it as usize >= t {
                                    continue;
                                }
                                let xrow = &x_plane[it as usize * v + dv..it as usize * v + dv + vo];
                                axpy(&mut out_plane[ot * vo..(ot + 1) * vo], wv, xrow);
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, co, to, vo], data)?;
        Ok(self.produce(out, Step::Conv2d { x: x.ix, w: w.ix, stride_t, pad_t }))
    }

    /// Adds a rank-1 bias along `axis` of `x`, broadcasting over the
    /// remaining axes.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        self.check(b)?;
        let (tx, tb) = (&self.vals[x.ix], &self.vals[b.ix]);
        if axis >= tx.rank() || tb.rank() != 1 || tb.shape()[0] != tx.shape()[axis] {
            return Err(Error::Dim(alloc::format!(
                "add_bias expects rank-1 bias matching axis {} of {}, got {}",
                axis,
                fmt_shape(tx.shape()),
                fmt_shape(tb.shape())
            )));
        }
        let mid = tx.shape()[axis];
        let outer: usize = tx.shape()[..axis].iter().product();
        let inner: usize = tx.shape()[axis + 1..].iter().product();
        let bs = tb.data();
        let mut data = tx.data().to_vec();
        for o in 0..outer {
            for c in 0..mid {
                let start = (o * mid + c) * inner;
                let bv = bs[c];
                for v in &mut data[start..start + inner] {
                    *v += bv;
                }
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.produce(out, Step::AddBias { x: x.ix, b: b.ix, axis }))
    }

    /// Batch normalization over channel axis 1 of a rank-4 tensor.
    ///
    /// Train mode normalizes with biased batch statistics and updates
    /// `state` in place with `running = (1 - momentum) * running +
    /// momentum * batch` using the unbiased variance; eval mode
    /// normalizes with the stored running statistics and leaves `state`
    /// untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let tx = &self.vals[x.ix];
        if tx.rank() != 4 {
            return Err(Error::Dim(alloc::format!(
                "batch_norm expects rank 4, got {}",
                fmt_shape(tx.shape())
            )));
        }
        let (n, c, t, v) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (tg, tb) = (&self.vals[gamma.ix], &self.vals[beta.ix]);
        if tg.shape() != [c] || tb.shape() != [c] || state.running_mean.len() != c || state.running_var.len() != c {
            return Err(Error::Dim(alloc::format!(
                "batch_norm expects gamma, beta and state of length {c}, got {}, {} and {}",
                fmt_shape(tg.shape()),
                fmt_shape(tb.shape()),
                state.running_mean.len()
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(alloc::format!("batch_norm eps must be positive, got {eps}")));
        }
        let m = n * t * v;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::Dim(alloc::format!(
                "batch_norm in train mode needs at least 2 values per channel, got {m}"
            )));
        }
        let plane = t * v;
        let xs = tx.data();
        let (mut mean, mut var) = (vec![0.0; c], vec![0.0; c]);
        if train {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let p = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    for &xv in p {
                        s += xv;
                    }
                }
                let mu = s / m as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    let p = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                    for &xv in p {
                        let d = xv - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m as f64;
                let unbiased = sq / (m as f64 - 1.0);
                state.running_mean[ch] = (1.0 - momentum) * state.running_mean[ch] + momentum * mu;
                state.running_var[ch] = (1.0 - momentum) * state.running_var[ch] + momentum * unbiased;
            }
            if self.precision == Precision::F32 {
                round_buf(self.precision, &mut state.running_mean);
                round_buf(self.precision, &mut state.running_var);
            }
        } else {
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }
        let (gs, bs) = (tg.data(), tb.data());
        let mut data = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let scale = gs[ch] / math::sqrt(var[ch] + eps);
                let shift = bs[ch] - mean[ch] * scale;
                let src = &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let dst = &mut data[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (o, &xv) in dst.iter_mut().zip(src) {
                    *o = xv * scale + shift;
                }
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        Ok(self.produce(
            out,
            Step::BatchNorm { x: x.ix, gamma: gamma.ix, beta: beta.ix, mean, var, eps, train },
        ))
    }

    /// Mixes the last axis of `x: [n, c, t, v_in]` by the matrix
    /// `g: [v_out, v_in]`: `out[n, c, t, i] = sum_j g[i, j] * x[n, c, t, j]`.
    pub fn mix_last(&mut self, x: Var, g: Var) -> Result<Var> {
        self.check(x)?;
        self.check(g)?;
        let (tx, tg) = (&self.vals[x.ix], &self.vals[g.ix]);
        if tx.rank() != 4 || tg.rank() != 2 || tg.shape()[1] != tx.shape()[3] {
            return Err(Error::Dim(alloc::format!(
                "mix_last expects x [n, c, t, v_in] and g [v_out, v_in], got {} and {}",
                fmt_shape(tx.shape()),
                fmt_shape(tg.shape())
            )));
        }
        let (n, c, t, vi) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let vo = tg.shape()[0];
        let gt = transpose_buf(tg.data(), vo, vi);
        let xs = tx.data();
        let mut data = vec![0.0; n * c * t * vo];
        for r in 0..n * c * t {
            let xrow = &xs[r * vi..(r + 1) * vi];
            let orow = &mut data[r * vo..(r + 1) * vo];
            for (j, &xv) in xrow.iter().enumerate() {
                if xv != 0.0 {
                    axpy(orow, xv, &gt[j * vo..(j + 1) * vo]);
                }
            }
        }
        let out = Tensor::new(&[n, c, t, vo], data)?;
        Ok(self.produce(out, Step::MixLast { x: x.ix, g: g.ix }))
    }

    /// Mean over the trailing two axes of `[n, c, t, v]`, yielding `[n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let tx = &self.vals[x.ix];
        if tx.rank() != 4 {
            return Err(Error::Dim(alloc::format!(
                "global_avg_pool expects rank 4, got {}",
                fmt_shape(tx.shape())
            )));
        }
        let (n, c, t, v) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let plane = t * v;
        let inv = 1.0 / plane as f64;
        let xs = tx.data();
        let mut data = vec![0.0; n * c];
        for (i, o) in data.iter_mut().enumerate() {
            let mut s = 0.0;
            for &xv in &xs[i * plane..(i + 1) * plane] {
                s += xv;
            }
            *o = s * inv;
        }
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.produce(out, Step::GlobalAvgPool { x: x.ix }))
    }

    /// Sum of all elements, yielding a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: f64 = self.vals[x.ix].data().iter().sum();
        Ok(self.produce(Tensor::scalar(s), Step::SumAll { x: x.ix }))
    }

    /// Mean cross-entropy of `logits: [n, k]` against class labels,
    /// fused with a stable log-sum-exp softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let tl = &self.vals[logits.ix];
        if tl.rank() != 2 {
            return Err(Error::Dim(alloc::format!(
                "cross_entropy expects rank-2 logits, got {}",
                fmt_shape(tl.shape())
            )));
        }
        let (n, k) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != n {
            return Err(Error::Dim(alloc::format!(
                "cross_entropy got {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Config(alloc::format!(
                "cross_entropy label {bad} out of range for {k} classes"
            )));
        }
        let src = tl.data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for &v in row {
                s += math::exp(v - m);
            }
            let lse = m + math::ln(s);
            loss += lse - row[labels[i]];
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = math::exp(v - lse);
            }
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.produce(out, Step::CrossEntropy { logits: logits.ix, labels: labels.to_vec(), probs }))
    }

    /// Runs the backward sweep from a scalar loss, visiting steps in
    /// exact reverse execution order. Returns gradients for every leaf
    /// registered with `requires_grad`; leaves the loss does not reach
    /// get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lt = &self.vals[loss.ix];
        if lt.numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {}",
                fmt_shape(lt.shape())
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.vals.len()];
        grads[loss.ix] = Some(vec![1.0]);
        for ix in (0..=loss.ix).rev() {
            let Some(g) = grads[ix].take() else { continue };
            self.dispatch(ix, &g, &mut grads)?;
            if matches!(self.steps[ix], Step::Leaf) && self.vals[ix].requires_grad {
                grads[ix] = Some(g);
            }
        }
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.vals.len());
        for (ix, g) in grads.into_iter().enumerate() {
            let retain = matches!(self.steps[ix], Step::Leaf) && self.vals[ix].requires_grad;
            if !retain {
                out.push(None);
                continue;
            }
            let shape = self.vals[ix].shape();
            out.push(Some(match g {
                Some(buf) => Tensor::new(shape, buf)?,
                None => Tensor::zeros(shape),
            }));
        }
        Ok(Gradients { tape: self.id, grads: out })
    }

    fn dispatch(&self, ix: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.steps[ix] {
            Step::Leaf => {}
            Step::Add { a, b } => {
                axpy(acc(grads, *a, g.len()), 1.0, g);
                axpy(acc(grads, *b, g.len()), 1.0, g);
            }
            Step::Mul { a, b } => {
                let (va, vb) = (self.vals[*a].data(), self.vals[*b].data());
                {
                    let ga = acc(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                let gb = acc(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * va[i];
                }
            }
            Step::Matmul { a, b } => {
                let (ta, tb) = (&self.vals[*a], &self.vals[*b]);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = g . B^T, dB = A^T . g
                let bt = transpose_buf(tb.data(), k, n);
                let da = mm(g, &bt, m, n, k);
                axpy(acc(grads, *a, m * k), 1.0, &da);
                let at = transpose_buf(ta.data(), m, k);
                let db = mm(&at, g, k, m, n);
                axpy(acc(grads, *b, k * n), 1.0, &db);
            }
            Step::Transpose { x } => {
                let tx = &self.vals[*x];
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let gx = acc(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Step::Reshape { x } => {
                axpy(acc(grads, *x, g.len()), 1.0, g);
            }
            Step::PermuteLast2 { x } => {
                let tx = &self.vals[*x];
                let (a, b, c, d) =
                    (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let gx = acc(grads, *x, a * b * c * d);
                for ab in 0..a * b {
                    let base = ab * c * d;
                    for i in 0..c {
                        for j in 0..d {
                            gx[base + i * d + j] += g[base + j * c + i];
                        }
                    }
                }
            }
            Step::Relu { x } => {
                let xs = self.vals[*x].data();
                let gx = acc(grads, *x, g.len());
                for i in 0..g.len() {
                    if xs[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Step::SoftmaxRows { x } => {
                let ty = &self.vals[ix];
                let (n, k) = (ty.shape()[0], ty.shape()[1]);
                let ys = ty.data();
                let gx = acc(grads, *x, n * k);
                for i in 0..n {
                    let yr = &ys[i * k..(i + 1) * k];
                    let gr = &g[i * k..(i + 1) * k];
                    let s = dot(gr, yr);
                    let go = &mut gx[i * k..(i + 1) * k];
                    for j in 0..k {
                        go[j] += (gr[j] - s) * yr[j];
                    }
                }
            }
            Step::Conv2d { x, w, stride_t, pad_t } => {
                self.conv2d_backward(ix, *x, *w, *stride_t, *pad_t, g, grads);
            }
            Step::AddBias { x, b, axis } => {
                let tx = &self.vals[*x];
                let mid = tx.shape()[*axis];
                let outer: usize = tx.shape()[..*axis].iter().product();
                let inner: usize = tx.shape()[*axis + 1..].iter().product();
                axpy(acc(grads, *x, g.len()), 1.0, g);
                let gb = acc(grads, *b, mid);
                for o in 0..outer {
                    for c in 0..mid {
                        let start = (o * mid + c) * inner;
                        let mut s = 0.0;
                        for &gv in &g[start..start + inner] {
                            s += gv;
                        }
                        gb[c] += s;
                    }
                }
            }
            Step::BatchNorm { x, gamma, beta, mean, var, eps, train } => {
                self.batch_norm_backward(*x, *gamma, *beta, mean, var, *eps, *train, g, grads);
            }
            Step::MixLast { x, g: gm } => {
                let (tx, tg) = (&self.vals[*x], &self.vals[*gm]);
                let (n, c, t, vi) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
                let vo = tg.shape()[0];
                let rows = n * c * t;
                let gt = transpose_buf(tg.data(), vo, vi);
                let xs = tx.data();
                {
                    let gx = acc(grads, *x, rows * vi);
                    for r in 0..rows {
                        let grow = &g[r * vo..(r + 1) * vo];
                        let xrow = &mut gx[r * vi..(r + 1) * vi];
                        for (j, o) in xrow.iter_mut().enumerate() {
                            *o += dot(&gt[j * vo..(j + 1) * vo], grow);
                        }
                    }
                }
                let gg = acc(grads, *gm, vo * vi);
                for r in 0..rows {
                    let grow = &g[r * vo..(r + 1) * vo];
                    let xrow = &xs[r * vi..(r + 1) * vi];
                    for (i, &gv) in grow.iter().enumerate() {
                        if gv != 0.0 {
                            axpy(&mut gg[i * vi..(i + 1) * vi], gv, xrow);
                        }
                    }
                }
            }
            Step::GlobalAvgPool { x } => {
                let tx = &self.vals[*x];
                let plane = tx.shape()[2] * tx.shape()[3];
                let inv = 1.0 / plane as f64;
                let gx = acc(grads, *x, tx.numel());
                for (i, &gv) in g.iter().enumerate() {
                    let add = gv * inv;
                    for o in &mut gx[i * plane..(i + 1) * plane] {
                        *o += add;
                    }
                }
            }
            Step::SumAll { x } => {
                let gx = acc(grads, *x, self.vals[*x].numel());
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Step::CrossEntropy { logits, labels, probs } => {
                let (n, k) = (self.vals[*logits].shape()[0], self.vals[*logits].shape()[1]);
                let scale = g[0] / n as f64;
                let gx = acc(grads, *logits, n * k);
                for i in 0..n {
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        gx[i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        out_ix: usize,
        x: usize,
        w: usize,
        stride_t: usize,
        pad_t: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tx, tw, ty) = (&self.vals[x], &self.vals[w], &self.vals[out_ix]);
        let (n, ci, t, v) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (co, _, kt, kv) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        let (to, vo) = (ty.shape()[2], ty.shape()[3]);
        let (xs, ws) = (tx.data(), tw.data());
        {
            let gx = acc(grads, x, n * ci * t * v);
            for b in 0..n {
                for oc in 0..co {
                    let gp = &g[(b * co + oc) * to * vo..(b * co + oc + 1) * to * vo];
                    for icn in 0..ci {
                        let xg = &mut gx[(b * ci + icn) * t * v..(b * ci + icn + 1) * t * v];
                        for dt in 0..kt {
                            for dv in 0..kv {
                                let wv = ws[((oc * ci + icn) * kt + dt) * kv + dv];
                                if wv == 0.0 {
                                    continue;
                                }
                                for ot in 0..to {
                                    let it = (ot * stride_t + dt) as isize - pad_t as isize;
                                    if it < 0 || it as usize >= t {
                                        continue;
                                    }
                                    let dst =
                                        &mut xg[it as usize * v + dv..it as usize * v + dv + vo];
                                    axpy(dst, wv, &gp[ot * vo..(ot + 1) * vo]);
                                }
                            }
                        }
                    }
                }
            }
        }
        let gw = acc(grads, w, co * ci * kt * kv);
        for oc in 0..co {
            for icn in 0..ci {
                for dt in 0..kt {
                    for dv in 0..kv {
                        let mut s = 0.0;
                        for b in 0..n {
                            let gp = &g[(b * co + oc) * to * vo..(b * co + oc + 1) * to * vo];
                            let xp = &xs[(b * ci + icn) * t * v..(b * ci + icn + 1) * t * v];
                            for ot in 0..to {
                                let it = (ot * stride_t + dt) as isize - pad_t as isize;
                                if it < 0 || it as usize >= t {
                                    continue;
                                }
                                s += dot(
                                    &gp[ot * vo..(ot + 1) * vo],
                                    &xp[it as usize * v + dv..it as usize * v + dv + vo],
                                );
                            }
                        }
                        gw[((oc * ci + icn) * kt + dt) * kv + dv] += s;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_backward(
        &self,
        x: usize,
        gamma: usize,
        beta: usize,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let tx = &self.vals[x];
        let (n, c, t, v) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let plane = t * v;
        let m = (n * plane) as f64;
        let xs = tx.data();
        let gs = self.vals[gamma].data();
        // Per-channel reductions first: sum of g and sum of g * xhat.
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for ch in 0..c {
            let ivar = 1.0 / math::sqrt(var[ch] + eps);
            let mu = mean[ch];
            let (mut sg, mut sgx) = (0.0, 0.0);
            for b in 0..n {
                let base = (b * c + ch) * plane;
                let gp = &g[base..base + plane];
                let xp = &xs[base..base + plane];
                for (gv, xv) in gp.iter().zip(xp) {
                    sg += gv;
                    sgx += gv * (xv - mu) * ivar;
                }
            }
            sum_g[ch] = sg;
            sum_gx[ch] = sgx;
        }
        {
            let ggamma = acc(grads, gamma, c);
            for ch in 0..c {
                ggamma[ch] += sum_gx[ch];
            }
        }
        {
            let gbeta = acc(grads, beta, c);
            for ch in 0..c {
                gbeta[ch] += sum_g[ch];
            }
        }
        let gx = acc(grads, x, xs.len());
        for ch in 0..c {
            let ivar = 1.0 / math::sqrt(var[ch] + eps);
            let mu = mean[ch];
            let a = gs[ch] * ivar;
            for b in 0..n {
                let base = (b * c + ch) * plane;
                let gp = &g[base..base + plane];
                let xp = &xs[base..base + plane];
                let op = &mut gx[base..base + plane];
                if train {
                    let mg = sum_g[ch] / m;
                    let mgx = sum_gx[ch] / m;
                    for ((o, gv), xv) in op.iter_mut().zip(gp).zip(xp) {
                        let xhat = (xv - mu) * ivar;
                        *o += a * (gv - mg - xhat * mgx);
                    }
                } else {
                    for (o, gv) in op.iter_mut().zip(gp) {
                        *o += a * gv;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], ix: usize, len: usize) -> &mut Vec<f64> {
    grads[ix].get_or_insert_with(|| vec![0.0; len])
}

fn round_buf(p: Precision, buf: &mut [f64]) {
    if p == Precision::F32 {
        for v in buf {
            *v = *v as f32 as f64;
        }
    }
}

/// `y += a * x` over equal-length slices; independent lanes, vectorizes.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Dot product with four split accumulators so the reduction is not one
/// serial dependency chain. Summation order is fixed.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Row-major `[m, k] . [k, n]` into a fresh buffer.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av != 0.0 {
                axpy(orow, av, &b[l * n..(l + 1) * n]);
            }
        }
    }
    out
}

fn transpose_buf(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
