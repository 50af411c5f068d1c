//! Network assembly: the ten-layer plan, vertex aggregation at layer
//! lambda, the classifier head, and two-stream score fusion.
//!
//! The default plan stacks four 64-channel, three 128-channel and three
//! 256-channel layers with temporal stride 2 at layers 5 and 8, so a
//! 300-frame input shrinks to 75 frames before global pooling. Input
//! features are batch-normalized over the flattened (channel, vertex)
//! axis before layer 1. With aggregation at layer `lambda`, layers
//! before it keep the full vertex set, layer `lambda` is a bilinear
//! layer with a single output vertex, and later layers use the
//! degenerate single-vertex form.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{fmt_shape, Error, Result};
use crate::graph::{build_partitions, PartitionedAdjacency, SkeletonTemplate};
use crate::layers::{BilinearInit, BnParams, SpatialVariant, StLayer, StLayerParams, BN_EPS, BN_MOMENTUM};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// One row of the layer plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub c_out: usize,
    pub stride: usize,
    pub v_out: usize,
    pub variant: SpatialVariant,
}

/// Everything needed to build a model.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input shape per sample: (channels, frames, vertices).
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub temporal_kernel: usize,
    pub layers: Vec<LayerSpec>,
    /// Aggregation layer index (1-based) if vertex aggregation is used.
    pub lambda: Option<usize>,
    /// Factor width for symmetric layers; defaults to the vertex count.
    pub symmetric_rank: Option<usize>,
    pub bilinear_init: BilinearInit,
}

/// The default channel plan: 64 x4, 128 x3, 256 x3.
pub const DEFAULT_CHANNELS: [usize; 10] = [64, 64, 64, 64, 128, 128, 128, 256, 256, 256];
/// The default temporal strides: 2 at layers 5 and 8.
pub const DEFAULT_STRIDES: [usize; 10] = [1, 1, 1, 1, 2, 1, 1, 2, 1, 1];

impl NetworkConfig {
    /// The full-scale ten-layer plan for a 3x300x25 input, all layers
    /// using `variant` at full vertex width.
    pub fn standard(variant: SpatialVariant, num_classes: usize) -> Self {
        let layers = DEFAULT_CHANNELS
            .iter()
            .zip(&DEFAULT_STRIDES)
            .map(|(&c_out, &stride)| LayerSpec { c_out, stride, v_out: 25, variant })
            .collect();
        Self {
            input: (3, 300, 25),
            num_classes,
            temporal_kernel: 9,
            layers,
            lambda: None,
            symmetric_rank: None,
            bilinear_init: BilinearInit::default(),
        }
    }

    /// Rewrites the plan for vertex aggregation at layer `lambda`
    /// (1-based): earlier layers keep their variant and full width, the
    /// aggregation layer becomes bilinear with one output vertex, and
    /// every later layer the degenerate single-vertex form.
    pub fn with_lambda(mut self, lambda: usize) -> Result<Self> {
        if lambda == 0 || lambda > self.layers.len() {
            return Err(Error::Config(format!(
                "lambda must lie in 1..={}, got {lambda}",
                self.layers.len()
            )));
        }
        let v = self.input.2;
        for (i, spec) in self.layers.iter_mut().enumerate() {
            let l = i + 1;
            if l < lambda {
                spec.v_out = v;
            } else {
                spec.v_out = 1;
                spec.variant = SpatialVariant::Bilinear;
            }
        }
        self.lambda = Some(lambda);
        Ok(self)
    }

    /// Validates dimensions, the vertex chain, and the lambda pattern.
    pub fn validate(&self) -> Result<()> {
        let (c, t, v) = self.input;
        if c == 0 || t == 0 || v == 0 {
            return Err(Error::Config(format!(
                "input shape must be positive, got ({c}, {t}, {v})"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config(String::from("the layer plan is empty")));
        }
        let mut v_in = v;
        for (i, spec) in self.layers.iter().enumerate() {
            let l = i + 1;
            if spec.c_out == 0 || spec.v_out == 0 || spec.stride == 0 {
                return Err(Error::Config(format!(
                    "layer {l}: c_out, v_out and stride must be positive"
                )));
            }
            if spec.variant.needs_adjacency() {
                if spec.v_out != v_in {
                    return Err(Error::Config(format!(
                        "layer {l}: {} mixing preserves the vertex count, got {} -> {}",
                        spec.variant.name(),
                        v_in,
                        spec.v_out
                    )));
                }
                if v_in != v {
                    return Err(Error::Config(format!(
                        "layer {l}: {} mixing needs the skeleton adjacency, which is \
                         undefined after vertex aggregation ({} vertices left)",
                        spec.variant.name(),
                        v_in
                    )));
                }
            }
            if let Some(lambda) = self.lambda {
                let want_full = l < lambda;
                if want_full && spec.v_out != v {
                    return Err(Error::Config(format!(
                        "layer {l}: before aggregation at layer {lambda} the vertex count \
                         must stay {v}, got {}",
                        spec.v_out
                    )));
                }
                if !want_full && (spec.v_out != 1 || spec.variant != SpatialVariant::Bilinear) {
                    return Err(Error::Config(format!(
                        "layer {l}: from aggregation layer {lambda} on, layers must be \
                         bilinear with one output vertex"
                    )));
                }
            }
            v_in = spec.v_out;
        }
        if let Some(q) = self.symmetric_rank {
            if q == 0 || q > v {
                return Err(Error::Config(format!(
                    "symmetric rank must lie in 1..={v}, got {q}"
                )));
            }
        }
        Ok(())
    }

    /// Whether any layer needs the skeleton adjacency.
    pub fn needs_template(&self) -> bool {
        self.layers.iter().any(|s| s.variant.needs_adjacency())
    }

    /// Per-layer (t, v) input sizes, ending with the final output size.
    pub fn shape_chain(&self) -> Vec<(usize, usize)> {
        let mut chain = Vec::with_capacity(self.layers.len() + 1);
        let (mut t, mut v) = (self.input.1, self.input.2);
        chain.push((t, v));
        for spec in &self.layers {
            t = (t - 1) / spec.stride + 1;
            v = spec.v_out;
            chain.push((t, v));
        }
        chain
    }
}

/// A built model: input batch norm, the layer stack, and the linear
/// classifier head.
#[derive(Debug, Clone)]
pub struct Model {
    config: NetworkConfig,
    input_bn: BnParams,
    layers: Vec<StLayer>,
    head_w: Tensor,
    head_b: Tensor,
}

/// Builds a model from a config. A template is required exactly when
/// some layer uses an adjacency-based variant; bilinear layers use it
/// only to seed their mixing matrices.
pub fn build(
    config: NetworkConfig,
    template: Option<&SkeletonTemplate>,
    seed: u64,
) -> Result<Model> {
    config.validate()?;
    if config.needs_template() && template.is_none() {
        return Err(Error::Config(String::from(
            "the layer plan uses adjacency-based mixing but no skeleton template was given",
        )));
    }
    let partitions: Option<PartitionedAdjacency> = match template {
        Some(t) => {
            if config.needs_template() && t.num_joints() != config.input.2 {
                return Err(Error::Config(format!(
                    "template has {} joints but the input expects {}",
                    t.num_joints(),
                    config.input.2
                )));
            }
            Some(build_partitions(t)?)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_in, _, v_in) = config.input;
    let mut layers = Vec::with_capacity(config.layers.len());
    let (mut c, mut v) = (c_in, v_in);
    for spec in &config.layers {
        let params = StLayerParams {
            c_in: c,
            c_out: spec.c_out,
            v_in: v,
            v_out: spec.v_out,
            temporal_kernel: config.temporal_kernel,
            stride: spec.stride,
            variant: spec.variant,
            symmetric_rank: if spec.variant == SpatialVariant::Symmetric {
                config.symmetric_rank
            } else {
                None
            },
            bilinear_init: config.bilinear_init,
        };
        let adj = partitions.as_ref().filter(|p| p.v == v);
        layers.push(StLayer::new(params, adj, &mut rng)?);
        c = spec.c_out;
        v = spec.v_out;
    }
    let head_w = xavier_matrix(&mut rng, c, config.num_classes);
    let head_b = Tensor::zeros(&[config.num_classes]);
    Ok(Model { input_bn: BnParams::new(c_in * v_in), config, layers, head_w, head_b })
}

fn xavier_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = crate::math::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::new(&[rows, cols], data).expect("shape/data agree by construction")
}

impl Model {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[StLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_refs().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Named views of every learnable parameter, in canonical order:
    /// input batch norm, layers one by one, then the head.
    pub fn param_refs(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push((String::from("input_bn.gamma"), &self.input_bn.gamma));
        out.push((String::from("input_bn.beta"), &self.input_bn.beta));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.param_refs() {
                out.push((format!("layer{}.{name}", i + 1), t));
            }
        }
        out.push((String::from("head.weight"), &self.head_w));
        out.push((String::from("head.bias"), &self.head_b));
        out
    }

    /// Mutable counterpart of [`Model::param_refs`], same order.
    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push((String::from("input_bn.gamma"), &mut self.input_bn.gamma));
        out.push((String::from("input_bn.beta"), &mut self.input_bn.beta));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.param_refs_mut() {
                out.push((format!("layer{}.{name}", i + 1), t));
            }
        }
        out.push((String::from("head.weight"), &mut self.head_w));
        out.push((String::from("head.bias"), &mut self.head_b));
        out
    }

    /// Named running batch-norm states, canonical order.
    pub fn state_refs(&self) -> Vec<(String, &crate::tape::BnState)> {
        let mut out = Vec::new();
        out.push((String::from("input_bn"), &self.input_bn.state));
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, s) in layer.state_refs() {
                out.push((format!("layer{}.{name}", i + 1), s));
            }
        }
        out
    }

    pub fn state_refs_mut(&mut self) -> Vec<(String, &mut crate::tape::BnState)> {
        let mut out: Vec<(String, &mut crate::tape::BnState)> = Vec::new();
        out.push((String::from("input_bn"), &mut self.input_bn.state));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, s) in layer.state_refs_mut() {
                out.push((format!("layer{}.{name}", i + 1), s));
            }
        }
        out
    }

    /// Forward pass on a batch `[n, c_in, t, v]`. Returns the logits
    /// var; parameter handles are appended to `binds` in
    /// [`Model::param_refs`] order. Train mode updates batch-norm
    /// running statistics in place.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        batch: &Tensor,
        mode: Mode,
        binds: &mut Vec<Var>,
    ) -> Result<Var> {
        let (c_in, _, v_in) = self.config.input;
        if batch.rank() != 4 || batch.shape()[1] != c_in || batch.shape()[3] != v_in {
            return Err(Error::Dim(format!(
                "model expects input [n, {c_in}, t, {v_in}], got {}",
                fmt_shape(batch.shape())
            )));
        }
        let grad = mode == Mode::Train;
        let leaf = |t: &Tensor, tape: &mut Tape, binds: &mut Vec<Var>| {
            let mut t = t.clone();
            t.requires_grad = grad;
            let v = tape.leaf(t);
            binds.push(v);
            v
        };
        let bn_gamma = leaf(&self.input_bn.gamma, tape, binds);
        let bn_beta = leaf(&self.input_bn.beta, tape, binds);
        let x = tape.leaf(batch.clone());
        let (n, t) = (batch.shape()[0], batch.shape()[2]);
        // Flatten (c, v) into one channel axis for the input norm:
        // [n, c, t, v] -> [n, c, v, t] -> [n, c * v, t, 1] and back.
        let x = tape.permute_last2(x)?;
        let x = tape.reshape(x, &[n, c_in * v_in, t, 1])?;
        let x = tape.batch_norm(
            x,
            bn_gamma,
            bn_beta,
            &mut self.input_bn.state,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let x = tape.reshape(x, &[n, c_in, v_in, t])?;
        let mut h = tape.permute_last2(x)?;
        for layer in &mut self.layers {
            h = layer.forward(tape, h, mode, binds)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = leaf(&self.head_w, tape, binds);
        let b = leaf(&self.head_b, tape, binds);
        let logits = tape.matmul(pooled, w)?;
        tape.add_bias(logits, b, 1)
    }

    /// Eval-mode logits on a batch, through a throwaway tape.
    pub fn eval_logits(&mut self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binds = Vec::new();
        let logits = self.forward(&mut tape, batch, Mode::Eval, &mut binds)?;
        Ok(tape.value(logits)?.clone())
    }

    /// A copy of the model with every mixing layer rewritten as a
    /// bilinear layer whose `U_p` equals the current effective mixing
    /// matrix `G_p`; all other parameters and running statistics are
    /// copied verbatim. Logits are preserved exactly.
    pub fn to_bilinear(&self) -> Result<Model> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            layers.push(layer.to_bilinear()?);
        }
        let mut config = self.config.clone();
        for (spec, layer) in config.layers.iter_mut().zip(&layers) {
            spec.variant = layer.params().variant;
        }
        Ok(Model {
            config,
            input_bn: self.input_bn.clone(),
            layers,
            head_w: self.head_w.clone(),
            head_b: self.head_b.clone(),
        })
    }
}

/// Softmax probabilities row by row (plain tensor math).
pub fn softmax_rows_plain(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Dim(format!(
            "softmax expects rank 2, got {}",
            fmt_shape(logits.shape())
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(&[n, k]);
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut s = 0.0;
        for (o, &v) in out.data_mut()[i * k..(i + 1) * k].iter_mut().zip(row) {
            *o = crate::math::exp(v - m);
            s += *o;
        }
        for o in &mut out.data_mut()[i * k..(i + 1) * k] {
            *o /= s;
        }
    }
    Ok(out)
}

/// Index of the row-wise maximum; ties break to the lower index.
pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    if scores.rank() != 2 {
        return Err(Error::Dim(format!(
            "argmax expects rank 2, got {}",
            fmt_shape(scores.shape())
        )));
    }
    let (n, k) = (scores.shape()[0], scores.shape()[1]);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = &scores.data()[i * k..(i + 1) * k];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Two-stream fusion: elementwise sum of per-class scores, then argmax
/// per row.
pub fn fuse_two_stream(scores_a: &Tensor, scores_b: &Tensor) -> Result<Vec<usize>> {
    if scores_a.shape() != scores_b.shape() {
        return Err(Error::Dim(format!(
            "fusion expects equal score shapes, got {} and {}",
            fmt_shape(scores_a.shape()),
            fmt_shape(scores_b.shape())
        )));
    }
    argmax_rows(&scores_a.add(scores_b)?)
}

/// Bone features: per joint, the coordinate difference to its parent in
/// the template tree; the root bone is zero. Shape is preserved.
pub fn bones_from_joints(joints: &Tensor, template: &SkeletonTemplate) -> Result<Tensor> {
    if joints.rank() != 4 || joints.shape()[1] != 3 || joints.shape()[3] != template.num_joints() {
        return Err(Error::Dim(format!(
            "bone extraction expects [n, 3, t, {}], got {}",
            template.num_joints(),
            fmt_shape(joints.shape())
        )));
    }
    let parents = template.parent_map()?;
    let (n, c, t, v) = (
        joints.shape()[0],
        joints.shape()[1],
        joints.shape()[2],
        joints.shape()[3],
    );
    let mut out = Tensor::zeros(&[n, c, t, v]);
    let src = joints.data();
    let dst = out.data_mut();
    for row in 0..n * c * t {
        let base = row * v;
        for j in 0..v {
            if let Some(p) = parents[j] {
                dst[base + j] = src[base + j] - src[base + p];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SkeletonTemplate;

    fn small_config(variant: SpatialVariant) -> NetworkConfig {
        NetworkConfig {
            input: (3, 8, 25),
            num_classes: 4,
            temporal_kernel: 3,
            layers: alloc::vec![
                LayerSpec { c_out: 4, stride: 1, v_out: 25, variant },
                LayerSpec { c_out: 6, stride: 2, v_out: 25, variant },
            ],
            lambda: None,
            symmetric_rank: None,
            bilinear_init: BilinearInit::default(),
        }
    }

    #[test]
    fn standard_plan_shape_chain() {
        let cfg = NetworkConfig::standard(SpatialVariant::Bilinear, 60);
        cfg.validate().unwrap();
        let chain = cfg.shape_chain();
        let t: Vec<usize> = chain.iter().map(|&(t, _)| t).collect();
        assert_eq!(t, &[300, 300, 300, 300, 300, 150, 150, 150, 75, 75, 75]);
        assert!(chain.iter().all(|&(_, v)| v == 25));
    }

    #[test]
    fn lambda_rewrites_tail_layers() {
        let cfg = NetworkConfig::standard(SpatialVariant::Bilinear, 60)
            .with_lambda(6)
            .unwrap();
        cfg.validate().unwrap();
        for (i, spec) in cfg.layers.iter().enumerate() {
            if i + 1 < 6 {
                assert_eq!(spec.v_out, 25);
            } else {
                assert_eq!(spec.v_out, 1);
                assert_eq!(spec.variant, SpatialVariant::Bilinear);
            }
        }
        assert!(NetworkConfig::standard(SpatialVariant::Bilinear, 60)
            .with_lambda(11)
            .is_err());
    }

    #[test]
    fn adjacency_variant_after_aggregation_is_rejected() {
        let mut cfg = small_config(SpatialVariant::Bilinear);
        cfg.layers[0].v_out = 1;
        cfg.layers[1] = LayerSpec {
            c_out: 6,
            stride: 1,
            v_out: 1,
            variant: SpatialVariant::Additive,
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn build_requires_template_for_adjacency_variants() {
        let cfg = small_config(SpatialVariant::Additive);
        assert!(matches!(build(cfg, None, 1), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let template = SkeletonTemplate::builtin25();
        let cfg = small_config(SpatialVariant::Additive);
        let mut model = build(cfg, Some(&template), 7).unwrap();
        let batch = {
            let n = 2 * 3 * 8 * 25;
            let data = (0..n).map(|i| ((i * 37 % 97) as f64) / 97.0 - 0.5).collect();
            Tensor::new(&[2, 3, 8, 25], data).unwrap()
        };
        let a = model.eval_logits(&batch).unwrap();
        assert_eq!(a.shape(), &[2, 4]);
        let b = model.eval_logits(&batch).unwrap();
        assert_eq!(a, b, "eval must be bitwise deterministic");
        // batch independence in eval mode
        let first = {
            let one = Tensor::new(&[1, 3, 8, 25], batch.data()[..600].to_vec()).unwrap();
            model.eval_logits(&one).unwrap()
        };
        for k in 0..4 {
            assert!((a.at(&[0, k]) - first.at(&[0, k])).abs() < 1e-10);
        }
        // softmax rows sum to one
        let sm = softmax_rows_plain(&a).unwrap();
        for i in 0..2 {
            let s: f64 = sm.data()[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_model() {
        let template = SkeletonTemplate::builtin25();
        let cfg = small_config(SpatialVariant::Symmetric);
        let m1 = build(cfg.clone(), Some(&template), 99).unwrap();
        let m2 = build(cfg, Some(&template), 99).unwrap();
        for ((n1, t1), (n2, t2)) in m1.param_refs().iter().zip(m2.param_refs()) {
            assert_eq!(*n1, n2);
            assert_eq!(**t1, *t2, "parameter {n1} differs between identical builds");
        }
    }

    #[test]
    fn param_names_unique_and_stable() {
        let template = SkeletonTemplate::builtin25();
        let cfg = small_config(SpatialVariant::Additive);
        let mut model = build(cfg, Some(&template), 3).unwrap();
        let names: Vec<String> = model.param_refs().into_iter().map(|(n, _)| n).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert_eq!(names.first().map(String::as_str), Some("input_bn.gamma"));
        assert_eq!(names.last().map(String::as_str), Some("head.bias"));
        let mut_names: Vec<String> =
            model.param_refs_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn lambda_one_model_builds_and_runs() {
        let mut cfg = NetworkConfig::standard(SpatialVariant::Bilinear, 4)
            .with_lambda(1)
            .unwrap();
        cfg.input = (3, 8, 25);
        cfg.layers.truncate(3);
        cfg.temporal_kernel = 3;
        let mut model = build(cfg, None, 5).unwrap();
        assert!(model.layers()[0].params().v_out == 1);
        assert!(model.layers()[1].is_degenerate());
        let batch = Tensor::full(&[1, 3, 8, 25], 0.25);
        let logits = model.eval_logits(&batch).unwrap();
        assert_eq!(logits.shape(), &[1, 4]);
    }

    #[test]
    fn fusion_hand_cases() {
        let a = Tensor::new(&[1, 2], alloc::vec![0.6, 0.4]).unwrap();
        let b = Tensor::new(&[1, 2], alloc::vec![0.1, 0.9]).unwrap();
        assert_eq!(fuse_two_stream(&a, &b).unwrap(), alloc::vec![1]);
        // one-hot beats uniform
        let hot = Tensor::new(&[1, 4], alloc::vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let uni = Tensor::new(&[1, 4], alloc::vec![0.25; 4]).unwrap();
        assert_eq!(fuse_two_stream(&hot, &uni).unwrap(), alloc::vec![3]);
        // identical streams keep the argmax
        assert_eq!(fuse_two_stream(&a, &a).unwrap(), argmax_rows(&a).unwrap());
        let bad = Tensor::zeros(&[2, 2]);
        assert!(fuse_two_stream(&a, &bad).is_err());
    }

    #[test]
    fn bones_hand_chain() {
        let template = SkeletonTemplate::new(
            3,
            alloc::vec![(0, 1), (1, 2)],
            alloc::vec![[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
            0,
        )
        .unwrap();
        // joints along x at 0, 1, 3 in every frame
        let mut joints = Tensor::zeros(&[1, 3, 2, 3]);
        for t in 0..2 {
            *joints.at_mut(&[0, 0, t, 0]) = 0.0;
            *joints.at_mut(&[0, 0, t, 1]) = 1.0;
            *joints.at_mut(&[0, 0, t, 2]) = 3.0;
        }
        let bones = bones_from_joints(&joints, &template).unwrap();
        assert_eq!(bones.at(&[0, 0, 0, 0]), 0.0);
        assert_eq!(bones.at(&[0, 0, 0, 1]), 1.0);
        assert_eq!(bones.at(&[0, 0, 0, 2]), 2.0);
        // translation invariance
        let mut shifted = joints.clone();
        for v in shifted.data_mut().iter_mut().take(6) {
            *v += 10.0;
        }
        let bones2 = bones_from_joints(&shifted, &template).unwrap();
        for (a, b) in bones.data().iter().zip(bones2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conversion_to_bilinear_preserves_logits() {
        let template = SkeletonTemplate::builtin25();
        for variant in [
            SpatialVariant::Additive,
            SpatialVariant::Multiplicative,
            SpatialVariant::Symmetric,
        ] {
            let cfg = small_config(variant);
            let mut model = build(cfg, Some(&template), 21).unwrap();
            let batch = {
                let n = 600;
                let data = (0..n).map(|i| ((i * 31 % 89) as f64) / 89.0 - 0.4).collect();
                Tensor::new(&[1, 3, 8, 25], data).unwrap()
            };
            let before = model.eval_logits(&batch).unwrap();
            let mut converted = model.to_bilinear().unwrap();
            assert!(converted
                .layers()
                .iter()
                .all(|l| l.params().variant == SpatialVariant::Bilinear));
            let after = converted.eval_logits(&batch).unwrap();
            assert!(
                before.max_abs_diff(&after).unwrap() < 1e-12,
                "{} conversion drifted",
                variant.name()
            );
        }
    }
}
