//! Spatio-temporal graph layers.
//!
//! One configurable layer covers four spatial mixing schemes. Each
//! builds a per-partition vertex mixing matrix `G_p` and computes
//! `sum_p mix(conv1x1(H; W_p), G_p)`:
//!
//! * multiplicative: `G_p = A_hat_p (*) M_p`, mask initialized to ones;
//! * additive: `G_p = A_hat_p + M_p`, mask initialized to zeros;
//! * symmetric: `G_p = A_hat_p + L_p L_p^T`, factors near zero, so the
//!   effective mask is symmetric positive semidefinite by construction;
//! * bilinear: `G_p = U_p`, a free `v_out x v_in` matrix, which is the
//!   only form that can change the vertex count.
//!
//! The composite layer runs spatial mixing -> batch norm -> (+ vertex
//! residual) -> relu -> temporal conv -> batch norm -> (+ temporal
//! residual) -> relu. Both residuals read the layer input: identity
//! when shapes agree, a 1x1 channel conv when only channels change, and
//! a full-vertex conv (reshaped back to the vertex axis) when the vertex
//! count changes; the temporal residual also carries the layer's
//! temporal stride. A layer with one input and one output vertex
//! degenerates to a single plain channel conv with no vertex residual.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{fmt_shape, Error, Result};
use crate::graph::{PartitionedAdjacency, PARTITIONS};
use crate::tape::{BnState, Mode, Tape, Var};
use crate::tensor::Tensor;

/// Batch-norm momentum used by every layer.
pub const BN_MOMENTUM: f64 = 0.1;
/// Batch-norm epsilon used by every layer.
pub const BN_EPS: f64 = 1e-5;

/// Spatial mixing scheme of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialVariant {
    Multiplicative,
    Additive,
    Symmetric,
    Bilinear,
}

impl SpatialVariant {
    pub fn needs_adjacency(&self) -> bool {
        !matches!(self, SpatialVariant::Bilinear)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SpatialVariant::Multiplicative => "multiplicative",
            SpatialVariant::Additive => "additive",
            SpatialVariant::Symmetric => "symmetric",
            SpatialVariant::Bilinear => "bilinear",
        }
    }
}

/// How bilinear mixing matrices start out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BilinearInit {
    /// Normalized adjacency plus uniform noise of the given amplitude;
    /// falls back to [`BilinearInit::Random`] when no adjacency fits the
    /// layer (vertex count changes or no template given).
    Adjacency { noise: f64 },
    /// Dense random entries scaled by `1 / sqrt(v_in)`.
    Random,
}

impl Default for BilinearInit {
    fn default() -> Self {
        BilinearInit::Adjacency { noise: 1e-6 }
    }
}

/// Hyperparameters of one spatio-temporal layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StLayerParams {
    pub c_in: usize,
    pub c_out: usize,
    pub v_in: usize,
    pub v_out: usize,
    /// Temporal kernel width; must be odd for symmetric same-padding.
    pub temporal_kernel: usize,
    /// Temporal stride.
    pub stride: usize,
    pub variant: SpatialVariant,
    /// Factor width `q` of the symmetric variant; defaults to `v_in`.
    pub symmetric_rank: Option<usize>,
    pub bilinear_init: BilinearInit,
}

impl StLayerParams {
    pub fn new(c_in: usize, c_out: usize, v: usize, variant: SpatialVariant) -> Self {
        Self {
            c_in,
            c_out,
            v_in: v,
            v_out: v,
            temporal_kernel: 9,
            stride: 1,
            variant,
            symmetric_rank: None,
            bilinear_init: BilinearInit::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.v_in == 0 || self.v_out == 0 {
            return Err(Error::Config(format!(
                "layer dimensions must be positive, got c {}->{}, v {}->{}",
                self.c_in, self.c_out, self.v_in, self.v_out
            )));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd for symmetric same-padding, got {}",
                self.temporal_kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config(String::from("temporal stride must be >= 1")));
        }
        if self.variant.needs_adjacency() && self.v_out != self.v_in {
            return Err(Error::Config(format!(
                "{} mixing preserves the vertex count, got v {} -> {}",
                self.variant.name(),
                self.v_in,
                self.v_out
            )));
        }
        if let Some(q) = self.symmetric_rank {
            if self.variant != SpatialVariant::Symmetric {
                return Err(Error::Config(String::from(
                    "symmetric_rank only applies to the symmetric variant",
                )));
            }
            if q == 0 || q > self.v_in {
                return Err(Error::Config(format!(
                    "symmetric rank must lie in 1..={}, got {q}",
                    self.v_in
                )));
            }
        }
        Ok(())
    }

    /// The single-vertex linear-mapping form: one channel conv, no
    /// vertex mixing, no vertex residual.
    pub fn is_degenerate(&self) -> bool {
        self.v_in == 1 && self.v_out == 1 && self.variant == SpatialVariant::Bilinear
    }

    fn rank(&self) -> usize {
        self.symmetric_rank.unwrap_or(self.v_in)
    }
}

/// Shape-adapting residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    /// No residual (vertex residual of the degenerate layer).
    None,
    Identity,
    /// 1x1 conv adjusting channels (and stride on the temporal path).
    ChannelConv,
    /// Conv with `c_out * v_out` filters of size `c_in x 1 x v_in`,
    /// reshaped back onto the vertex axis.
    VertexConv,
}

#[derive(Debug, Clone)]
enum ResidualPath {
    None,
    Identity,
    ChannelConv { w: Tensor, b: Tensor },
    VertexConv { w: Tensor, b: Tensor },
}

impl ResidualPath {
    fn kind(&self) -> ResidualKind {
        match self {
            ResidualPath::None => ResidualKind::None,
            ResidualPath::Identity => ResidualKind::Identity,
            ResidualPath::ChannelConv { .. } => ResidualKind::ChannelConv,
            ResidualPath::VertexConv { .. } => ResidualKind::VertexConv,
        }
    }
}

/// Batch-norm parameters plus running state.
#[derive(Debug, Clone)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BnState,
}

impl BnParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            state: BnState::new(channels),
        }
    }
}

/// One spatio-temporal layer with all learnable state.
#[derive(Debug, Clone)]
pub struct StLayer {
    params: StLayerParams,
    /// Normalized adjacency per partition; empty for bilinear layers.
    a_hat: Vec<Tensor>,
    branch_w: Vec<Tensor>,
    branch_b: Vec<Tensor>,
    /// Per-branch mask parameter: `M_p`, `L_p`, or `U_p`; empty for the
    /// degenerate form.
    masks: Vec<Tensor>,
    bn_s: BnParams,
    temporal_w: Tensor,
    temporal_b: Tensor,
    bn_t: BnParams,
    res_v: ResidualPath,
    res_t: ResidualPath,
}

/// Tape handles for one layer's parameters, in canonical order.
struct BoundParams {
    branch: Vec<(Var, Var)>,
    masks: Vec<Var>,
    bn_s: (Var, Var),
    temporal: (Var, Var),
    bn_t: (Var, Var),
    res_v: Option<(Var, Var)>,
    res_t: Option<(Var, Var)>,
}

impl StLayer {
    /// Builds a layer with freshly initialized parameters. Adjacency is
    /// required by the multiplicative, additive and symmetric variants
    /// (and must match `v_in`); bilinear layers use it only as an
    /// initialization hint.
    pub fn new(
        params: StLayerParams,
        adjacency: Option<&PartitionedAdjacency>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        params.validate()?;
        if params.variant.needs_adjacency() {
            let adj = adjacency.ok_or_else(|| {
                Error::Config(format!(
                    "{} mixing requires a skeleton adjacency",
                    params.variant.name()
                ))
            })?;
            if adj.v != params.v_in {
                return Err(Error::Config(format!(
                    "adjacency has {} vertices but the layer expects {}",
                    adj.v, params.v_in
                )));
            }
        }
        let degenerate = params.is_degenerate();
        let branches = if degenerate { 1 } else { PARTITIONS };
        let mut branch_w = Vec::with_capacity(branches);
        let mut branch_b = Vec::with_capacity(branches);
        for _ in 0..branches {
            branch_w.push(xavier_conv(rng, params.c_out, params.c_in, 1, 1));
            branch_b.push(Tensor::zeros(&[params.c_out]));
        }
        let mut masks = Vec::new();
        if !degenerate {
            for p in 0..PARTITIONS {
                masks.push(init_mask(&params, adjacency, p, rng)?);
            }
        }
        let a_hat = if params.variant.needs_adjacency() {
            adjacency
                .expect("checked above")
                .a_hat
                .iter()
                .cloned()
                .collect()
        } else {
            Vec::new()
        };
        let temporal_w =
            xavier_conv(rng, params.c_out, params.c_out, params.temporal_kernel, 1);
        let temporal_b = Tensor::zeros(&[params.c_out]);
        let res_v = if degenerate {
            ResidualPath::None
        } else {
            make_residual(&params, 1, rng)
        };
        let res_t = make_residual(&params, params.stride, rng);
        Ok(Self {
            bn_s: BnParams::new(params.c_out),
            bn_t: BnParams::new(params.c_out),
            params,
            a_hat,
            branch_w,
            branch_b,
            masks,
            temporal_w,
            temporal_b,
            res_v,
            res_t,
        })
    }

    pub fn params(&self) -> &StLayerParams {
        &self.params
    }

    pub fn is_degenerate(&self) -> bool {
        self.params.is_degenerate()
    }

    pub fn res_v_kind(&self) -> ResidualKind {
        self.res_v.kind()
    }

    pub fn res_t_kind(&self) -> ResidualKind {
        self.res_t.kind()
    }

    /// Output time length for a given input time length.
    pub fn t_out(&self, t_in: usize) -> usize {
        (t_in - 1) / self.params.stride + 1
    }

    /// The effective mixing matrix `G_p` of branch `p` as a plain
    /// tensor (eval view of the current parameters).
    pub fn effective_mixing(&self, p: usize) -> Result<Tensor> {
        if self.is_degenerate() {
            return Err(Error::Contract(String::from(
                "degenerate layers have no mixing matrices",
            )));
        }
        match self.params.variant {
            SpatialVariant::Multiplicative => {
                let mut g = self.a_hat[p].clone();
                for (o, m) in g.data_mut().iter_mut().zip(self.masks[p].data()) {
                    *o *= m;
                }
                Ok(g)
            }
            SpatialVariant::Additive => self.a_hat[p].add(&self.masks[p]),
            SpatialVariant::Symmetric => {
                self.a_hat[p].add(&outer_product_self(&self.masks[p]))
            }
            SpatialVariant::Bilinear => Ok(self.masks[p].clone()),
        }
    }

    /// Effective attention mask of branch `p`: `M_p` for the mask-based
    /// variants, `L_p L_p^T` for the symmetric one, `U_p` for bilinear.
    pub fn effective_mask(&self, p: usize) -> Result<Tensor> {
        if self.is_degenerate() {
            return Err(Error::Contract(String::from("degenerate layers have no masks")));
        }
        match self.params.variant {
            SpatialVariant::Symmetric => Ok(outer_product_self(&self.masks[p])),
            _ => Ok(self.masks[p].clone()),
        }
    }

    /// A copy of this layer rewritten as a bilinear layer: `U_p` is set
    /// to the current effective mixing matrix `G_p`, everything else is
    /// copied verbatim, so outputs are preserved exactly. Bilinear and
    /// degenerate layers are returned unchanged.
    pub fn to_bilinear(&self) -> Result<Self> {
        if self.params.variant == SpatialVariant::Bilinear || self.is_degenerate() {
            return Ok(self.clone());
        }
        let mut out = self.clone();
        let mut masks = Vec::with_capacity(PARTITIONS);
        for p in 0..PARTITIONS {
            masks.push(self.effective_mixing(p)?);
        }
        out.masks = masks;
        out.a_hat = Vec::new();
        out.params.variant = SpatialVariant::Bilinear;
        out.params.symmetric_rank = None;
        Ok(out)
    }

    /// Named views of every learnable parameter, in canonical order.
    /// This order is shared by [`StLayer::forward`]'s bind list, the
    /// optimizer, and checkpoints.
    pub fn param_refs(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for p in 0..self.branch_w.len() {
            out.push((format!("branch{p}.weight"), &self.branch_w[p]));
            out.push((format!("branch{p}.bias"), &self.branch_b[p]));
        }
        for (p, m) in self.masks.iter().enumerate() {
            out.push((format!("mask{p}"), m));
        }
        out.push((String::from("bn_s.gamma"), &self.bn_s.gamma));
        out.push((String::from("bn_s.beta"), &self.bn_s.beta));
        out.push((String::from("temporal.weight"), &self.temporal_w));
        out.push((String::from("temporal.bias"), &self.temporal_b));
        out.push((String::from("bn_t.gamma"), &self.bn_t.gamma));
        out.push((String::from("bn_t.beta"), &self.bn_t.beta));
        if let ResidualPath::ChannelConv { w, b } | ResidualPath::VertexConv { w, b } = &self.res_v
        {
            out.push((String::from("res_v.weight"), w));
            out.push((String::from("res_v.bias"), b));
        }
        if let ResidualPath::ChannelConv { w, b } | ResidualPath::VertexConv { w, b } = &self.res_t
        {
            out.push((String::from("res_t.weight"), w));
            out.push((String::from("res_t.bias"), b));
        }
        out
    }

    /// Mutable counterpart of [`StLayer::param_refs`], same order.
    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (p, (w, b)) in self.branch_w.iter_mut().zip(self.branch_b.iter_mut()).enumerate() {
            out.push((format!("branch{p}.weight"), w));
            out.push((format!("branch{p}.bias"), b));
        }
        for (p, m) in self.masks.iter_mut().enumerate() {
            out.push((format!("mask{p}"), m));
        }
        out.push((String::from("bn_s.gamma"), &mut self.bn_s.gamma));
        out.push((String::from("bn_s.beta"), &mut self.bn_s.beta));
        out.push((String::from("temporal.weight"), &mut self.temporal_w));
        out.push((String::from("temporal.bias"), &mut self.temporal_b));
        out.push((String::from("bn_t.gamma"), &mut self.bn_t.gamma));
        out.push((String::from("bn_t.beta"), &mut self.bn_t.beta));
        if let ResidualPath::ChannelConv { w, b } | ResidualPath::VertexConv { w, b } =
            &mut self.res_v
        {
            out.push((String::from("res_v.weight"), w));
            out.push((String::from("res_v.bias"), b));
        }
        if let ResidualPath::ChannelConv { w, b } | ResidualPath::VertexConv { w, b } =
            &mut self.res_t
        {
            out.push((String::from("res_t.weight"), w));
            out.push((String::from("res_t.bias"), b));
        }
        out
    }

    /// Running batch-norm statistics, named like the parameters.
    pub fn state_refs(&self) -> Vec<(String, &BnState)> {
        alloc::vec![
            (String::from("bn_s"), &self.bn_s.state),
            (String::from("bn_t"), &self.bn_t.state),
        ]
    }

    pub fn state_refs_mut(&mut self) -> Vec<(String, &mut BnState)> {
        alloc::vec![
            (String::from("bn_s"), &mut self.bn_s.state),
            (String::from("bn_t"), &mut self.bn_t.state),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_refs().iter().map(|(_, t)| t.numel()).sum()
    }

    fn bind(&self, tape: &mut Tape, mode: Mode, binds: &mut Vec<Var>) -> BoundParams {
        let grad = mode == Mode::Train;
        let mut leaf = |t: &Tensor, binds: &mut Vec<Var>| {
            let mut t = t.clone();
            t.requires_grad = grad;
            let v = tape.leaf(t);
            binds.push(v);
            v
        };
        let branch: Vec<(Var, Var)> = self
            .branch_w
            .iter()
            .zip(&self.branch_b)
            .map(|(w, b)| (leaf(w, binds), leaf(b, binds)))
            .collect();
        let masks: Vec<Var> = self.masks.iter().map(|m| leaf(m, binds)).collect();
        let bn_s = (leaf(&self.bn_s.gamma, binds), leaf(&self.bn_s.beta, binds));
        let temporal = (leaf(&self.temporal_w, binds), leaf(&self.temporal_b, binds));
        let bn_t = (leaf(&self.bn_t.gamma, binds), leaf(&self.bn_t.beta, binds));
        let mut bind_res = |r: &ResidualPath, binds: &mut Vec<Var>| match r {
            ResidualPath::ChannelConv { w, b } | ResidualPath::VertexConv { w, b } => {
                Some((leaf(w, binds), leaf(b, binds)))
            }
            _ => None,
        };
        let res_v = bind_res(&self.res_v, binds);
        let res_t = bind_res(&self.res_t, binds);
        BoundParams { branch, masks, bn_s, temporal, bn_t, res_v, res_t }
    }

    fn mixing_var(&self, tape: &mut Tape, bound: &BoundParams, p: usize) -> Result<Var> {
        let mask = bound.masks[p];
        match self.params.variant {
            SpatialVariant::Bilinear => Ok(mask),
            SpatialVariant::Multiplicative => {
                let a = tape.leaf(self.a_hat[p].clone());
                tape.mul(a, mask)
            }
            SpatialVariant::Additive => {
                let a = tape.leaf(self.a_hat[p].clone());
                tape.add(a, mask)
            }
            SpatialVariant::Symmetric => {
                let m = symmetric_mask(tape, mask)?;
                let a = tape.leaf(self.a_hat[p].clone());
                tape.add(a, m)
            }
        }
    }

    fn spatial_preact_bound(
        &self,
        tape: &mut Tape,
        h: Var,
        bound: &BoundParams,
    ) -> Result<Var> {
        if self.is_degenerate() {
            let (w, b) = bound.branch[0];
            let c = tape.conv2d(h, w, 1, 0)?;
            return tape.add_bias(c, b, 1);
        }
        let mut acc: Option<Var> = None;
        for p in 0..PARTITIONS {
            let (w, b) = bound.branch[p];
            let c = tape.conv2d(h, w, 1, 0)?;
            let c = tape.add_bias(c, b, 1)?;
            let g = self.mixing_var(tape, bound, p)?;
            let m = tape.mix_last(c, g)?;
            acc = Some(match acc {
                None => m,
                Some(a) => tape.add(a, m)?,
            });
        }
        Ok(acc.expect("at least one partition"))
    }

    fn residual_var(
        &self,
        tape: &mut Tape,
        h: Var,
        path: &ResidualPath,
        vars: Option<(Var, Var)>,
        stride: usize,
    ) -> Result<Option<Var>> {
        match path {
            ResidualPath::None => Ok(None),
            ResidualPath::Identity => {
                if stride == 1 {
                    Ok(Some(h))
                } else {
                    Err(Error::Contract(String::from(
                        "identity residual cannot carry a stride",
                    )))
                }
            }
            ResidualPath::ChannelConv { .. } => {
                let (w, b) = vars.expect("conv residual was bound");
                let c = tape.conv2d(h, w, stride, 0)?;
                Ok(Some(tape.add_bias(c, b, 1)?))
            }
            ResidualPath::VertexConv { .. } => {
                let (w, b) = vars.expect("conv residual was bound");
                // [n, c_out * v_out, t', 1] -> [n, c_out, v_out, t'] ->
                // swap the trailing axes -> [n, c_out, t', v_out]
                let c = tape.conv2d(h, w, stride, 0)?;
                let c = tape.add_bias(c, b, 1)?;
                let shape = tape.value(c)?.shape().to_vec();
                let (n, t) = (shape[0], shape[2]);
                let c = tape.reshape(c, &[n, self.params.c_out, self.params.v_out, t])?;
                Ok(Some(tape.permute_last2(c)?))
            }
        }
    }

    /// Spatial mixing before the activation: `sum_p mix(conv1x1(H; W_p), G_p)`.
    pub fn spatial_preact(&self, tape: &mut Tape, h: Var, mode: Mode) -> Result<Var> {
        self.check_input(tape, h)?;
        let mut binds = Vec::new();
        let bound = self.bind(tape, mode, &mut binds);
        self.spatial_preact_bound(tape, h, &bound)
    }

    /// Spatial mixing with the activation applied, the standalone form
    /// of the mixing equations.
    pub fn spatial_forward(&self, tape: &mut Tape, h: Var, mode: Mode) -> Result<Var> {
        let pre = self.spatial_preact(tape, h, mode)?;
        tape.relu(pre)
    }

    fn check_input(&self, tape: &Tape, h: Var) -> Result<()> {
        let t = tape.value(h)?;
        if t.rank() != 4 || t.shape()[1] != self.params.c_in || t.shape()[3] != self.params.v_in {
            return Err(Error::Dim(format!(
                "layer expects input [n, {}, t, {}], got {}",
                self.params.c_in,
                self.params.v_in,
                fmt_shape(t.shape())
            )));
        }
        Ok(())
    }

    /// Full composite layer. Parameter tape handles are appended to
    /// `binds` in [`StLayer::param_refs`] order so a caller can route
    /// gradients back to parameters.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        h: Var,
        mode: Mode,
        binds: &mut Vec<Var>,
    ) -> Result<Var> {
        self.check_input(tape, h)?;
        let bound = self.bind(tape, mode, binds);
        let s = self.spatial_preact_bound(tape, h, &bound)?;
        let s = tape.batch_norm(
            s,
            bound.bn_s.0,
            bound.bn_s.1,
            &mut self.bn_s.state,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let s = match self.residual_var(tape, h, &self.res_v, bound.res_v, 1)? {
            Some(r) => {
                check_same_shape(tape, s, r, "vertex residual")?;
                tape.add(s, r)?
            }
            None => s,
        };
        let y = tape.relu(s)?;
        let t = temporal_forward(
            tape,
            y,
            bound.temporal.0,
            bound.temporal.1,
            self.params.stride,
        )?;
        let t = tape.batch_norm(
            t,
            bound.bn_t.0,
            bound.bn_t.1,
            &mut self.bn_t.state,
            mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        let t = match self.residual_var(tape, h, &self.res_t, bound.res_t, self.params.stride)? {
            Some(r) => {
                check_same_shape(tape, t, r, "temporal residual")?;
                tape.add(t, r)?
            }
            None => t,
        };
        tape.relu(t)
    }
}

fn check_same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (ta, tb) = (tape.value(a)?, tape.value(b)?);
    if ta.shape() != tb.shape() {
        return Err(Error::Contract(format!(
            "{what} produced {} but the main path is {}",
            fmt_shape(tb.shape()),
            fmt_shape(ta.shape())
        )));
    }
    Ok(())
}

/// `M = L L^T`, differentiable in `L`.
pub fn symmetric_mask(tape: &mut Tape, l: Var) -> Result<Var> {
    let lt = tape.transpose2d(l)?;
    tape.matmul(l, lt)
}

/// Temporal convolution with symmetric same-padding: kernel `k x 1`
/// along time, vertex axis untouched, `t' = ceil(t / stride)`.
pub fn temporal_forward(tape: &mut Tape, h: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let k = tape.value(w)?.shape()[2];
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "temporal kernel must be odd for symmetric same-padding, got {k}"
        )));
    }
    let c = tape.conv2d(h, w, stride, (k - 1) / 2)?;
    tape.add_bias(c, b, 1)
}

fn xavier_conv(rng: &mut impl Rng, co: usize, ci: usize, kt: usize, kv: usize) -> Tensor {
    let fan_in = (ci * kt * kv) as f64;
    let fan_out = (co * kt * kv) as f64;
    let bound = crate::math::sqrt(6.0 / (fan_in + fan_out));
    let n = co * ci * kt * kv;
    let data = (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
    Tensor::new(&[co, ci, kt, kv], data).expect("shape/data agree by construction")
}

fn init_mask(
    params: &StLayerParams,
    adjacency: Option<&PartitionedAdjacency>,
    p: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (vi, vo) = (params.v_in, params.v_out);
    Ok(match params.variant {
        SpatialVariant::Multiplicative => Tensor::full(&[vi, vi], 1.0),
        SpatialVariant::Additive => Tensor::zeros(&[vi, vi]),
        SpatialVariant::Symmetric => {
            let q = params.rank();
            let normal = Normal::new(0.0, 1e-3)
                .map_err(|_| Error::Config(String::from("bad normal parameters")))?;
            let data = (0..vi * q).map(|_| normal.sample(rng)).collect();
            Tensor::new(&[vi, q], data)?
        }
        SpatialVariant::Bilinear => match (params.bilinear_init, adjacency) {
            (BilinearInit::Adjacency { noise }, Some(adj)) if vo == vi && adj.v == vi => {
                let mut u = adj.a_hat[p].clone();
                for o in u.data_mut() {
                    *o += (rng.random::<f64>() * 2.0 - 1.0) * noise;
                }
                u
            }
            _ => {
                let scale = 1.0 / crate::math::sqrt(vi as f64);
                let data =
                    (0..vo * vi).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect();
                Tensor::new(&[vo, vi], data)?
            }
        },
    })
}

fn make_residual(params: &StLayerParams, stride: usize, rng: &mut impl Rng) -> ResidualPath {
    let (ci, co, vi, vo) = (params.c_in, params.c_out, params.v_in, params.v_out);
    if vi == vo {
        if ci == co && stride == 1 {
            ResidualPath::Identity
        } else {
            ResidualPath::ChannelConv {
                w: xavier_conv(rng, co, ci, 1, 1),
                b: Tensor::zeros(&[co]),
            }
        }
    } else {
        ResidualPath::VertexConv {
            w: xavier_conv(rng, co * vo, ci, 1, vi),
            b: Tensor::zeros(&[co * vo]),
        }
    }
}

/// `L L^T` on plain tensors.
fn outer_product_self(l: &Tensor) -> Tensor {
    let (v, q) = (l.shape()[0], l.shape()[1]);
    let mut m = Tensor::zeros(&[v, v]);
    for i in 0..v {
        for j in 0..v {
            let mut s = 0.0;
            for k in 0..q {
                s += l.at(&[i, k]) * l.at(&[j, k]);
            }
            *m.at_mut(&[i, j]) = s;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_partitions, SkeletonTemplate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3_adjacency() -> PartitionedAdjacency {
        let t = SkeletonTemplate::new(
            3,
            alloc::vec![(0, 1), (1, 2)],
            alloc::vec![[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            0,
        )
        .unwrap();
        build_partitions(&t).unwrap()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn validation_catches_bad_params() {
        let mut p = StLayerParams::new(2, 3, 4, SpatialVariant::Additive);
        p.temporal_kernel = 4;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut p = StLayerParams::new(2, 3, 4, SpatialVariant::Additive);
        p.v_out = 2;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut p = StLayerParams::new(2, 3, 4, SpatialVariant::Symmetric);
        p.symmetric_rank = Some(9);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let p = StLayerParams::new(2, 3, 4, SpatialVariant::Additive);
        assert!(StLayer::new(p, None, &mut rng()).is_err(), "adjacency is required");
    }

    #[test]
    fn bilinear_path_graph_hand_example() {
        // Mixing by the (eps-free) normalized path graph: degrees (1, 2, 1),
        // so G[0][1] = G[1][0] = G[1][2] = G[2][1] = 1/sqrt(2). Input
        // (1, 2, 3) with identity channel weights gives
        // (2, 1 + 3, 2) / sqrt(2).
        let mut p = StLayerParams::new(1, 1, 3, SpatialVariant::Bilinear);
        p.temporal_kernel = 1;
        let mut layer = StLayer::new(p, None, &mut rng()).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        for (name, t) in layer.param_refs_mut() {
            match name.as_str() {
                "branch0.weight" => t.data_mut()[0] = 1.0,
                "branch1.weight" | "branch2.weight" => t.data_mut()[0] = 0.0,
                "mask0" => {
                    t.data_mut().copy_from_slice(&[0.0, s, 0.0, s, 0.0, s, 0.0, s, 0.0]);
                }
                "mask1" | "mask2" => t.data_mut().iter_mut().for_each(|v| *v = 0.0),
                _ => {}
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1, 3], alloc::vec![1.0, 2.0, 3.0]).unwrap());
        let y = layer.spatial_preact(&mut tape, x, Mode::Eval).unwrap();
        let out = tape.value(y).unwrap().data().to_vec();
        assert!((out[0] - 2.0 * s).abs() < 1e-12);
        assert!((out[1] - 4.0 * s).abs() < 1e-12);
        assert!((out[2] - 2.0 * s).abs() < 1e-12);
    }

    #[test]
    fn residual_kinds_follow_shapes() {
        let adj = path3_adjacency();
        // same channels, same vertices, stride 1: both identity
        let mut p = StLayerParams::new(4, 4, 3, SpatialVariant::Additive);
        p.temporal_kernel = 3;
        let l = StLayer::new(p, Some(&adj), &mut rng()).unwrap();
        assert_eq!(l.res_v_kind(), ResidualKind::Identity);
        assert_eq!(l.res_t_kind(), ResidualKind::Identity);
        // channel growth: 1x1 convs
        let mut p = StLayerParams::new(4, 8, 3, SpatialVariant::Additive);
        p.temporal_kernel = 3;
        let l = StLayer::new(p, Some(&adj), &mut rng()).unwrap();
        assert_eq!(l.res_v_kind(), ResidualKind::ChannelConv);
        assert_eq!(l.res_t_kind(), ResidualKind::ChannelConv);
        // stride 2 with equal shapes: vertex residual identity, temporal
        // residual needs the strided conv
        let mut p = StLayerParams::new(4, 4, 3, SpatialVariant::Additive);
        p.temporal_kernel = 3;
        p.stride = 2;
        let l = StLayer::new(p, Some(&adj), &mut rng()).unwrap();
        assert_eq!(l.res_v_kind(), ResidualKind::Identity);
        assert_eq!(l.res_t_kind(), ResidualKind::ChannelConv);
        // vertex aggregation: both residuals project over vertices
        let mut p = StLayerParams::new(4, 8, 3, SpatialVariant::Bilinear);
        p.v_out = 1;
        p.temporal_kernel = 3;
        let l = StLayer::new(p, None, &mut rng()).unwrap();
        assert_eq!(l.res_v_kind(), ResidualKind::VertexConv);
        assert_eq!(l.res_t_kind(), ResidualKind::VertexConv);
    }

    #[test]
    fn aggregation_layer_outputs_single_vertex() {
        let mut p = StLayerParams::new(3, 6, 5, SpatialVariant::Bilinear);
        p.v_out = 1;
        p.temporal_kernel = 3;
        p.stride = 2;
        let mut layer = StLayer::new(p, None, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 8, 5], 0.3));
        let mut binds = Vec::new();
        let y = layer.forward(&mut tape, x, Mode::Eval, &mut binds).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[2, 6, 4, 1]);
    }

    #[test]
    fn degenerate_layer_has_one_branch_and_no_vertex_residual() {
        let mut p = StLayerParams::new(4, 4, 1, SpatialVariant::Bilinear);
        p.temporal_kernel = 3;
        assert!(p.is_degenerate());
        let mut layer = StLayer::new(p, None, &mut rng()).unwrap();
        assert_eq!(layer.res_v_kind(), ResidualKind::None);
        assert_eq!(layer.res_t_kind(), ResidualKind::Identity);
        let names: Vec<String> = layer.param_refs().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&String::from("branch0.weight")));
        assert!(!names.contains(&String::from("branch1.weight")));
        assert!(!names.iter().any(|n| n.starts_with("mask")));
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 4, 6, 1], 0.5));
        let mut binds = Vec::new();
        let y = layer.forward(&mut tape, x, Mode::Eval, &mut binds).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[2, 4, 6, 1]);
    }

    #[test]
    fn bind_order_matches_param_refs() {
        let adj = path3_adjacency();
        let mut p = StLayerParams::new(2, 5, 3, SpatialVariant::Symmetric);
        p.temporal_kernel = 3;
        p.stride = 2;
        let mut layer = StLayer::new(p, Some(&adj), &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 4, 3], 0.1));
        let mut binds = Vec::new();
        layer.forward(&mut tape, x, Mode::Train, &mut binds).unwrap();
        let refs = layer.param_refs();
        assert_eq!(binds.len(), refs.len());
        for (v, (name, t)) in binds.iter().zip(&refs) {
            assert_eq!(
                tape.value(*v).unwrap().data(),
                t.data(),
                "bind order diverged at {name}"
            );
        }
        // names are unique and the mutable view agrees
        let mut names: Vec<String> = refs.iter().map(|(n, _)| n.clone()).collect();
        let n0 = names.clone();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n0.len());
        let mut_names: Vec<String> =
            layer.param_refs_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(n0, mut_names);
    }

    #[test]
    fn temporal_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 4, 2], alloc::vec![1.0; 8]).unwrap());
        let w = tape.leaf(Tensor::new(&[1, 1, 1, 1], alloc::vec![1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = temporal_forward(&mut tape, x, w, b, 1).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1.0; 8]);
    }

    #[test]
    fn temporal_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 1]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 2, 1]));
        let b = tape.leaf(Tensor::zeros(&[1]));
        assert!(matches!(
            temporal_forward(&mut tape, x, w, b, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn temporal_stride_ceil_lengths() {
        for (t, s, expect) in [(300, 2, 150), (75, 2, 38), (7, 3, 3), (10, 1, 10)] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(&[1, 1, t, 1]));
            let w = tape.leaf(Tensor::zeros(&[1, 1, 9, 1]));
            let b = tape.leaf(Tensor::zeros(&[1]));
            let y = temporal_forward(&mut tape, x, w, b, s).unwrap();
            assert_eq!(tape.value(y).unwrap().shape()[2], expect, "t={t} s={s}");
        }
    }

    #[test]
    fn symmetric_mask_identity_and_zero() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::zeros(&[4, 2]));
        let m0 = symmetric_mask(&mut tape, zero).unwrap();
        assert_eq!(tape.value(m0).unwrap().data().iter().sum::<f64>(), 0.0);
        let eye = tape.leaf(Tensor::eye(3));
        let mi = symmetric_mask(&mut tape, eye).unwrap();
        assert_eq!(tape.value(mi).unwrap(), &Tensor::eye(3));
    }

    #[test]
    fn effective_mask_symmetry() {
        let adj = path3_adjacency();
        let mut p = StLayerParams::new(2, 2, 3, SpatialVariant::Symmetric);
        p.temporal_kernel = 3;
        let layer = StLayer::new(p, Some(&adj), &mut rng()).unwrap();
        for b in 0..3 {
            let m = layer.effective_mask(b).unwrap();
            let mt = m.transposed().unwrap();
            assert!(m.max_abs_diff(&mt).unwrap() < 1e-18);
        }
    }
}
