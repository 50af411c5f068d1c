//! Desk-scale training: SGD with momentum and a step learning-rate
//! schedule, plus a synthetic skeleton-sequence generator whose classes
//! are separable by spatio-temporal pattern but not by static pose.
//!
//! Synthetic design: every sample is the template rest pose plus
//! periodic limb displacements and i.i.d. noise. Class identity is
//! carried by the *relative phase* between two limb groups (or by the
//! oscillation frequency), while the global phase and amplitude of each
//! sample are randomized. All frequencies are integral over the clip,
//! so every class has exactly the same mean pose, and any fixed linear
//! pooling over vertices yields identically distributed series for the
//! phase-coded classes — distinguishing them requires cross-vertex
//! processing before aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{fmt_shape, Error, Result};
use crate::graph::SkeletonTemplate;
use crate::network::{argmax_rows, Model};
use crate::tape::{Mode, Precision, Tape};
use crate::tensor::Tensor;

/// Optimization settings; the defaults follow the reference recipe
/// (50 epochs, batch 64, lr 0.1 divided by 10 at epochs 30 and 40,
/// momentum 0.9, weight decay 1e-4).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 0.1,
            lr_drop_epochs: alloc::vec![30, 40],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(String::from(
                "epochs and batch_size must be positive",
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return Err(Error::Config(format!(
                "lr_drop_factor must be >= 1, got {}",
                self.lr_drop_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        for w in self.lr_drop_epochs.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(String::from(
                    "lr drop epochs must be strictly increasing",
                )));
            }
        }
        if let Some(&last) = self.lr_drop_epochs.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "lr drop epoch {last} must be < epochs ({})",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based): divided by the
    /// drop factor at the start of each drop epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| d <= epoch).count();
        let mut lr = self.lr;
        for _ in 0..drops {
            lr /= self.lr_drop_factor;
        }
        lr
    }
}

/// One momentum-SGD update for a single parameter:
/// `g <- grad + wd * param; v <- momentum * v + g; param <- param - lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::Dim(format!(
            "gradient shape {} does not match parameter shape {}",
            fmt_shape(grad.shape()),
            fmt_shape(param.shape())
        )));
    }
    if velocity.len() != param.numel() {
        return Err(Error::Contract(String::from(
            "velocity buffer does not match the parameter",
        )));
    }
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity) {
        let g = g + weight_decay * *p;
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum-SGD over a whole parameter list, with per-parameter
/// velocity buffers kept in full precision.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    precision: Precision,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            precision: config.precision,
            velocity: Vec::new(),
        }
    }

    /// Applies one update to `params` (name, tensor) using `grads`
    /// aligned by position. A non-finite gradient aborts with a
    /// diagnostic naming the parameter.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| alloc::vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Contract(String::from(
                "optimizer state does not match the parameter list",
            )));
        }
        for (((name, param), grad), velocity) in
            params.iter_mut().zip(grads).zip(self.velocity.iter_mut())
        {
            if !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            sgd_step(param, grad, velocity, lr, self.momentum, self.weight_decay)?;
            if self.precision == Precision::F32 {
                for x in param.data_mut() {
                    *x = *x as f32 as f64;
                }
            }
        }
        Ok(())
    }
}

/// An in-memory labeled dataset of `[n, c, t, v]` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(data: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::Dim(format!(
                "dataset expects [n, c, t, v], got {}",
                fmt_shape(data.shape())
            )));
        }
        if data.shape()[0] != labels.len() {
            return Err(Error::Dim(format!(
                "{} samples but {} labels",
                data.shape()[0],
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config(String::from("need at least 2 classes")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { data, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the selected samples into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.data.shape();
        let stride: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!(
                    "sample index {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.data.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let batch =
            Tensor::new(&[indices.len(), shape[1], shape[2], shape[3]], data)?;
        Ok((batch, labels))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Header of the CSV training log.
pub const LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc";

impl EpochRecord {
    /// The record as one CSV row matching [`LOG_HEADER`].
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_acc
        )
    }
}

/// Eval-mode classification accuracy over a dataset, in chunks of
/// `batch_size`.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract(String::from("cannot evaluate an empty dataset")));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = data.gather(chunk)?;
        let logits = model.eval_logits(&batch)?;
        let pred = argmax_rows(&logits)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn shuffle(indices: &mut [usize], rng: &mut impl Rng) {
    for i in (1..indices.len()).rev() {
        let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
}

/// Runs the full training loop. Per epoch: seeded shuffle, mini-batch
/// SGD (final short batch included), then an eval pass on `test_set`.
/// `on_epoch` runs after every epoch (for logging and checkpoints).
/// Fully deterministic for a fixed seed. A non-finite loss aborts with
/// a numeric error.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract(String::from("training set is empty")));
    }
    let mut optimizer = Sgd::new(config);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (batch, labels) = train_set.gather(chunk)?;
            let mut tape = Tape::with_precision(config.precision);
            let mut binds = Vec::new();
            let logits = model.forward(&mut tape, &batch, Mode::Train, &mut binds)?;
            let pred = argmax_rows(tape.value(logits)?)?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let loss = tape.cross_entropy(logits, &labels)?;
            let loss_value = tape.value(loss)?.data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch} ({loss_value})"
                )));
            }
            loss_sum += loss_value * labels.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grad_list: Vec<Tensor> = {
                let mut out = Vec::with_capacity(binds.len());
                for v in &binds {
                    out.push(grads.take(*v).ok_or_else(|| {
                        Error::Contract(String::from(
                            "a bound parameter received no gradient",
                        ))
                    })?);
                }
                out
            };
            optimizer.step(&mut model.param_refs_mut(), &grad_list, lr)?;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            test_acc: evaluate(model, test_set, config.batch_size)?,
        };
        on_epoch(&record, model)?;
        records.push(record);
    }
    Ok(records)
}

/// One oscillating limb: a chain of joints (proximal to distal), the
/// number of oscillation cycles per clip, a phase offset relative to
/// the sample's global phase, and a displacement direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbMotion {
    pub joints: Vec<usize>,
    pub frequency: u32,
    pub phase_offset: f64,
    pub direction: [f64; 3],
    /// Amplitude multiplier on top of the spec-wide amplitude.
    pub gain: f64,
}

/// The motion signature of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPattern {
    pub limbs: Vec<LimbMotion>,
    /// How many of the listed limbs move in each sample, chosen
    /// uniformly at random without replacement; all of them when None.
    pub active: Option<usize>,
}

/// Synthetic dataset settings; `patterns` has one entry per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub t: usize,
    pub v: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub amplitude: f64,
    /// Per-sample amplitude jitter: scale drawn from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    pub patterns: Vec<ClassPattern>,
}

impl SyntheticSpec {
    /// The default three-class task on the 25-joint template. Five
    /// disjoint body sites (both arms, both legs, the head) can
    /// oscillate; each sample activates a random subset of them, every
    /// active site with its own random phase and amplitude jitter.
    /// Class 0 moves two sites, class 1 moves three at amplitude
    /// sqrt(2/3), and class 2 moves two at double frequency. The gain
    /// on class 1 equalizes not just the mean pose but also the total
    /// motion energy and each site's marginal energy across classes,
    /// so classes 0 and 1 can only be told apart by actually counting
    /// how many sites move — the per-sample jitter keeps summed
    /// energies overlapping between a loud pair and a quiet triple.
    pub fn default_three() -> Self {
        const DIRECTION: [f64; 3] = [0.4, 0.3, 1.0];
        let pattern = |frequency: u32, active: usize, gain: f64| ClassPattern {
            limbs: [
                alloc::vec![5, 6, 7],
                alloc::vec![9, 10, 11],
                alloc::vec![13, 14, 15],
                alloc::vec![17, 18, 19],
                alloc::vec![2, 3],
            ]
            .into_iter()
            .map(|joints| LimbMotion {
                joints,
                frequency,
                phase_offset: 0.0,
                direction: DIRECTION,
                gain,
            })
            .collect(),
            active: Some(active),
        };
        Self {
            t: 64,
            v: 25,
            train_per_class: 300,
            test_per_class: 100,
            noise: 0.02,
            amplitude: 0.25,
            scale_jitter: 0.3,
            patterns: alloc::vec![
                pattern(3, 2, 1.0),
                pattern(3, 3, crate::math::sqrt(2.0 / 3.0)),
                pattern(6, 2, 1.0),
            ],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.patterns.len()
    }

    pub fn validate(&self, template: &SkeletonTemplate) -> Result<()> {
        if self.t == 0 || self.v == 0 {
            return Err(Error::Config(String::from("t and v must be positive")));
        }
        if self.v != template.num_joints() {
            return Err(Error::Config(format!(
                "spec expects {} joints but the template has {}",
                self.v,
                template.num_joints()
            )));
        }
        if self.patterns.len() < 2 {
            return Err(Error::Config(String::from("need at least 2 class patterns")));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(String::from(
                "train_per_class and test_per_class must be positive",
            )));
        }
        if self.noise < 0.0 || self.amplitude <= 0.0 || !(0.0..1.0).contains(&self.scale_jitter)
        {
            return Err(Error::Config(String::from(
                "noise must be >= 0, amplitude > 0, scale_jitter in [0, 1)",
            )));
        }
        for (k, pattern) in self.patterns.iter().enumerate() {
            if let Some(active) = pattern.active {
                if active == 0 || active > pattern.limbs.len() {
                    return Err(Error::Config(format!(
                        "class {k} wants {active} active limbs but lists {}",
                        pattern.limbs.len()
                    )));
                }
            }
            for limb in &pattern.limbs {
                if limb.joints.iter().any(|&j| j >= self.v) {
                    return Err(Error::Config(format!(
                        "class {k} pattern references a joint outside 0..{}",
                        self.v
                    )));
                }
                if limb.frequency == 0 || limb.frequency as usize % self.t == 0 {
                    return Err(Error::Config(format!(
                        "class {k} frequency must be a nonzero non-multiple of t so \
                         every class keeps the same mean pose"
                    )));
                }
                if !(limb.gain > 0.0) || !limb.gain.is_finite() {
                    return Err(Error::Config(format!(
                        "class {k} limb gain must be a positive finite number"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn synthesize_split(
    spec: &SyntheticSpec,
    template: &SkeletonTemplate,
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let (t_len, v) = (spec.t, spec.v);
    let n = per_class * spec.num_classes();
    let mut data = Tensor::zeros(&[n, 3, t_len, v]);
    let mut labels = Vec::with_capacity(n);
    let rest = template.rest_pose();
    let noise = Normal::new(0.0, 1.0)
        .map_err(|_| Error::Config(String::from("bad noise parameters")))?;
    let tau = 2.0 * core::f64::consts::PI;
    let mut sample = 0usize;
    for (class, pattern) in spec.patterns.iter().enumerate() {
        let total = pattern.limbs.len();
        let wanted = pattern.active.unwrap_or(total);
        let mut order: Vec<usize> = (0..total).collect();
        let mut moving = alloc::vec![false; total];
        for _ in 0..per_class {
            // pick which limbs move this sample
            moving.iter_mut().for_each(|m| *m = false);
            for i in 0..wanted {
                let j = i + rng.random_range(0..total - i);
                order.swap(i, j);
                moving[order[i]] = true;
            }
            let base = sample * 3 * t_len * v;
            {
                let dst = data.data_mut();
                for (j, p) in rest.iter().enumerate() {
                    for c in 0..3 {
                        let row = base + (c * t_len) * v;
                        for step in 0..t_len {
                            dst[row + step * v + j] = p[c];
                        }
                    }
                }
                for (limb, _) in pattern.limbs.iter().zip(&moving).filter(|(_, &m)| m) {
                    let phase = rng.random::<f64>() * tau;
                    let scale = 1.0 + spec.scale_jitter * (2.0 * rng.random::<f64>() - 1.0);
                    let len = limb.joints.len() as f64;
                    for (depth, &j) in limb.joints.iter().enumerate() {
                        // distal joints move more
                        let weight = (depth + 1) as f64 / len;
                        for step in 0..t_len {
                            let angle = tau * limb.frequency as f64 * step as f64
                                / t_len as f64
                                + phase
                                + limb.phase_offset;
                            let disp = spec.amplitude
                                * limb.gain
                                * scale
                                * weight
                                * crate::math::sin(angle);
                            for c in 0..3 {
                                dst[base + (c * t_len + step) * v + j] +=
                                    limb.direction[c] * disp;
                            }
                        }
                    }
                }
                if spec.noise > 0.0 {
                    for x in &mut dst[base..base + 3 * t_len * v] {
                        *x += spec.noise * noise.sample(rng);
                    }
                }
            }
            labels.push(class);
            sample += 1;
        }
    }
    Dataset::new(data, labels, spec.num_classes())
}

/// Generates disjoint train and test splits from independent seed
/// streams of the same seed.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    template: &SkeletonTemplate,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    spec.validate(template)?;
    let mut rng_train = ChaCha8Rng::seed_from_u64(seed);
    rng_train.set_stream(1);
    let mut rng_test = ChaCha8Rng::seed_from_u64(seed);
    rng_test.set_stream(2);
    let train = synthesize_split(spec, template, spec.train_per_class, &mut rng_train)?;
    let test = synthesize_split(spec, template, spec.test_per_class, &mut rng_test)?;
    Ok((train, test))
}
