//! Binary checkpoint files.
//!
//! Layout (little-endian): magic `STBC`, format version u32, the
//! network configuration, named float32 parameter blobs (name length,
//! name bytes, shape, data), named batch-norm running statistics, the
//! training RNG state (seed, stream, word position) and the epoch
//! counter. Loading validates the stored configuration, and applying a
//! checkpoint to a model validates every blob name and shape against
//! that model. A load followed by a save reproduces the file bit for
//! bit.

use std::path::Path;

use stbln_core::layers::{BilinearInit, SpatialVariant};
use stbln_core::network::{LayerSpec, Model, NetworkConfig};
use stbln_core::tape::BnState;
use stbln_core::tensor::Tensor;

use crate::dataset::{push_f32, ByteReader};
use crate::error::{io_err, CliError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STBC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reproducible state of the training data-order generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: Vec<(String, Tensor)>,
    pub bn_states: Vec<(String, BnState)>,
    pub rng: RngState,
    pub epoch: u32,
}

impl Checkpoint {
    /// Snapshots a model's parameters and running statistics.
    pub fn of_model(model: &Model, rng: RngState, epoch: u32) -> Self {
        Self {
            config: model.config().clone(),
            params: model
                .param_refs()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
            bn_states: model
                .state_refs()
                .into_iter()
                .map(|(name, s)| (name, s.clone()))
                .collect(),
            rng,
            epoch,
        }
    }

    /// Copies parameters and running statistics into a model built from
    /// the same configuration, validating names and shapes.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if *model.config() != self.config {
            return Err(CliError::Invalid(String::from(
                "checkpoint was written for a different network configuration",
            )));
        }
        let mut slots = model.param_refs_mut();
        if slots.len() != self.params.len() {
            return Err(CliError::Invalid(format!(
                "checkpoint has {} parameters but the model has {}",
                self.params.len(),
                slots.len()
            )));
        }
        for ((name, tensor), (slot_name, slot)) in
            self.params.iter().zip(slots.iter_mut())
        {
            if name != slot_name {
                return Err(CliError::Invalid(format!(
                    "checkpoint parameter {name:?} does not match model \
                     parameter {slot_name:?}"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(CliError::Invalid(format!(
                    "parameter {name}: checkpoint shape {:?} does not match \
                     model shape {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(tensor.data());
        }
        let mut states = model.state_refs_mut();
        if states.len() != self.bn_states.len() {
            return Err(CliError::Invalid(format!(
                "checkpoint has {} norm states but the model has {}",
                self.bn_states.len(),
                states.len()
            )));
        }
        for ((name, state), (slot_name, slot)) in
            self.bn_states.iter().zip(states.iter_mut())
        {
            if name != slot_name {
                return Err(CliError::Invalid(format!(
                    "checkpoint norm state {name:?} does not match model \
                     state {slot_name:?}"
                )));
            }
            if state.running_mean.len() != slot.running_mean.len() {
                return Err(CliError::Invalid(format!(
                    "norm state {name}: checkpoint has {} channels but the \
                     model has {}",
                    state.running_mean.len(),
                    slot.running_mean.len()
                )));
            }
            slot.running_mean.copy_from_slice(&state.running_mean);
            slot.running_var.copy_from_slice(&state.running_var);
        }
        Ok(())
    }
}

fn variant_tag(variant: SpatialVariant) -> u8 {
    match variant {
        SpatialVariant::Multiplicative => 0,
        SpatialVariant::Additive => 1,
        SpatialVariant::Symmetric => 2,
        SpatialVariant::Bilinear => 3,
    }
}

fn variant_from_tag(tag: u8) -> Option<SpatialVariant> {
    match tag {
        0 => Some(SpatialVariant::Multiplicative),
        1 => Some(SpatialVariant::Additive),
        2 => Some(SpatialVariant::Symmetric),
        3 => Some(SpatialVariant::Bilinear),
        _ => None,
    }
}

fn push_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

fn push_name(out: &mut Vec<u8>, name: &str) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
}

fn encode_config(out: &mut Vec<u8>, config: &NetworkConfig) {
    let (c, t, v) = config.input;
    for dim in [c, t, v, config.num_classes, config.temporal_kernel] {
        push_u32(out, dim);
    }
    push_u32(out, config.layers.len());
    for layer in &config.layers {
        push_u32(out, layer.c_out);
        push_u32(out, layer.stride);
        push_u32(out, layer.v_out);
        out.push(variant_tag(layer.variant));
    }
    push_u32(out, config.lambda.unwrap_or(0));
    push_u32(out, config.symmetric_rank.unwrap_or(0));
    match config.bilinear_init {
        BilinearInit::Adjacency { noise } => {
            out.push(0);
            out.extend_from_slice(&noise.to_le_bytes());
        }
        BilinearInit::Random => out.push(1),
    }
}

fn read_name(r: &mut ByteReader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| r.error("name is not valid UTF-8"))
}

fn decode_config(r: &mut ByteReader<'_>) -> Result<NetworkConfig> {
    let c = r.u32()? as usize;
    let t = r.u32()? as usize;
    let v = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let temporal_kernel = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let c_out = r.u32()? as usize;
        let stride = r.u32()? as usize;
        let v_out = r.u32()? as usize;
        let tag = r.take(1)?[0];
        let variant = variant_from_tag(tag)
            .ok_or_else(|| r.error(&format!("unknown spatial-variant tag {tag}")))?;
        layers.push(LayerSpec { c_out, stride, v_out, variant });
    }
    let lambda = match r.u32()? as usize {
        0 => None,
        l => Some(l),
    };
    let symmetric_rank = match r.u32()? as usize {
        0 => None,
        q => Some(q),
    };
    let bilinear_init = match r.take(1)?[0] {
        0 => BilinearInit::Adjacency { noise: r.f64()? },
        1 => BilinearInit::Random,
        tag => return Err(r.error(&format!("unknown mixing-init tag {tag}"))),
    };
    Ok(NetworkConfig {
        input: (c, t, v),
        num_classes,
        temporal_kernel,
        layers,
        lambda,
        symmetric_rank,
        bilinear_init,
    })
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION as usize);
    encode_config(&mut out, &checkpoint.config);
    push_u32(&mut out, checkpoint.params.len());
    for (name, tensor) in &checkpoint.params {
        push_name(&mut out, name);
        push_u32(&mut out, tensor.rank());
        for &dim in tensor.shape() {
            push_u32(&mut out, dim);
        }
        for &x in tensor.data() {
            push_f32(&mut out, x);
        }
    }
    push_u32(&mut out, checkpoint.bn_states.len());
    for (name, state) in &checkpoint.bn_states {
        push_name(&mut out, name);
        push_u32(&mut out, state.running_mean.len());
        for &x in &state.running_mean {
            push_f32(&mut out, x);
        }
        for &x in &state.running_var {
            push_f32(&mut out, x);
        }
    }
    out.extend_from_slice(&checkpoint.rng.seed.to_le_bytes());
    out.extend_from_slice(&checkpoint.rng.stream.to_le_bytes());
    out.extend_from_slice(&checkpoint.rng.word_pos.to_le_bytes());
    push_u32(&mut out, checkpoint.epoch as usize);
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = ByteReader::new(&buf, path);
    r.magic(&CHECKPOINT_MAGIC, "checkpoint")?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(&format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = decode_config(&mut r)?;
    config
        .validate()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    let param_count = r.u32()? as usize;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name = read_name(&mut r)?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let offset = r.offset();
        let data = r.f32s(numel)?;
        let tensor = Tensor::new(&shape, data).map_err(|e| {
            CliError::Invalid(format!(
                "{}: byte {offset}: parameter {name}: {e}",
                path.display()
            ))
        })?;
        params.push((name, tensor));
    }
    let state_count = r.u32()? as usize;
    let mut bn_states = Vec::with_capacity(state_count);
    for _ in 0..state_count {
        let name = read_name(&mut r)?;
        let channels = r.u32()? as usize;
        let running_mean = r.f32s(channels)?;
        let running_var = r.f32s(channels)?;
        bn_states.push((name, BnState { running_mean, running_var }));
    }
    let rng = RngState { seed: r.u64()?, stream: r.u64()?, word_pos: r.u128()? };
    let epoch = r.u32()?;
    r.finish()?;
    Ok(Checkpoint { config, params, bn_states, rng, epoch })
}

/// Convenience wrapper: snapshot a model and write it in one step.
pub fn save_model(path: &Path, model: &Model, rng: RngState, epoch: u32) -> Result<()> {
    write_checkpoint(path, &Checkpoint::of_model(model, rng, epoch))
}
