//! Run-configuration file handling.
//!
//! A run is described by a TOML file with four sections: `[network]`
//! (architecture), `[train]` (optimization), `[data]` (synthetic recipe
//! or dataset paths) and `[graph]` (skeleton template). Unknown keys are
//! hard errors, and parse failures report the offending key and line.
//! The built-in defaults describe the desk-scale synthetic experiment
//! and can be printed with `--dump-defaults`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stbln_core::graph::SkeletonTemplate;
use stbln_core::layers::{BilinearInit, SpatialVariant};
use stbln_core::network::{LayerSpec, NetworkConfig};
use stbln_core::tape::Precision;
use stbln_core::training::{ClassPattern, LimbMotion, SyntheticSpec, TrainConfig};

use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub graph: GraphSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    /// Spatial stage kind: `additive`, `multiplicative`, `symmetric`
    /// or `bilinear`, applied to every layer.
    pub variant: String,
    pub classes: usize,
    /// Input shape per sample: channels, frames, vertices.
    pub input: [usize; 3],
    pub temporal_kernel: usize,
    /// Output channels per layer; the layer count follows from this.
    pub channels: Vec<usize>,
    /// Temporal strides per layer; must match `channels` in length.
    pub strides: Vec<usize>,
    /// Aggregation layer (1-based): that layer collapses the vertex
    /// axis to one node and later layers use the single-vertex form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<usize>,
    /// Factor width for symmetric masks; defaults to the vertex count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symmetric_rank: Option<usize>,
    /// Noise amplitude added to adjacency-seeded mixing matrices.
    pub bilinear_noise: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            variant: String::from("additive"),
            classes: 3,
            input: [3, 64, 25],
            temporal_kernel: 9,
            channels: vec![8, 16],
            strides: vec![1, 2],
            lambda: None,
            symmetric_rank: None,
            bilinear_noise: 1e-6,
        }
    }
}

pub fn parse_variant(name: &str) -> Result<SpatialVariant> {
    match name {
        "additive" => Ok(SpatialVariant::Additive),
        "multiplicative" => Ok(SpatialVariant::Multiplicative),
        "symmetric" => Ok(SpatialVariant::Symmetric),
        "bilinear" => Ok(SpatialVariant::Bilinear),
        other => Err(CliError::Invalid(format!(
            "network.variant: unknown variant {other:?} (expected additive, \
             multiplicative, symmetric or bilinear)"
        ))),
    }
}

impl NetworkSection {
    pub fn to_network_config(&self) -> Result<NetworkConfig> {
        let variant = parse_variant(&self.variant)?;
        if self.channels.is_empty() {
            return Err(CliError::Invalid(String::from(
                "network.channels: need at least one layer",
            )));
        }
        if self.channels.len() != self.strides.len() {
            return Err(CliError::Invalid(format!(
                "network.strides: {} entries but network.channels has {}",
                self.strides.len(),
                self.channels.len()
            )));
        }
        let v = self.input[2];
        let layers = self
            .channels
            .iter()
            .zip(&self.strides)
            .map(|(&c_out, &stride)| LayerSpec { c_out, stride, v_out: v, variant })
            .collect();
        let mut config = NetworkConfig {
            input: (self.input[0], self.input[1], self.input[2]),
            num_classes: self.classes,
            temporal_kernel: self.temporal_kernel,
            layers,
            lambda: None,
            symmetric_rank: self.symmetric_rank,
            bilinear_init: BilinearInit::Adjacency { noise: self.bilinear_noise },
        };
        if let Some(lambda) = self.lambda {
            config = config.with_lambda(lambda)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by `lr_drop_factor`.
    pub schedule: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Value storage: `f64` or `f32` (accumulation stays 64-bit).
    pub precision: String,
    /// Checkpoint every n epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 64,
            lr: 0.1,
            schedule: vec![20, 26],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            precision: String::from("f64"),
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed_override: Option<u64>) -> Result<TrainConfig> {
        let precision = match self.precision.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => {
                return Err(CliError::Invalid(format!(
                    "train.precision: expected \"f64\" or \"f32\", got {other:?}"
                )))
            }
        };
        let config = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            lr_drop_epochs: self.schedule.clone(),
            lr_drop_factor: self.lr_drop_factor,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: seed_override.unwrap_or(self.seed),
            precision,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimbSection {
    /// Joint chain, proximal to distal.
    pub joints: Vec<usize>,
    pub frequency: u32,
    #[serde(default)]
    pub phase: f64,
    pub direction: [f64; 3],
    /// Amplitude multiplier on top of `data.amplitude`.
    #[serde(default = "default_gain")]
    pub gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSection {
    pub limbs: Vec<LimbSection>,
    /// How many of the listed limbs move per sample (random subset);
    /// all of them when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Generate data on the fly; otherwise `train`/`test` paths are
    /// required.
    pub synthetic: bool,
    pub t: usize,
    pub v: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub amplitude: f64,
    pub scale_jitter: f64,
    /// One motion pattern per class; empty means the built-in
    /// three-class set.
    pub patterns: Vec<PatternSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        let spec = SyntheticSpec::default_three();
        Self {
            synthetic: true,
            t: spec.t,
            v: spec.v,
            train_per_class: spec.train_per_class,
            test_per_class: spec.test_per_class,
            noise: spec.noise,
            amplitude: spec.amplitude,
            scale_jitter: spec.scale_jitter,
            patterns: Vec::new(),
            train: None,
            test: None,
        }
    }
}

/// Where training and test data come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files { train: PathBuf, test: PathBuf },
}

impl DataSection {
    pub fn source(&self) -> Result<DataSource> {
        if self.synthetic {
            if self.train.is_some() || self.test.is_some() {
                return Err(CliError::Invalid(String::from(
                    "data.synthetic is true but data.train/data.test paths are \
                     set; choose one source",
                )));
            }
            return Ok(DataSource::Synthetic(self.to_synthetic_spec()));
        }
        match (&self.train, &self.test) {
            (Some(train), Some(test)) => {
                Ok(DataSource::Files { train: train.clone(), test: test.clone() })
            }
            (None, _) => Err(CliError::Invalid(String::from(
                "data.train: path required when data.synthetic is false",
            ))),
            (_, None) => Err(CliError::Invalid(String::from(
                "data.test: path required when data.synthetic is false",
            ))),
        }
    }

    pub fn to_synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::default_three();
        spec.t = self.t;
        spec.v = self.v;
        spec.train_per_class = self.train_per_class;
        spec.test_per_class = self.test_per_class;
        spec.noise = self.noise;
        spec.amplitude = self.amplitude;
        spec.scale_jitter = self.scale_jitter;
        if !self.patterns.is_empty() {
            spec.patterns = self
                .patterns
                .iter()
                .map(|p| ClassPattern {
                    limbs: p
                        .limbs
                        .iter()
                        .map(|l| LimbMotion {
                            joints: l.joints.clone(),
                            frequency: l.frequency,
                            phase_offset: l.phase,
                            direction: l.direction,
                            gain: l.gain,
                        })
                        .collect(),
                    active: p.active,
                })
                .collect();
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// `builtin25` for the bundled 25-joint skeleton, or a path to a
    /// template file (`V E` header, edge lines, rest-pose lines).
    pub template: String,
}

impl Default for GraphSection {
    fn default() -> Self {
        Self { template: String::from("builtin25") }
    }
}

impl GraphSection {
    pub fn load(&self) -> Result<SkeletonTemplate> {
        if self.template == "builtin25" {
            return Ok(SkeletonTemplate::builtin25());
        }
        let path = Path::new(&self.template);
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        SkeletonTemplate::parse(&text)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }
}

/// Reads and parses a run configuration; parse errors carry the file
/// path plus the offending key and line from the TOML parser.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// The default configuration rendered as TOML (for `--dump-defaults`).
pub fn default_toml() -> String {
    toml::to_string_pretty(&RunConfig::default())
        .expect("default config serializes")
}
