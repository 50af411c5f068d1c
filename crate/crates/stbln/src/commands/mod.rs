//! Subcommand implementations. Each command is a plain function over a
//! clap-derived argument struct so it can be driven from tests as well
//! as from the binary.

pub mod eval;
pub mod flops;
pub mod fuse;
pub mod gen_data;
pub mod gradcheck;
pub mod train;

pub use eval::{cmd_eval, EvalArgs};
pub use flops::{cmd_flops, FlopsArgs};
pub use fuse::{cmd_fuse, FuseArgs};
pub use gen_data::{cmd_gen_data, GenDataArgs};
pub use gradcheck::{cmd_gradcheck, GradcheckArgs};
pub use train::{cmd_train, TrainArgs};

use stbln_core::graph::SkeletonTemplate;
use stbln_core::network::NetworkConfig;
use stbln_core::training::{generate_synthetic, Dataset};

use crate::config::{DataSource, RunConfig};
use crate::dataset::read_dataset;
use crate::error::{CliError, Result};

/// Materializes the configured data source: synthetic generation under
/// the given seed, or dataset files from disk.
pub(crate) fn resolve_data(
    config: &RunConfig,
    template: &SkeletonTemplate,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    match config.data.source()? {
        DataSource::Synthetic(spec) => {
            Ok(generate_synthetic(&spec, template, seed)?)
        }
        DataSource::Files { train, test } => {
            Ok((read_dataset(&train)?, read_dataset(&test)?))
        }
    }
}

/// Rejects datasets whose shape or class count disagrees with the
/// network configuration.
pub(crate) fn check_dataset_shape(
    config: &NetworkConfig,
    dataset: &Dataset,
    role: &str,
) -> Result<()> {
    let shape = dataset.data.shape();
    let (c, t, v) = config.input;
    if shape[1] != c || shape[2] != t || shape[3] != v {
        return Err(CliError::Invalid(format!(
            "{role} data has shape [n, {}, {}, {}] but the network expects \
             [n, {c}, {t}, {v}]",
            shape[1], shape[2], shape[3]
        )));
    }
    if dataset.num_classes != config.num_classes {
        return Err(CliError::Invalid(format!(
            "{role} data has {} classes but the network expects {}",
            dataset.num_classes, config.num_classes
        )));
    }
    Ok(())
}
