//! `train`: run the full training loop from a config file, writing a
//! CSV log and checkpoints into the output directory.

use std::fs::File;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;

use stbln_core::network::build;
use stbln_core::training::{train, EpochRecord, LOG_HEADER};

use crate::checkpoint::{save_model, RngState};
use crate::commands::{check_dataset_shape, resolve_data};
use crate::config::load_config;
use crate::error::{io_err, Result};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Trains per the config, writing `log.csv`, interval checkpoints
/// (`epoch_NNNN.stbc` when `checkpoint_every` > 0) and `final.stbc`
/// under `--out`. Returns the per-epoch records.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<EpochRecord>> {
    let run = load_config(&args.config)?;
    let train_config = run.train.to_train_config(args.seed)?;
    let seed = train_config.seed;
    let template = run.graph.load()?;
    let network = run.network.to_network_config()?;
    let (train_set, test_set) = resolve_data(&run, &template, seed)?;
    check_dataset_shape(&network, &train_set, "training")?;
    check_dataset_shape(&network, &test_set, "test")?;

    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let log_path = args.out.join("log.csv");
    let mut log = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| io_err(&log_path, e))?;

    let mut model = build(network, Some(&template), seed)?;
    let rng = RngState { seed, stream: 0, word_pos: 0 };
    let every = run.train.checkpoint_every;
    let records = train(&mut model, &train_set, &test_set, &train_config, |record, m| {
        let row = record.csv_row();
        writeln!(log, "{row}").map_err(|e| {
            stbln_core::Error::Contract(format!("cannot write log: {e}"))
        })?;
        log.flush().map_err(|e| {
            stbln_core::Error::Contract(format!("cannot write log: {e}"))
        })?;
        println!("{row}");
        if every > 0 && record.epoch % every == 0 {
            let path = args.out.join(format!("epoch_{:04}.stbc", record.epoch));
            save_model(&path, m, rng, record.epoch as u32).map_err(|e| {
                stbln_core::Error::Contract(format!("cannot write checkpoint: {e}"))
            })?;
        }
        Ok(())
    })?;
    let final_path = args.out.join("final.stbc");
    save_model(&final_path, &model, rng, records.len() as u32)?;
    println!(
        "wrote {} and {} after {} epochs",
        log_path.display(),
        final_path.display(),
        records.len()
    );
    Ok(records)
}
