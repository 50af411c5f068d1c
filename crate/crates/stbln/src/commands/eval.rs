//! `eval`: score a checkpoint against a dataset file, printing accuracy
//! and optionally writing per-sample softmax scores for later fusion.

use std::path::PathBuf;

use clap::Args;

use stbln_core::network::{build, softmax_rows_plain, Model};
use stbln_core::tensor::Tensor;
use stbln_core::training::{evaluate, Dataset};

use crate::checkpoint::read_checkpoint;
use crate::commands::check_dataset_shape;
use crate::config::GraphSection;
use crate::error::Result;
use crate::scores::write_scores;

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Skeleton template: `builtin25` or a template file path. Must
    /// match the graph the checkpoint was trained with.
    #[arg(long, default_value = "builtin25")]
    pub graph: String,
    /// Where to write per-sample softmax scores (CSV).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Evaluation batch size.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

/// Eval-mode softmax scores for every sample, in dataset order.
pub(crate) fn softmax_scores(
    model: &mut Model,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Tensor> {
    let n = dataset.len();
    let k = dataset.num_classes;
    let mut data = Vec::with_capacity(n * k);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, _) = dataset.gather(chunk)?;
        let logits = model.eval_logits(&batch)?;
        let probs = softmax_rows_plain(&logits)?;
        data.extend_from_slice(probs.data());
    }
    Ok(Tensor::new(&[n, k], data)?)
}

/// Returns the classification accuracy on the dataset.
pub fn cmd_eval(args: &EvalArgs) -> Result<f64> {
    let checkpoint = read_checkpoint(&args.checkpoint)?;
    let template = GraphSection { template: args.graph.clone() }.load()?;
    let dataset = crate::dataset::read_dataset(&args.data)?;
    check_dataset_shape(&checkpoint.config, &dataset, "evaluation")?;
    let mut model = build(checkpoint.config.clone(), Some(&template), 0)?;
    checkpoint.apply_to(&mut model)?;
    let accuracy = evaluate(&mut model, &dataset, args.batch)?;
    println!("samples {} accuracy {accuracy}", dataset.len());
    if let Some(path) = &args.scores {
        let scores = softmax_scores(&mut model, &dataset, args.batch)?;
        write_scores(path, &scores)?;
        println!("wrote {}", path.display());
    }
    Ok(accuracy)
}
