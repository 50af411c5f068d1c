//! Per-sample score files for two-stream fusion.
//!
//! A score file is a CSV with header `score_0,...,score_{K-1}` and one
//! row of softmax probabilities per sample, written with Rust's
//! shortest-round-trip float formatting so reading a file back yields
//! the exact values. Fusion adds two score tables row by row and takes
//! the argmax.

use std::path::Path;

use stbln_core::tensor::Tensor;

use crate::error::{io_err, CliError, Result};

pub fn write_scores(path: &Path, scores: &Tensor) -> Result<()> {
    if scores.rank() != 2 {
        return Err(CliError::Invalid(format!(
            "scores must be [samples, classes], got rank {}",
            scores.rank()
        )));
    }
    let (n, k) = (scores.shape()[0], scores.shape()[1]);
    let mut out = String::new();
    for class in 0..k {
        if class > 0 {
            out.push(',');
        }
        out.push_str(&format!("score_{class}"));
    }
    out.push('\n');
    for row in 0..n {
        for class in 0..k {
            if class > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", scores.at(&[row, class])));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_scores(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let fail = |line: usize, message: String| {
        CliError::Invalid(format!("{}: line {line}: {message}", path.display()))
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| fail(1, String::from("score file is empty")))?;
    let columns: Vec<&str> = header.split(',').collect();
    let k = columns.len();
    for (i, column) in columns.iter().enumerate() {
        if *column != format!("score_{i}") {
            return Err(fail(
                1,
                format!("expected header column score_{i}, found {column:?}"),
            ));
        }
    }
    let mut data = Vec::new();
    let mut n = 0usize;
    for (index, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != k {
            return Err(fail(
                index + 1,
                format!("expected {k} fields, found {}", fields.len()),
            ));
        }
        for field in fields {
            let value: f64 = field.parse().map_err(|_| {
                fail(index + 1, format!("{field:?} is not a number"))
            })?;
            data.push(value);
        }
        n += 1;
    }
    Ok(Tensor::new(&[n, k], data)?)
}

/// Fraction of predictions matching the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(CliError::Invalid(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(CliError::Invalid(String::from("no samples to score")));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}
