//! Binary dataset files.
//!
//! Layout (all integers little-endian): magic `STBN`, format version
//! u32, then N, C, T, V, K as u32 (samples, channels, frames, vertices,
//! classes), then N·C·T·V float32 values row-major, then N u32 labels.
//! The declared sizes must match the file length exactly, labels must
//! lie below K, and malformed files are reported with the byte offset
//! of the failure. Since payloads are stored as float32, a load
//! followed by a save reproduces the file bit for bit.

use std::path::Path;

use stbln_core::tensor::Tensor;
use stbln_core::training::Dataset;

use crate::error::{io_err, CliError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"STBN";
pub const DATASET_VERSION: u32 = 1;

/// A byte reader that reports the offset of whichever read fails.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: String,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &Path) -> Self {
        Self { buf, pos: 0, what: what.display().to_string() }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn error(&self, message: &str) -> CliError {
        CliError::Invalid(format!("{}: byte {}: {message}", self.what, self.pos))
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(&format!(
                "unexpected end of file ({} bytes left, {n} needed)",
                self.buf.len() - self.pos
            )));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    pub(crate) fn u128(&mut self) -> Result<u128> {
        let b = self.take(16)?;
        Ok(u128::from_le_bytes(b.try_into().expect("sixteen bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("eight bytes")))
    }

    /// Reads `n` float32 values widened to f64.
    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(4 * n)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4], kind: &str) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            self.pos -= 4;
            return Err(self.error(&format!(
                "bad magic {got:?}, not a {kind} file"
            )));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.error(&format!(
                "{} trailing bytes after the declared payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Appends `x` rounded to float32.
pub(crate) fn push_f32(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&(x as f32).to_le_bytes());
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let shape = dataset.data.shape();
    let (n, c, t, v) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(24 + 4 * dataset.data.numel() + 4 * n);
    out.extend_from_slice(&DATASET_MAGIC);
    for dim in [DATASET_VERSION as usize, n, c, t, v, dataset.num_classes] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &x in dataset.data.data() {
        push_f32(&mut out, x);
    }
    for &label in &dataset.labels {
        out.extend_from_slice(&(label as u32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = ByteReader::new(&buf, path);
    r.magic(&DATASET_MAGIC, "dataset")?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(r.error(&format!(
            "unsupported dataset version {version} (expected {DATASET_VERSION})"
        )));
    }
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let t = r.u32()? as usize;
    let v = r.u32()? as usize;
    let k = r.u32()? as usize;
    if c == 0 || t == 0 || v == 0 {
        return Err(r.error("channel, frame and vertex counts must be positive"));
    }
    let data = r.f32s(n * c * t * v)?;
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = r.u32()? as usize;
        if label >= k {
            return Err(r.error(&format!(
                "label {label} of sample {i} is out of range for {k} classes"
            )));
        }
        labels.push(label);
    }
    r.finish()?;
    let tensor = Tensor::new(&[n, c, t, v], data)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    Dataset::new(tensor, labels, k)
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}
