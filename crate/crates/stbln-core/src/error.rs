//! Error type shared across the crate.
//!
//! Variants are grouped by how a caller should react: `Dim` and `Config`
//! are caller mistakes (bad shapes, bad settings), `Contract` is a misuse
//! of an API sequence, and `Numeric` signals a runtime numerical failure
//! (non-finite values, divergence).

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up; the message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An API was used out of sequence (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A non-finite value or numerical blow-up was detected.
    #[error("numerical failure: {0}")]
    Numeric(String),
}

pub type Result<T> = core::result::Result<T, Error>;

/// Renders a shape like `[2, 3, 4]` for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    use core::fmt::Write;
    let mut s = String::from("[");
    for (i, d) in shape.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{d}");
    }
    s.push(']');
    s
}
