//! Scalar abstraction so the numeric core runs in either `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps};

/// Floating-point scalar usable in tensors, parameters, and losses.
///
/// Training typically runs in `f32`; gradient checks and decoder scoring
/// run in `f64` where central differences and 1e-9 score comparisons are
/// meaningful.
pub trait Scalar:
    Float + NumAssignOps + Sum + Debug + Display + Copy + Send + Sync + 'static
{
    /// Lossless widening for accumulation and reporting.
    fn to_f64(self) -> f64;
    /// Narrowing conversion from `f64` (rounds for `f32`).
    fn from_f64(v: f64) -> Self;
    /// Raw little-endian bytes, used by the checkpoint format.
    fn write_bytes(self, out: &mut Vec<u8>);
    /// Inverse of [`Scalar::write_bytes`]; `buf` holds exactly
    /// [`Scalar::BYTE_WIDTH`] bytes.
    fn read_bytes(buf: &[u8]) -> Self;
    /// Number of bytes per value in the checkpoint format.
    const BYTE_WIDTH: usize;
    /// Dtype tag stored in checkpoints.
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn write_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_bytes(buf: &[u8]) -> Self {
        f32::from_le_bytes(buf.try_into().expect("4-byte value"))
    }
    const BYTE_WIDTH: usize = 4;
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn write_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_bytes(buf: &[u8]) -> Self {
        f64::from_le_bytes(buf.try_into().expect("8-byte value"))
    }
    const BYTE_WIDTH: usize = 8;
    const DTYPE: &'static str = "f64";
}

/// Probability floor shared by every log computation in the crate.
pub const PROB_FLOOR: f64 = 1e-12;
