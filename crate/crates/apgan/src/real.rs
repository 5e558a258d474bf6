//! Scalar abstraction so model math can run in f32 (training default) or
//! f64 (gradient checks, sketch tests).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use rustfft::FftNum;

pub trait Real:
    Float
    + NumAssignOps
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + FftNum
    + std::iter::Sum
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Dtype tag used by the checkpoint container.
    const TAG: u8;
    const BYTES: usize;

    fn of(v: f64) -> Self;
    fn to64(self) -> f64;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const TAG: u8 = 4;
    const BYTES: usize = 4;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn to64(self) -> f64 {
        self as f64
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const TAG: u8 = 8;
    const BYTES: usize = 8;

    fn of(v: f64) -> Self {
        v
    }

    fn to64(self) -> f64 {
        self
    }

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}
