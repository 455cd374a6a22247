//! Floating-point scalar abstraction.
//!
//! Every numeric kernel in the crate (softmax, entropy, advantages, clipped
//! surrogate, gradients) is written once against [`Scalar`] and instantiated
//! for `f32` and `f64`. The crate root exports `f64` aliases as the default
//! working precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    /// Width of the little-endian encoding used by checkpoints.
    const BYTES: usize;

    /// Short name recorded in checkpoint headers and run metadata.
    const NAME: &'static str;

    /// Converts an `f64` constant into this precision.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("every f64 converts to a float type")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts to a float type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Decodes exactly `Self::BYTES` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    /// Tolerance used when validating that a probability vector sums to one.
    fn normalization_tolerance() -> Self {
        Self::of(1e-9).max(Self::epsilon() * Self::of(64.0))
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Scalar>(x: T) -> T {
        let mut buf = Vec::new();
        x.write_le(&mut buf);
        assert_eq!(buf.len(), T::BYTES);
        T::read_le(&buf)
    }

    #[test]
    fn le_encoding_is_bit_exact() {
        for x in [0.0f64, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, -1e300] {
            assert_eq!(roundtrip(x).to_bits(), x.to_bits());
        }
        for x in [0.0f32, 0.1, -7.25e-20] {
            assert_eq!(roundtrip(x).to_bits(), x.to_bits());
        }
    }

    #[test]
    fn tolerance_scales_with_precision() {
        assert_eq!(f64::normalization_tolerance(), 1e-9);
        assert!(f32::normalization_tolerance() > 1e-6);
    }
}
