//! Scalar abstraction for the numeric core.
//!
//! All tensor math is generic over [`Scalar`] so the same kernels run in
//! `f32` (the production precision, see the crate-root aliases) and `f64`
//! (useful for tighter gradient checks).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point element type accepted by tensors and kernels.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Byte width of the little-endian encoding used by checkpoints.
    const LE_BYTES: usize;

    fn fromf(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> Scalar conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar -> f64 conversion")
    }

    fn write_le(self, out: &mut Vec<u8>);

    /// Reads one value from the front of `bytes`, advancing the slice.
    fn read_le(bytes: &mut &[u8]) -> Option<Self>;
}

impl Scalar for f32 {
    const LE_BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &mut &[u8]) -> Option<Self> {
        let (head, rest) = bytes.split_first_chunk::<4>()?;
        *bytes = rest;
        Some(f32::from_le_bytes(*head))
    }
}

impl Scalar for f64 {
    const LE_BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &mut &[u8]) -> Option<Self> {
        let (head, rest) = bytes.split_first_chunk::<8>()?;
        *bytes = rest;
        Some(f64::from_le_bytes(*head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_preserves_bits() {
        let vals = [0.1f32, -3.5, f32::MIN_POSITIVE, 1.0e30];
        let mut buf = Vec::new();
        for v in vals {
            v.write_le(&mut buf);
        }
        let mut slice = buf.as_slice();
        for v in vals {
            let got = f32::read_le(&mut slice).unwrap();
            assert_eq!(got.to_bits(), v.to_bits());
        }
        assert!(slice.is_empty());
    }
}
