//! Floating-point abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// A real scalar the networks, activations and metrics can be computed in.
///
/// Implemented for `f32` and `f64`. The byte codec is used by the model
/// artifact format, which stores weights little-endian in the scalar's
/// native width.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Tag written to artifact descriptors (`"f32"` / `"f64"`).
    const DTYPE: &'static str;
    /// Width of one encoded value in bytes.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from `f64`; used for constants and initializers.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Decodes a little-endian blob written in `dtype` into scalars of type `T`.
pub fn decode_blob<T: Scalar>(dtype: &str, bytes: &[u8]) -> Option<Vec<T>> {
    match dtype {
        "f32" if bytes.len() % 4 == 0 => Some(
            bytes
                .chunks_exact(4)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
        ),
        "f64" if bytes.len() % 8 == 0 => {
            Some(bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect())
        }
        _ => None,
    }
}
