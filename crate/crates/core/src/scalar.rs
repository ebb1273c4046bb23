//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Element type stored in checkpoint archives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Real scalar: `f32` for training runs, `f64` for gradient and oracle checks.
pub trait Scalar:
    NdFloat + FromPrimitive + Default + Sum + Debug + Display + Send + Sync + 'static
{
    const DTYPE: Dtype;

    /// Converts a literal. Every `f64` is representable (possibly rounded) in both impls.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8], dtype: Dtype) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], dtype: Dtype) -> Self {
        match dtype {
            Dtype::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")),
            Dtype::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")) as f32,
        }
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8], dtype: Dtype) -> Self {
        match dtype {
            Dtype::F32 => f32::from_le_bytes(bytes.try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(bytes.try_into().expect("8 bytes")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_exact() {
        let mut buf = Vec::new();
        1.25e-3f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf, Dtype::F32), 1.25e-3f32);
        assert_eq!(f64::read_le(&buf, Dtype::F32), 1.25e-3f32 as f64);
        let mut buf = Vec::new();
        std::f64::consts::PI.write_le(&mut buf);
        assert_eq!(f64::read_le(&buf, Dtype::F64), std::f64::consts::PI);
    }
}
