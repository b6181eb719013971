//! Element types that can live in a parameter buffer and travel on the wire.
//!
//! f32 is the runtime type; f64 exists so equivalence checks can run without
//! float-reordering noise. Both know how to round to binary16 and back, which
//! is all the half-precision exchange path needs.

use half::f16;
use std::fmt;

/// Wire element type carried in a collective frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    F16 = 1,
    F64 = 2,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F16 => write!(f, "f16"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Float element of a parameter buffer: little-endian encodable and
/// convertible to/from IEEE binary16 with round-to-nearest-even.
pub trait Scalar:
    num_traits::Float + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    const SIZE: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Round to binary16 (round-to-nearest-even). May produce an infinite
    /// bit pattern for finite input; callers decide whether that is an error.
    fn to_half_bits(self) -> u16;
    fn from_half_bits(bits: u16) -> Self;

    fn of_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const SIZE: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn to_half_bits(self) -> u16 {
        f16::from_f32(self).to_bits()
    }

    fn from_half_bits(bits: u16) -> Self {
        f16::from_bits(bits).to_f32()
    }

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const SIZE: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }

    fn to_half_bits(self) -> u16 {
        f16::from_f64(self).to_bits()
    }

    fn from_half_bits(bits: u16) -> Self {
        f16::from_bits(bits).to_f64()
    }

    fn of_f64(v: f64) -> Self {
        v
    }

    fn into_f64(self) -> f64 {
        self
    }
}

/// Encode a slice of scalars as little-endian bytes.
pub fn encode<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * T::SIZE);
    for &v in values {
        v.write_le(&mut out);
    }
    out
}

/// Decode little-endian bytes into scalars. Length must be a multiple of the
/// element size.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    debug_assert_eq!(bytes.len() % T::SIZE, 0);
    bytes.chunks_exact(T::SIZE).map(T::read_le).collect()
}
