//! Flat parameter buffers: the unit of everything this crate exchanges.
//!
//! A model's weights, velocities and gradients are all a `ParamBuffer` — one
//! flat float vector of length P. Collectives slice it, trainers step it,
//! and the half-precision path squeezes it through `HalfBuffer`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Flat vector of P finite floats. Length is fixed at construction and every
/// arithmetic op insists on matching lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuffer<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> ParamBuffer<T> {
    /// Build a buffer, rejecting NaN/Inf.
    pub fn new(values: Vec<T>) -> Result<Self> {
        for (index, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(ParamBuffer { values })
    }

    pub fn zeros(len: usize) -> Self {
        ParamBuffer {
            values: vec![T::zero(); len],
        }
    }

    /// Construction without the finite check, for values whose validity is
    /// the caller's contract (e.g. freshly computed gradients that the
    /// optimizer re-validates).
    pub(crate) fn from_vec_unchecked(values: Vec<T>) -> Self {
        ParamBuffer { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    /// Re-check finiteness, e.g. after a reduction landed in this buffer.
    pub fn check_finite(&self) -> Result<()> {
        for (index, v) in self.values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(())
    }

    /// dst[i] += src[i].
    pub fn add_inplace(&mut self, src: &ParamBuffer<T>) -> Result<()> {
        if self.len() != src.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: src.len(),
            });
        }
        for (d, s) in self.values.iter_mut().zip(&src.values) {
            *d = *d + *s;
        }
        Ok(())
    }

    /// dst[i] -= src[i].
    pub fn sub_inplace(&mut self, src: &ParamBuffer<T>) -> Result<()> {
        if self.len() != src.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: src.len(),
            });
        }
        for (d, s) in self.values.iter_mut().zip(&src.values) {
            *d = *d - *s;
        }
        Ok(())
    }

    /// dst[i] *= s.
    pub fn scale_inplace(&mut self, s: T) {
        debug_assert!(s.is_finite());
        for d in self.values.iter_mut() {
            *d = *d * s;
        }
    }

    /// Round every element to binary16. Errors if any finite value rounds to
    /// infinity (|v| beyond 65504 after rounding).
    pub fn to_half(&self) -> Result<HalfBuffer> {
        let mut bits = Vec::with_capacity(self.len());
        for (index, v) in self.values.iter().enumerate() {
            let b = v.to_half_bits();
            if half::f16::from_bits(b).is_infinite() {
                return Err(Error::OverflowToInfinity {
                    index,
                    value: v.into_f64(),
                });
            }
            bits.push(b);
        }
        Ok(HalfBuffer { bits })
    }

    /// Split into k slices of equal length ceil(P/k); the tail of the last
    /// slice is zero-padded. Zeros are the additive identity, so reductions
    /// over padded slices are unaffected.
    pub fn partition(&self, k: usize) -> Vec<Slice<T>> {
        assert!(k >= 1, "partition requires k >= 1");
        let chunk = self.len().div_ceil(k);
        (0..k)
            .map(|owner| {
                let start = (owner * chunk).min(self.len());
                let end = ((owner + 1) * chunk).min(self.len());
                let mut values = self.values[start..end].to_vec();
                values.resize(chunk, T::zero());
                Slice { owner, values }
            })
            .collect()
    }

    /// Inverse of `partition`: concatenate k slices and truncate the padding
    /// back to the original length.
    pub fn unpartition(slices: &[Slice<T>], len: usize) -> ParamBuffer<T> {
        let mut values = Vec::with_capacity(len);
        for s in slices {
            values.extend_from_slice(&s.values);
        }
        values.truncate(len);
        ParamBuffer { values }
    }
}

/// Vector of IEEE binary16 bit patterns, same length as the buffer it came
/// from. Widening back to T is exact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HalfBuffer {
    bits: Vec<u16>,
}

impl HalfBuffer {
    pub fn from_bits(bits: Vec<u16>) -> Self {
        HalfBuffer { bits }
    }

    pub fn bits(&self) -> &[u16] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Exact widening; introduces no rounding error.
    pub fn widen<T: Scalar>(&self) -> ParamBuffer<T> {
        ParamBuffer {
            values: self.bits.iter().map(|&b| T::from_half_bits(b)).collect(),
        }
    }

    pub fn encode_le(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bits.len() * 2);
        for &b in &self.bits {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn decode_le(bytes: &[u8]) -> Self {
        debug_assert_eq!(bytes.len() % 2, 0);
        HalfBuffer {
            bits: bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        }
    }
}

/// One of k equal-length sub-arrays of a buffer, tagged with the rank that
/// owns the reduction of this region.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice<T: Scalar> {
    pub owner: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> Slice<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
