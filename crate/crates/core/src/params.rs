//! Flat parameter vectors: the unit of exchange, aggregation and checkpointing.
//!
//! Binary layout (shared by wire frames and checkpoint files):
//! `dim: u64 LE` followed by `dim` IEEE-754 `f64` values, little-endian.

use std::fmt;

use thiserror::Error;

/// Size in bytes of the dimension prefix in the binary encoding.
pub const DIM_PREFIX_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("weighted mean of an empty entry list")]
    Empty,
    #[error("all weights are zero")]
    ZeroTotalWeight,
    #[error("invalid weight {0}: weights must be finite and nonnegative")]
    InvalidWeight(f64),
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("truncated parameter buffer: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("declared dim {declared} inconsistent with {remaining} remaining bytes")]
    LengthMismatch { declared: u64, remaining: usize },
}

/// An ordered sequence of model weights.
///
/// Values are immutable once built; arithmetic always produces a new vector.
#[derive(Clone, PartialEq, Default)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    /// Wraps `values` without finiteness validation.
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    /// Wraps `values`, rejecting NaN and infinities.
    pub fn checked(values: Vec<f64>) -> Result<Self, ParamError> {
        let v = Self(values);
        v.check_finite()?;
        Ok(v)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn check_finite(&self) -> Result<(), ParamError> {
        match self.0.iter().position(|x| !x.is_finite()) {
            Some(index) => Err(ParamError::NonFinite {
                index,
                value: self.0[index],
            }),
            None => Ok(()),
        }
    }

    /// Bitwise equality, distinguishing signed zeros and NaN payloads.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dim() == other.dim()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute coordinate difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, ParamError> {
        ensure_same_dim(self, other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self(self.0.iter().map(|x| alpha * x).collect())
    }

    pub fn sub(&self, other: &Self) -> Result<Self, ParamError> {
        ensure_same_dim(self, other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect()))
    }

    pub fn add(&self, other: &Self) -> Result<Self, ParamError> {
        ensure_same_dim(self, other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect()))
    }

    pub fn norm_squared(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }
}

impl fmt::Debug for ParameterVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("ParameterVector").field(&self.0).finish()
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl std::ops::Index<usize> for ParameterVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn ensure_same_dim(a: &ParameterVector, b: &ParameterVector) -> Result<(), ParamError> {
    if a.dim() != b.dim() {
        return Err(ParamError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

/// Weighted element-wise mean `Σ w_k v_k / Σ w_k`.
///
/// Accumulates in input order and divides once at the end, so identical
/// inputs give bit-identical outputs. The result is clamped to the
/// per-coordinate envelope of the inputs to absorb final-ulp rounding.
pub fn weighted_mean(entries: &[(&ParameterVector, f64)]) -> Result<ParameterVector, ParamError> {
    let (first, _) = entries.first().ok_or(ParamError::Empty)?;
    let dim = first.dim();
    let mut total = 0.0;
    for (v, w) in entries {
        ensure_same_dim(first, v)?;
        if !w.is_finite() || *w < 0.0 {
            return Err(ParamError::InvalidWeight(*w));
        }
        v.check_finite()?;
        total += w;
    }
    if total <= 0.0 {
        return Err(ParamError::ZeroTotalWeight);
    }

    let mut acc = vec![0.0; dim];
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for (v, w) in entries {
        for (k, x) in v.iter().enumerate() {
            acc[k] += w * x;
            // zero-weight entries do not bound the mean
            if *w > 0.0 {
                lo[k] = lo[k].min(*x);
                hi[k] = hi[k].max(*x);
            }
        }
    }
    let out = acc
        .into_iter()
        .zip(lo.into_iter().zip(hi))
        .map(|(s, (lo, hi))| (s / total).clamp(lo, hi))
        .collect();
    Ok(ParameterVector(out))
}

/// `Σ (a_k − b_k)²`.
pub fn l2_distance_squared(a: &ParameterVector, b: &ParameterVector) -> Result<f64, ParamError> {
    ensure_same_dim(a, b)?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `alpha · x + y`.
pub fn axpy(alpha: f64, x: &ParameterVector, y: &ParameterVector) -> Result<ParameterVector, ParamError> {
    ensure_same_dim(x, y)?;
    Ok(ParameterVector(
        x.0.iter().zip(&y.0).map(|(xi, yi)| alpha * xi + yi).collect(),
    ))
}

pub fn encoded_len(dim: usize) -> usize {
    DIM_PREFIX_LEN + 8 * dim
}

/// Appends the binary encoding of `v` to `out`.
pub fn encode_params_into(v: &ParameterVector, out: &mut Vec<u8>) {
    out.reserve(encoded_len(v.dim()));
    out.extend_from_slice(&(v.dim() as u64).to_le_bytes());
    for x in &v.0 {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_params(v: &ParameterVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(encoded_len(v.dim()));
    encode_params_into(v, &mut out);
    out
}

/// Decodes a vector from the front of `bytes`, returning it and the number
/// of bytes consumed. Trailing bytes are left for the caller.
pub fn decode_params_prefix(bytes: &[u8]) -> Result<(ParameterVector, usize), ParamError> {
    if bytes.len() < DIM_PREFIX_LEN {
        return Err(ParamError::Truncated {
            needed: DIM_PREFIX_LEN,
            available: bytes.len(),
        });
    }
    let declared = u64::from_le_bytes(bytes[..DIM_PREFIX_LEN].try_into().unwrap());
    let remaining = bytes.len() - DIM_PREFIX_LEN;
    let body_len = usize::try_from(declared)
        .ok()
        .and_then(|d| d.checked_mul(8))
        .filter(|&n| n <= remaining)
        .ok_or(ParamError::Truncated {
            needed: DIM_PREFIX_LEN.saturating_add((declared as usize).saturating_mul(8)),
            available: bytes.len(),
        })?;
    let values = bytes[DIM_PREFIX_LEN..DIM_PREFIX_LEN + body_len]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((ParameterVector(values), DIM_PREFIX_LEN + body_len))
}

/// Decodes a buffer holding exactly one encoded vector.
pub fn decode_params(bytes: &[u8]) -> Result<ParameterVector, ParamError> {
    if bytes.len() >= DIM_PREFIX_LEN {
        let declared = u64::from_le_bytes(bytes[..DIM_PREFIX_LEN].try_into().unwrap());
        let remaining = bytes.len() - DIM_PREFIX_LEN;
        if remaining % 8 != 0 || (remaining / 8) as u64 > declared {
            return Err(ParamError::LengthMismatch { declared, remaining });
        }
    }
    let (v, used) = decode_params_prefix(bytes)?;
    debug_assert_eq!(used, bytes.len());
    Ok(v)
}

/// Decodes and validates finiteness, as required at network ingress.
pub fn decode_params_checked(bytes: &[u8]) -> Result<ParameterVector, ParamError> {
    let v = decode_params(bytes)?;
    v.check_finite()?;
    Ok(v)
}

pub fn write_checkpoint(path: &std::path::Path, v: &ParameterVector) -> std::io::Result<()> {
    std::fs::write(path, encode_params(v))
}

pub fn read_checkpoint(path: &std::path::Path) -> std::io::Result<ParameterVector> {
    let bytes = std::fs::read(path)?;
    decode_params_checked(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec())
    }

    #[test]
    fn weighted_mean_of_identical_vectors_is_exact() {
        let v = pv(&[0.1, -3.7, 1e-300, 12345.678]);
        let out = weighted_mean(&[(&v, 1.0), (&v, 2.0), (&v, 3.0)]).unwrap();
        assert!(out.bit_eq(&v));
    }

    #[test]
    fn weighted_mean_scalar_example() {
        let (a, b, c) = (pv(&[3.0]), pv(&[6.0]), pv(&[9.0]));
        let out = weighted_mean(&[(&a, 1.0), (&b, 2.0), (&c, 3.0)]).unwrap();
        assert_eq!(out.as_slice(), &[7.0]);
    }

    #[test]
    fn weighted_mean_single_entry() {
        let v = pv(&[1.5, 2.5]);
        assert!(weighted_mean(&[(&v, 7.0)]).unwrap().bit_eq(&v));
    }

    #[test]
    fn weighted_mean_errors() {
        let a = pv(&[1.0]);
        let b = pv(&[1.0, 2.0]);
        assert_eq!(weighted_mean(&[]), Err(ParamError::Empty));
        assert!(matches!(
            weighted_mean(&[(&a, 1.0), (&b, 1.0)]),
            Err(ParamError::DimMismatch { .. })
        ));
        assert_eq!(
            weighted_mean(&[(&a, 0.0), (&a, 0.0)]),
            Err(ParamError::ZeroTotalWeight)
        );
        assert!(matches!(
            weighted_mean(&[(&a, -1.0)]),
            Err(ParamError::InvalidWeight(_))
        ));
        let bad = pv(&[f64::NAN]);
        assert!(matches!(
            weighted_mean(&[(&bad, 1.0)]),
            Err(ParamError::NonFinite { index: 0, .. })
        ));
    }

    #[test]
    fn dim_zero_vectors_pass_through() {
        let e = ParameterVector::zeros(0);
        assert_eq!(weighted_mean(&[(&e, 1.0)]).unwrap().dim(), 0);
        assert_eq!(axpy(2.0, &e, &e).unwrap().dim(), 0);
    }

    #[test]
    fn l2_examples() {
        let a = pv(&[1.0, 2.0]);
        assert_eq!(l2_distance_squared(&a, &a).unwrap(), 0.0);
        assert_eq!(l2_distance_squared(&a, &pv(&[0.0, 0.0])).unwrap(), 5.0);
        assert!(l2_distance_squared(&a, &pv(&[0.0])).is_err());
    }

    #[test]
    fn axpy_examples() {
        let x = pv(&[1.0, 1.0]);
        let y = pv(&[2.0, 3.0]);
        assert!(axpy(0.0, &x, &y).unwrap().bit_eq(&y));
        assert_eq!(axpy(1.0, &x, &y).unwrap().as_slice(), &[3.0, 4.0]);
        assert_eq!(axpy(-1.0, &y, &y).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn encoding_lengths() {
        assert_eq!(encode_params(&ParameterVector::zeros(0)), vec![0u8; 8]);
        assert_eq!(encode_params(&pv(&[1.0, 2.0, 3.0])).len(), 32);
    }

    #[test]
    fn decode_rejects_malformed_buffers() {
        assert!(matches!(decode_params(&[0u8; 5]), Err(ParamError::Truncated { .. })));
        let mut bytes = encode_params(&pv(&[1.0, 2.0]));
        bytes.pop();
        assert!(decode_params(&bytes).is_err());
        let mut bytes = encode_params(&pv(&[1.0, 2.0]));
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(decode_params(&bytes), Err(ParamError::LengthMismatch { .. })));
        // absurd declared dim must not allocate
        let mut huge = u64::MAX.to_le_bytes().to_vec();
        huge.extend_from_slice(&[0u8; 16]);
        assert!(matches!(decode_params_prefix(&huge), Err(ParamError::Truncated { .. })));
    }

    #[test]
    fn signed_zero_and_subnormal_round_trip() {
        let v = pv(&[-0.0, 0.0, f64::MIN_POSITIVE / 4.0, -5e-324]);
        assert!(decode_params(&encode_params(&v)).unwrap().bit_eq(&v));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u64>(), 0..64)) {
            let values: Vec<f64> = bits
                .into_iter()
                .map(f64::from_bits)
                .filter(|x| x.is_finite())
                .collect();
            let v = ParameterVector::new(values);
            prop_assert!(decode_params_checked(&encode_params(&v)).unwrap().bit_eq(&v));
        }

        #[test]
        fn weighted_mean_scale_invariant_and_enveloped(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 1..6),
            weights in proptest::collection::vec(0.01f64..10.0, 6),
            scale in 0.1f64..100.0,
        ) {
            let vs: Vec<ParameterVector> = rows.into_iter().map(ParameterVector::new).collect();
            let e1: Vec<_> = vs.iter().zip(&weights).map(|(v, w)| (v, *w)).collect();
            let e2: Vec<_> = vs.iter().zip(&weights).map(|(v, w)| (v, *w * scale)).collect();
            let m1 = weighted_mean(&e1).unwrap();
            let m2 = weighted_mean(&e2).unwrap();
            for k in 0..4 {
                let lo = vs.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
                let hi = vs.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(m1[k] >= lo && m1[k] <= hi);
                let denom = m1[k].abs().max(1.0);
                prop_assert!((m1[k] - m2[k]).abs() / denom <= 1e-12);
            }
        }

        #[test]
        fn l2_is_symmetric(a in proptest::collection::vec(-1e6f64..1e6, 5), b in proptest::collection::vec(-1e6f64..1e6, 5)) {
            let (a, b) = (ParameterVector::new(a), ParameterVector::new(b));
            prop_assert_eq!(l2_distance_squared(&a, &b).unwrap(), l2_distance_squared(&b, &a).unwrap());
        }
    }
}
