//! Flat real-valued gradient vectors and the handful of numeric primitives
//! every other module builds on.
//!
//! All arithmetic is `f64`. Constructors reject empty and non-finite input so
//! downstream trust arithmetic never sees NaN.

use std::ops::Index;

use crate::error::{Error, Result};

/// Cosine values may overshoot `[-1, 1]` by a few ulps; anything further out
/// indicates a bug rather than rounding.
const COSINE_CLAMP_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("gradient vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "gradient dimension must be positive");
        Self {
            values: vec![0.0; dim],
        }
    }

    /// Builds a vector from values known to be finite (internal arithmetic).
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite gradient");
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dims(self, other)?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        Ok(Self::from_finite(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        Ok(Self::from_finite(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, other: &Self, factor: f64) -> Result<Self> {
        check_dims(self, other)?;
        Ok(Self::from_finite(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + factor * b)
                .collect(),
        ))
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::from_finite(self.values.iter().map(|v| v * factor).collect())
    }

    /// Unit-norm copy; errors on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::DegenerateGradient);
        }
        Ok(self.scale(1.0 / n))
    }

    /// Coordinate-wise sign with `sign(0) = 0`.
    pub fn signum(&self) -> Self {
        Self::from_finite(
            self.values
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        )
    }

    pub fn squared_distance(&self, other: &Self) -> Result<f64> {
        check_dims(self, other)?;
        Ok(squared_distance(&self.values, &other.values))
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.squared_distance(other).map(f64::sqrt)
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.values[index]
    }
}

impl TryFrom<Vec<f64>> for GradientVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

fn check_dims(a: &GradientVector, b: &GradientVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

pub(crate) fn check_all_dims(vectors: &[GradientVector]) -> Result<usize> {
    let first = vectors.first().ok_or(Error::Empty("gradient list"))?;
    for v in &vectors[1..] {
        check_dims(first, v)?;
    }
    Ok(first.dim())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

pub fn l2_norm(a: &GradientVector) -> f64 {
    dot(&a.values, &a.values).sqrt()
}

/// `(a·b) / (‖a‖ ‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    check_dims(a, b)?;
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateGradient);
    }
    let cos = dot(&a.values, &b.values) / (na * nb);
    debug_assert!(
        cos.abs() <= 1.0 + COSINE_CLAMP_TOLERANCE,
        "cosine overshoot {cos}"
    );
    Ok(cos.clamp(-1.0, 1.0))
}

/// Coordinate-wise `Σ wᵢ·gᵢ`.
pub fn weighted_sum(vectors: &[GradientVector], weights: &[f64]) -> Result<GradientVector> {
    if vectors.len() != weights.len() {
        return Err(Error::LengthMismatch {
            left: vectors.len(),
            right: weights.len(),
        });
    }
    let dim = check_all_dims(vectors)?;
    let mut out = vec![0.0; dim];
    for (v, &w) in vectors.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(&v.values) {
            *o += w * x;
        }
    }
    GradientVector::new(out)
}

/// Plain coordinate-wise mean.
pub fn mean(vectors: &[GradientVector]) -> Result<GradientVector> {
    let dim = check_all_dims(vectors)?;
    let mut out = vec![0.0; dim];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(&v.values) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(GradientVector::from_finite(out))
}

/// Coordinate-wise mean and population standard deviation.
pub fn coord_stats(vectors: &[GradientVector]) -> Result<(GradientVector, GradientVector)> {
    if vectors.len() < 2 {
        return Err(Error::invalid(format!(
            "coord_stats needs at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let mu = mean(vectors)?;
    let n = vectors.len() as f64;
    let mut var = vec![0.0; mu.dim()];
    for v in vectors {
        for ((acc, x), m) in var.iter_mut().zip(&v.values).zip(&mu.values) {
            let d = x - m;
            *acc += d * d;
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok((mu, GradientVector::from_finite(std)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&gv(&[1.0, 0.0]), &gv(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine_similarity(&gv(&[2.0, 2.0]), &gv(&[1.0, 1.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&gv(&[1.0, 0.0]), &gv(&[-1.0, 0.0])).unwrap(), -1.0);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&gv(&[0.0, 0.0]), &gv(&[1.0, 0.0])),
            Err(Error::DegenerateGradient)
        ));
        assert!(matches!(
            cosine_similarity(&gv(&[1.0]), &gv(&[1.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn norm_examples() {
        assert_eq!(l2_norm(&gv(&[3.0, 4.0])), 5.0);
        assert_eq!(l2_norm(&gv(&[0.0, 0.0, 0.0])), 0.0);
        assert_eq!(l2_norm(&gv(&[1.0, 1.0, 1.0, 1.0])), 2.0);
    }

    #[test]
    fn weighted_sum_examples() {
        let out = weighted_sum(&[gv(&[1.0, 0.0]), gv(&[0.0, 1.0])], &[0.5, 0.5]).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
        let out = weighted_sum(&[gv(&[2.0, 2.0])], &[1.0]).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 2.0]);
        let out = weighted_sum(&[gv(&[1.0, 1.0]), gv(&[3.0, 3.0])], &[0.25, 0.75]).unwrap();
        assert_eq!(out.as_slice(), &[2.5, 2.5]);
    }

    #[test]
    fn weighted_sum_mismatch() {
        assert!(weighted_sum(&[gv(&[1.0])], &[0.5, 0.5]).is_err());
        assert!(weighted_sum(&[gv(&[1.0]), gv(&[1.0, 2.0])], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn coord_stats_examples() {
        let (m, s) = coord_stats(&[gv(&[0.0]), gv(&[2.0])]).unwrap();
        assert_eq!((m.as_slice(), s.as_slice()), (&[1.0][..], &[1.0][..]));
        let (m, s) = coord_stats(&[gv(&[1.0, 1.0]), gv(&[1.0, 1.0])]).unwrap();
        assert_eq!((m.as_slice(), s.as_slice()), (&[1.0, 1.0][..], &[0.0, 0.0][..]));
        let (m, s) = coord_stats(&[gv(&[0.0, 4.0]), gv(&[4.0, 0.0])]).unwrap();
        assert_eq!((m.as_slice(), s.as_slice()), (&[2.0, 2.0][..], &[2.0, 2.0][..]));
        assert!(coord_stats(&[gv(&[1.0])]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(GradientVector::new(vec![f64::NAN]).is_err());
        assert!(GradientVector::new(vec![]).is_err());
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..16)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn cosine_self_is_one(v in nonzero_vec()) {
            let a = gv(&v);
            prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_scale(v in nonzero_vec(), c in 0.01f64..50.0) {
            let a = gv(&v);
            prop_assert!((cosine_similarity(&a, &a.scale(c)).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((cosine_similarity(&a, &a.scale(-c)).unwrap() + 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_symmetric(v in nonzero_vec(), seed in any::<u64>()) {
            let a = gv(&v);
            let b = gv(&v.iter().enumerate().map(|(i, x)| x * (((seed >> (i % 64)) & 1) as f64 * 2.0 - 1.0) + 0.5).collect::<Vec<_>>());
            if b.norm() > 0.0 {
                prop_assert_eq!(cosine_similarity(&a, &b).unwrap(), cosine_similarity(&b, &a).unwrap());
            }
        }

        #[test]
        fn identity_weight_preserves(v in nonzero_vec()) {
            let a = gv(&v);
            let out = weighted_sum(std::slice::from_ref(&a), &[1.0]).unwrap();
            prop_assert_eq!(l2_norm(&out), l2_norm(&a));
            prop_assert_eq!(out, a);
        }
    }
}
