//! Dense vector helpers and the unit-norm [`Embedding`] newtype.

use crate::error::{HcscError, Result};

/// Tolerance on `| ‖v‖₂ − 1 |` for anything claiming to be unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// L2-normalizes in place. Zero vectors are left untouched and `false` is returned.
pub fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n > 0.0 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

/// Numerically stable `log Σ exp(x_i)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax into a fresh vector.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

/// Index of the maximum element; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// A point on the unit sphere in embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wraps a vector that must already have unit norm.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
            return Err(HcscError::contract(format!(
                "embedding norm {n} is not 1 within {UNIT_NORM_TOL}"
            )));
        }
        Ok(Self(values))
    }

    /// Projects an arbitrary non-zero vector onto the unit sphere.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if !normalize_in_place(&mut values) {
            return Err(HcscError::contract("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn embedding_rejects_non_unit() {
        assert!(Embedding::from_unit(vec![1.0, 1.0]).is_err());
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!(Embedding::normalized(vec![0.0, 0.0]).is_err());
    }
}
