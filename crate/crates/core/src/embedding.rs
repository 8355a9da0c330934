use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-norm fingerprint vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

impl Embedding {
    /// Wraps a vector that is already unit-norm.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::invalid(format!("embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    /// Scales `v` to unit norm.
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        let n = norm(&v);
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::numeric("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
