use std::ops::Deref;
use std::sync::Arc;

/// Immutable, cheaply clonable semantic feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature(Arc<[f64]>);

impl Feature {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values.into())
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim].into())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    /// Unit-norm copy; the zero vector is returned unchanged.
    pub fn normalized(&self) -> Feature {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Feature::new(self.0.iter().map(|v| v / n).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// True when both handles point at the same allocation.
    pub fn ptr_eq(&self, other: &Feature) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl Deref for Feature {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Feature {
    fn from(v: Vec<f64>) -> Self {
        Feature::new(v)
    }
}
