//! Dense row-major tensors over `f64`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense tensor with row-major storage.
///
/// Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::dimension("tensor data length", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a zero-filled tensor.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{context}: element {idx} is {}",
                self.data[idx]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn zeros_matches_shape() {
        let t = Tensor::zeros(vec![4, 5]);
        assert_eq!(t.shape(), &[4, 5]);
        assert_eq!(t.len(), 20);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn check_finite_flags_nan() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.check_finite("ok").is_ok());
        t.data_mut()[1] = f64::NAN;
        let err = t.check_finite("weights").unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn serde_round_trip() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.0625, 4.0]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
    }
}
