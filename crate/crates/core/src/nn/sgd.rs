//! Momentum SGD over named parameter tensors.

use std::collections::BTreeMap;

use crate::{Error, Result, Tensor};

/// One momentum-SGD update: `v <- momentum*v - lr*grad; param <- param + v`.
///
/// `name` identifies the parameter in error messages.
pub fn sgd_step(
    param: &mut Tensor,
    velocity: &mut Tensor,
    grad: &Tensor,
    learning_rate: f64,
    momentum: f64,
    name: &str,
) -> Result<()> {
    if learning_rate <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!(
            "momentum must be in [0, 1), got {momentum}"
        )));
    }
    if grad.shape() != param.shape() {
        return Err(Error::dimension(&format!("gradient for {name}"), param.len(), grad.len()));
    }
    grad.check_finite(&format!("gradient for {name}"))
        .map_err(|_| Error::Diverged(format!("non-finite gradient for {name}")))?;
    for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.data_mut()).zip(grad.data()) {
        *v = momentum * *v - learning_rate * g;
        *p += *v;
    }
    Ok(())
}

/// Momentum SGD with one velocity buffer per named parameter, created lazily
/// on first update.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    momentum: f64,
    velocities: BTreeMap<String, Tensor>,
}

impl SgdOptimizer {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self { momentum, velocities: BTreeMap::new() })
    }

    pub fn step(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
        learning_rate: f64,
    ) -> Result<()> {
        let velocity = self
            .velocities
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        sgd_step(param, velocity, grad, learning_rate, self.momentum, name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_moves_against_gradient() {
        let mut p = Tensor::zeros(vec![2]);
        let mut v = Tensor::zeros(vec![2]);
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        sgd_step(&mut p, &mut v, &g, 0.1, 0.0, "p").unwrap();
        assert_eq!(p.data(), &[-0.1, -0.1]);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![2], vec![3.0, -4.0]).unwrap();
        let mut v = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![2]);
        sgd_step(&mut p, &mut v, &g, 0.5, 0.0, "p").unwrap();
        assert_eq!(p.data(), &[3.0, -4.0]);
    }

    #[test]
    fn momentum_matches_velocity_recursion() {
        // Oracle: v1 = -lr*g1; p1 = v1; v2 = 0.9*v1 - lr*g2; p2 = p1 + v2.
        let (lr, g1, g2) = (0.1, 2.0, -1.0);
        let v1 = -lr * g1;
        let p1 = v1;
        let v2 = 0.9 * v1 - lr * g2;
        let p2 = p1 + v2;

        let mut opt = SgdOptimizer::new(0.9).unwrap();
        let mut p = Tensor::zeros(vec![1]);
        opt.step("p", &mut p, &Tensor::new(vec![1], vec![g1]).unwrap(), lr).unwrap();
        assert!((p.data()[0] - p1).abs() < 1e-15);
        opt.step("p", &mut p, &Tensor::new(vec![1], vec![g2]).unwrap(), lr).unwrap();
        assert!((p.data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut opt = SgdOptimizer::new(0.0).unwrap();
        let mut p = Tensor::zeros(vec![1]);
        let g = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let err = opt.step("encoder.layer0.weights", &mut p, &g, 0.1).unwrap_err();
        match err {
            Error::Diverged(msg) => assert!(msg.contains("encoder.layer0.weights")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(SgdOptimizer::new(1.0).is_err());
        assert!(SgdOptimizer::new(-0.1).is_err());
        let mut p = Tensor::zeros(vec![1]);
        let mut v = Tensor::zeros(vec![1]);
        let g = Tensor::zeros(vec![1]);
        assert!(sgd_step(&mut p, &mut v, &g, 0.0, 0.5, "p").is_err());
    }
}
