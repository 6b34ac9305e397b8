use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LR: f64 = 1e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS_ADAM: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    /// First and second moments by parameter name.
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS_ADAM,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter. All gradients must be present; on a
    /// missing gradient nothing is modified.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Parameter<T>)>) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        for (name, p) in &params {
            let g = p.grad.as_ref().expect("checked above");
            if g.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for (name, p) in params {
            let g = p.grad.as_ref().expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let iter = p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                let update = lr * m_hat / (v_hat.sqrt() + eps);
                // subtracting a signed zero could flip the sign of a zero weight
                if update != T::zero() {
                    *w = *w - update;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: &[f64], grad: Option<&[f64]>) -> Parameter<f64> {
        let mut p = Parameter::new(Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        p.grad = grad.map(|g| Tensor::new(vec![g.len()], g.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = param(&[1.5, -2.0], Some(&[0.0, 0.0]));
        let mut adam = AdamState::new(1e-3);
        for _ in 0..5 {
            adam.step([("w".to_string(), &mut p)]).unwrap();
        }
        assert_eq!(p.value.data(), &[1.5, -2.0]);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn first_step_is_sign_times_lr() {
        let mut p = param(&[0.0, 0.0, 0.0], Some(&[3.0, -0.01, 250.0]));
        let mut adam = AdamState::new(1e-4);
        adam.step([("w".to_string(), &mut p)]).unwrap();
        let expected = [-1e-4, 1e-4, -1e-4];
        for (w, e) in p.value.data().iter().zip(expected) {
            assert!((w - e).abs() < 1e-9, "{w} vs {e}");
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut p = param(&[0.0], None);
        let mut adam = AdamState::new(0.1);
        let mut steps = 0;
        while (p.value.data()[0] - 3.0).abs() >= 0.01 {
            let w = p.value.data()[0];
            p.grad = Some(Tensor::new(vec![1], vec![2.0 * (w - 3.0)]).unwrap());
            adam.step([("w".to_string(), &mut p)]).unwrap();
            steps += 1;
            assert!(steps <= 500, "not converged, w = {}", p.value.data()[0]);
        }
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let vals = [0.1, -0.0, 1e-30, 7.25];
        let mut p = param(&vals, Some(&[1.0, -2.0, 3.0, 1e10]));
        let mut adam = AdamState::new(0.0);
        adam.step([("w".to_string(), &mut p)]).unwrap();
        for (a, b) in p.value.data().iter().zip(vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut a = param(&[1.0], Some(&[1.0]));
        let mut b = param(&[2.0], None);
        let mut adam = AdamState::new(0.1);
        let err = adam
            .step([("a".to_string(), &mut a), ("b".to_string(), &mut b)])
            .unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "b"));
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(adam.t, 0);
    }
}
