use std::collections::BTreeMap;

use thiserror::Error;

use super::param::ParamSet;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("non-finite gradient in parameter `{id}`")]
pub struct NonFiniteGrad {
    pub id: String,
}

/// Momentum SGD: `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, id: &str) -> Option<&[f64]> {
        self.velocity.get(id).map(Vec::as_slice)
    }

    /// Applies one update. Every gradient is checked before any value
    /// changes, so a rejected step leaves `params` and the velocity intact.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), NonFiniteGrad> {
        if let Some(p) = params.iter().find(|p| !p.grad.all_finite()) {
            return Err(NonFiniteGrad { id: p.id.clone() });
        }
        for p in params.iter_mut() {
            let v = self
                .velocity
                .entry(p.id.clone())
                .or_insert_with(|| vec![0.0; p.value.len()]);
            for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + (g + self.weight_decay * *w);
                *w -= self.lr * *vel;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm` and
/// returns the norm before scaling. Non-finite norms are left for
/// [`Sgd::step`] to reject.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = params
        .iter()
        .flat_map(|p| p.grad.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm {
        let scale = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::{ParamTensor, Tensor4};

    fn scalar_param(v: f64, g: f64) -> ParamSet {
        let mut p = ParamTensor::new("w", Tensor4::scalar(v));
        p.grad = Tensor4::scalar(g);
        ParamSet::from_params(vec![p]).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut ps = scalar_param(2.0, 3.5);
        Sgd::new(0.0, 0.9, 1e-3).step(&mut ps).unwrap();
        assert_eq!(ps.by_id("w").unwrap().value.data(), &[2.0]);
    }

    #[test]
    fn plain_step() {
        let mut ps = scalar_param(2.0, 1.0);
        Sgd::new(0.1, 0.0, 0.0).step(&mut ps).unwrap();
        assert!((ps.by_id("w").unwrap().value.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps_follow_unrolled_recursion() {
        let (lr, mu, wd) = (0.05, 0.9, 0.01);
        let mut ps = scalar_param(2.0, 0.7);
        let mut opt = Sgd::new(lr, mu, wd);
        opt.step(&mut ps).unwrap();
        ps.by_id_mut("w").unwrap().grad = Tensor4::scalar(-0.3);
        opt.step(&mut ps).unwrap();

        let w0 = 2.0;
        let v1 = 0.7 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + (-0.3 + wd * w1);
        let w2 = w1 - lr * v2;
        assert_eq!(ps.by_id("w").unwrap().value.data()[0], w2);
        assert_eq!(opt.velocity("w").unwrap()[0], v2);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut ps = scalar_param(2.0, f64::NAN);
        let err = Sgd::new(0.1, 0.0, 0.0).step(&mut ps).unwrap_err();
        assert_eq!(err.id, "w");
        assert_eq!(ps.by_id("w").unwrap().value.data(), &[2.0]);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut a = ParamTensor::new("a", Tensor4::scalar(0.0));
        a.grad = Tensor4::scalar(3.0);
        let mut b = ParamTensor::new("b", Tensor4::scalar(0.0));
        b.grad = Tensor4::scalar(4.0);
        let mut ps = ParamSet::from_params(vec![a, b]).unwrap();
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 5.0);
        assert!((ps.by_id("a").unwrap().grad.data()[0] - 0.6).abs() < 1e-15);
        assert!((ps.by_id("b").unwrap().grad.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut ps = scalar_param(1.0, 0.5);
        assert_eq!(clip_grad_norm(&mut ps, 1.0), 0.5);
        assert_eq!(ps.by_id("w").unwrap().grad.data(), &[0.5]);
    }
}
