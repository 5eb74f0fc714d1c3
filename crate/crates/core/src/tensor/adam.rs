use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam<S> {
    pub learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
}

impl<S: Scalar> Adam<S> {
    pub fn new(learning_rate: S) -> Self {
        Self { learning_rate, beta1: S::lit(0.9), beta2: S::lit(0.999), epsilon: S::lit(1e-8) }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
    pub hyper: Adam<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shape: &[usize], hyper: Adam<S>) -> Self {
        Self { step: 0, m: Tensor::zeros(shape), v: Tensor::zeros(shape), hyper }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn apply(&mut self, param: &mut Tensor<S>, grad: &Tensor<S>) -> Result<()> {
        if param.shape() != self.m.shape() || grad.shape() != self.m.shape() {
            return invalid(format!(
                "adam shapes: state {:?}, param {:?}, grad {:?}",
                self.m.shape(),
                param.shape(),
                grad.shape()
            ));
        }
        self.step += 1;
        let Adam { learning_rate, beta1, beta2, epsilon } = self.hyper;
        let (lr, b1, b2, eps) = (learning_rate.to_acc(), beta1.to_acc(), beta2.to_acc(), epsilon.to_acc());
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, m), v), &g) in param
            .data_mut()
            .iter_mut()
            .zip(self.m.data_mut())
            .zip(self.v.data_mut())
            .zip(grad.data())
        {
            let g = g.to_acc();
            let mn = b1 * m.to_acc() + (1.0 - b1) * g;
            let vn = b2 * v.to_acc() + (1.0 - b2) * g * g;
            *m = S::from_acc(mn);
            *v = S::from_acc(vn);
            if lr != 0.0 {
                let upd = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *p = S::from_acc(p.to_acc() - upd);
            }
        }
        Ok(())
    }
}
