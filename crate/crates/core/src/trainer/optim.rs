use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};
use crate::params::{Grads, ParamStore};

/// Plain RMSprop taking ascent steps:
/// `v <- alpha v + (1 - alpha) g^2`, `theta <- theta + lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<F> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Squared-gradient accumulators keyed by parameter name.
    pub v: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> Default for RmsProp<F> {
    fn default() -> Self {
        RmsProp::new(1e-3, 0.95, 1e-7)
    }
}

impl<F: Real> RmsProp<F> {
    pub fn new(lr: f64, alpha: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            alpha,
            eps,
            v: BTreeMap::new(),
        }
    }

    /// Updates every tensor of `params` that has a gradient in `grads`,
    /// with the learning rate multiplied by `lr_scale`. Checks all gradients
    /// before touching anything, so a non-finite one leaves state intact.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Grads<F>, lr_scale: f64, step: u64) -> Result<()> {
        for (name, _) in params.iter() {
            if let Some(g) = grads.get(name) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        step,
                        tensor: name.clone(),
                    });
                }
            }
        }
        let (alpha, lr, eps) = (self.alpha, self.lr * lr_scale, self.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "rmsprop",
                    format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((theta, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let g = gi.f64();
                let nv = alpha * vi.f64() + (1.0 - alpha) * g * g;
                *vi = F::of(nv);
                if lr != 0.0 && g != 0.0 {
                    *theta = F::of(theta.f64() + lr * g / (nv.sqrt() + eps));
                }
            }
        }
        Ok(())
    }
}
