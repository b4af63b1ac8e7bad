use std::collections::BTreeMap;

use crate::error::{ensure, invalid, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

/// `init_lr * (1 - epoch / max_epoch)^power`.
pub fn poly_lr(epoch: usize, init_lr: f64, max_epoch: usize, power: f64) -> Result<f64> {
    ensure!(max_epoch >= 1, "poly_lr: max_epoch must be at least 1");
    ensure!(epoch <= max_epoch, "poly_lr: epoch {epoch} outside [0, {max_epoch}]");
    Ok(init_lr * (1.0 - epoch as f64 / max_epoch as f64).powf(power))
}

/// One momentum SGD update on a flat buffer:
/// `v = momentum * v + (g + weight_decay * p)`, `p -= lr * v`.
pub fn sgd_update<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + (g + wd * *p);
        *p -= lr * *v;
    }
}

/// Momentum SGD over the trainable entries of a [`ParamStore`]. Velocity
/// buffers are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one step from the gradients held by the store's tensors. The
    /// updated tensors replace the old ones, which also clears their grads.
    pub fn step(&mut self, vs: &ParamStore<T>, lr: f64) -> Result<()> {
        for id in vs.trainable_ids().collect::<Vec<_>>() {
            let name = vs.name(id).to_string();
            let t = vs.get(id);
            let grad = t.grad().ok_or_else(|| invalid!("sgd: parameter {name} has no gradient"))?;
            let v = self.velocity.entry(name).or_insert_with(|| vec![T::zero(); t.numel()]);
            ensure!(v.len() == t.numel(), "sgd: velocity size mismatch for {}", vs.name(id));
            let mut p = t.to_vec();
            sgd_update(&mut p, &grad, v, lr, self.momentum, self.weight_decay);
            vs.set(id, p)?;
        }
        Ok(())
    }
}
