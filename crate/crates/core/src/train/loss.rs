use crate::error::{ensure, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 20.0,
        }
    }
}

/// Scalar loss terms of one batch.
pub struct LossTerms<T: Scalar> {
    pub total: Tensor<T>,
    pub depth: Tensor<T>,
    pub edge: Tensor<T>,
}

fn mask_tensor<T: Scalar>(mask: &[bool], shape: &[usize]) -> Result<Tensor<T>> {
    Tensor::from_vec(mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(), shape)
}

/// `sum(|x| * m) / count(m)`, or a zero constant when `m` is empty.
fn masked_abs_mean<T: Scalar>(x: &Tensor<T>, m: &Tensor<T>) -> Result<Tensor<T>> {
    let count = m.data().iter().filter(|&&v| v > T::zero()).count();
    if count == 0 {
        return Ok(Tensor::scalar(T::zero()));
    }
    Ok(x.abs().mul(m)?.sum().mul_scalar(1.0 / count as f64))
}

/// `L1 + Lgrad` over valid pixels.
///
/// `L1` is the mean absolute residual. `Lgrad` sums, for each axis, the mean
/// absolute forward difference of the residual `d - d*` over pairs whose two
/// pixels are both valid; an axis without such pairs contributes 0.
pub fn depth_loss<T: Scalar>(d: &Tensor<T>, d_star: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    ensure!(
        d.shape() == d_star.shape() && d.dims() == 4 && d.shape()[1] == 1,
        "depth_loss: expected matching (N,1,H,W) maps, got {:?} and {:?}",
        d.shape(),
        d_star.shape()
    );
    ensure!(mask.len() == d.numel(), "depth_loss: mask holds {} values for {} pixels", mask.len(), d.numel());
    ensure!(mask.iter().any(|&m| m), "depth_loss: empty mask");
    let s = d.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let m = mask_tensor::<T>(mask, &s)?;
    let r = d.sub(&d_star.detach())?;
    let l1 = masked_abs_mean(&r, &m)?;

    let mut lgrad = Tensor::scalar(T::zero());
    for (axis, len) in [(3usize, w), (2, h)] {
        if len < 2 {
            continue;
        }
        let diff = r.narrow(axis, 1, len - 1)?.sub(&r.narrow(axis, 0, len - 1)?)?;
        let pair = m.narrow(axis, 1, len - 1)?.mul(&m.narrow(axis, 0, len - 1)?)?;
        lgrad = lgrad.add(&masked_abs_mean(&diff, &pair)?)?;
    }
    l1.add(&lgrad)
}

/// Binary cross-entropy on logits, `mean(softplus(x) - t * x)`.
pub fn edge_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(
        logits.shape() == target.shape(),
        "edge_loss: shape mismatch {:?} vs {:?}",
        logits.shape(),
        target.shape()
    );
    ensure!(
        target.data().iter().all(|&t| t == T::zero() || t == T::one()),
        "edge_loss: targets must be 0 or 1"
    );
    Ok(logits.softplus().sub(&logits.mul(&target.detach())?)?.mean())
}

/// `lambda1 * depth_loss + lambda2 * edge_loss`.
pub fn total_loss<T: Scalar>(
    d: &Tensor<T>,
    d_star: &Tensor<T>,
    logits: &Tensor<T>,
    edge_target: &Tensor<T>,
    mask: &[bool],
    w: LossWeights,
) -> Result<LossTerms<T>> {
    ensure!(
        w.lambda1 >= 0.0 && w.lambda2 >= 0.0,
        "total_loss: negative weights ({}, {})",
        w.lambda1,
        w.lambda2
    );
    let depth = depth_loss(d, d_star, mask)?;
    let edge = edge_loss(logits, edge_target)?;
    let total = depth.mul_scalar(w.lambda1).add(&edge.mul_scalar(w.lambda2))?;
    Ok(LossTerms { total, depth, edge })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_f64(v, shape).unwrap()
    }

    #[test]
    fn worked_depth_example() {
        let d = t(&[2.0, 4.0], &[1, 1, 1, 2]);
        let ds = t(&[1.0, 2.0], &[1, 1, 1, 2]);
        assert_eq!(depth_loss(&d, &ds, &[true, true]).unwrap().item().unwrap(), 2.5);
        assert_eq!(depth_loss(&d, &d, &[true, true]).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_has_no_gradient_term() {
        let ds = t(&[1.0, 2.0, 3.0, 5.0, 1.5, 2.5], &[1, 1, 2, 3]);
        let d = ds.add_scalar(0.75);
        let l = depth_loss(&d, &ds, &[true; 6]).unwrap().item().unwrap();
        assert!((l - 0.75).abs() < 1e-12);
    }

    #[test]
    fn invalid_pixels_are_excluded() {
        let d = t(&[2.0, 4.0, 100.0], &[1, 1, 1, 3]);
        let ds = t(&[1.0, 2.0, 0.0], &[1, 1, 1, 3]);
        let l = depth_loss(&d, &ds, &[true, true, false]).unwrap().item().unwrap();
        assert_eq!(l, 2.5);
        assert!(depth_loss(&d, &ds, &[false; 3]).is_err());
    }

    #[test]
    fn depth_loss_gradient_flows_to_prediction_only() {
        let d = t(&[2.0, 4.0], &[1, 1, 1, 2]).with_requires_grad(true);
        let ds = t(&[1.0, 2.0], &[1, 1, 1, 2]).with_requires_grad(true);
        depth_loss(&d, &ds, &[true, true]).unwrap().backward().unwrap();
        // d/dd of 0.5(|r0|+|r1|) + |r1 - r0|
        assert_eq!(d.grad().unwrap(), vec![0.5 - 1.0, 0.5 + 1.0]);
        assert!(ds.grad().is_none());
    }

    #[test]
    fn bce_constants() {
        let z = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let tg = t(&[0.0, 1.0, 1.0, 0.0], &[1, 1, 2, 2]);
        let l = edge_loss(&z, &tg).unwrap().item().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let sat = t(&[-40.0, 40.0, 40.0, -40.0], &[1, 1, 2, 2]);
        assert!(edge_loss(&sat, &tg).unwrap().item().unwrap() < 1e-12);
        assert!(edge_loss(&z, &t(&[0.5, 1.0, 0.0, 0.0], &[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let d = t(&[2.0, 4.0], &[1, 1, 1, 2]);
        let ds = t(&[1.0, 2.0], &[1, 1, 1, 2]);
        let z = Tensor::<f64>::zeros(&[1, 1, 1, 1]);
        let tg = t(&[1.0], &[1, 1, 1, 1]);
        let only_depth = LossWeights {
            lambda1: 1.0,
            lambda2: 0.0,
        };
        assert_eq!(total_loss(&d, &ds, &z, &tg, &[true; 2], only_depth).unwrap().total.item().unwrap(), 2.5);
        let only_edge = LossWeights {
            lambda1: 0.0,
            lambda2: 20.0,
        };
        let l = total_loss(&d, &ds, &z, &tg, &[true; 2], only_edge).unwrap().total.item().unwrap();
        assert!((l - 20.0 * 2f64.ln()).abs() < 1e-9);
    }
}
