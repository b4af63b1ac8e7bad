use super::{nchw, Scalar, Tensor};
use crate::error::{ensure, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Per-channel batch normalization of an NCHW tensor.
///
/// In training mode the batch statistics normalize the input and are blended
/// into `stats` (`running = (1 - momentum) * running + momentum * batch`, with
/// the unbiased variance). In eval mode only `stats` is read.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut BnStats<T>,
    training: bool,
    momentum: f64,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input, "batch_norm")?;
    ensure!(
        gamma.shape() == [c] && beta.shape() == [c] && stats.mean.len() == c && stats.var.len() == c,
        "batch_norm: {c} channels but gamma {:?}, beta {:?}, stats {}/{}",
        gamma.shape(),
        beta.shape(),
        stats.mean.len(),
        stats.var.len()
    );
    let hw = h * w;
    let count = n * hw;
    ensure!(count > 0, "batch_norm: empty input");
    let x = input.data();
    let eps = T::lit(eps);
    let momentum = T::lit(momentum);

    let (mean, inv_std) = if training {
        let m = T::lit(count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = s / m;
            let mut sq = T::zero();
            for b in 0..n {
                for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / m;
        }
        let unbias = if count > 1 {
            T::lit(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        for ch in 0..c {
            stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean[ch];
            stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
        }
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        (mean, inv)
    } else {
        let inv = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        (stats.mean.clone(), inv)
    };

    let (gm, bt) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
            let scale = gm[ch] * inv_std[ch];
            let shift = bt[ch] - mean[ch] * scale;
            for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                *o = v * scale + shift;
            }
        }
    }

    Ok(Tensor::op_result(
        "batch_norm",
        out,
        vec![n, c, h, w],
        vec![input.clone(), gamma.clone(), beta.clone()],
        move |a| {
            let x = a.inputs[0].data();
            let gm = a.inputs[1].data();
            let gy = a.grad_output;
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                    for (&g, &v) in gy[range.clone()].iter().zip(&x[range]) {
                        sum_g[ch] += g;
                        sum_gx[ch] += g * (v - mean[ch]) * inv_std[ch];
                    }
                }
            }
            let gx = a.wants(0).then(|| {
                let mut gx = vec![T::zero(); x.len()];
                let m = T::lit(count as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let range = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                        let k = gm[ch] * inv_std[ch];
                        let dst = &mut gx[range.clone()];
                        if training {
                            let mg = sum_g[ch] / m;
                            let mgx = sum_gx[ch] / m;
                            for ((d, &g), &v) in dst.iter_mut().zip(&gy[range.clone()]).zip(&x[range]) {
                                let xhat = (v - mean[ch]) * inv_std[ch];
                                *d = k * (g - mg - xhat * mgx);
                            }
                        } else {
                            for (d, &g) in dst.iter_mut().zip(&gy[range]) {
                                *d = k * g;
                            }
                        }
                    }
                }
                gx
            });
            vec![gx, a.wants(1).then_some(sum_gx), a.wants(2).then_some(sum_g)]
        },
    ))
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    ensure!(input.dims() >= 1, "layer_norm: rank-0 input");
    let d = *input.shape().last().unwrap_or(&0);
    ensure!(
        gamma.shape() == [d] && beta.shape() == [d],
        "layer_norm: feature size {d} but gamma {:?}, beta {:?}",
        gamma.shape(),
        beta.shape()
    );
    ensure!(d > 0, "layer_norm: empty feature axis");
    let rows = input.numel() / d;
    let x = input.data();
    let eps = T::lit(eps);
    let dm = T::lit(d as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mu = row.iter().copied().sum::<T>() / dm;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dm;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mu) * inv;
        }
    }
    let (gm, bt) = (gamma.data(), beta.data());
    let out: Vec<T> = xhat
        .iter()
        .enumerate()
        .map(|(i, &v)| v * gm[i % d] + bt[i % d])
        .collect();
    Ok(Tensor::op_result(
        "layer_norm",
        out,
        input.shape().to_vec(),
        vec![input.clone(), gamma.clone(), beta.clone()],
        move |a| {
            let gm = a.inputs[1].data();
            let gy = a.grad_output;
            let mut ggamma = vec![T::zero(); d];
            let mut gbeta = vec![T::zero(); d];
            for (i, (&g, &xh)) in gy.iter().zip(&xhat).enumerate() {
                ggamma[i % d] += g * xh;
                gbeta[i % d] += g;
            }
            let gx = a.wants(0).then(|| {
                let mut gx = vec![T::zero(); gy.len()];
                for r in 0..rows {
                    let span = r * d..(r + 1) * d;
                    let mut mean_gh = T::zero();
                    let mut mean_ghx = T::zero();
                    for (j, (&g, &xh)) in gy[span.clone()].iter().zip(&xhat[span.clone()]).enumerate() {
                        let gh = g * gm[j];
                        mean_gh += gh;
                        mean_ghx += gh * xh;
                    }
                    mean_gh = mean_gh / dm;
                    mean_ghx = mean_ghx / dm;
                    for (j, ((o, &g), &xh)) in gx[span.clone()]
                        .iter_mut()
                        .zip(&gy[span.clone()])
                        .zip(&xhat[span.clone()])
                        .enumerate()
                    {
                        *o = inv_std[r] * (g * gm[j] - mean_gh - xh * mean_ghx);
                    }
                }
                gx
            });
            vec![gx, a.wants(1).then_some(ggamma), a.wants(2).then_some(gbeta)]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(c: usize, g: f64, b: f64) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], g), Tensor::full(&[c], b))
    }

    #[test]
    fn standardized_input_is_unchanged_in_train_mode() {
        // per channel values {-1, 1, -1, 1}: mean 0, biased var 1
        let x = Tensor::<f64>::from_f64(&[-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0], &[1, 2, 2, 2]).unwrap();
        let (g, b) = affine(2, 1.0, 0.0);
        let mut st = BnStats::new(2);
        let y = batch_norm(&x, &g, &b, &mut st, true, BN_MOMENTUM, BN_EPSILON).unwrap();
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i * scale).abs() < 1e-15);
            assert!((o - i).abs() < 1e-5);
        }
        // running stats moved toward the batch: mean 0, unbiased var 4/3
        assert!(st.mean.iter().all(|&m| m.abs() < 1e-15));
        assert!((st.var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_with_identity_stats_shifts_by_beta() {
        let x = Tensor::<f64>::from_f64(&[0.5, -2.0, 3.0, 7.0], &[1, 1, 2, 2]).unwrap();
        let (g, b) = affine(1, 1.0, 5.0);
        let mut st = BnStats::new(1);
        let y = batch_norm(&x, &g, &b, &mut st, false, BN_MOMENTUM, 0.0).unwrap();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert_eq!(*o, i + 5.0);
        }
        assert_eq!(st, BnStats::new(1));
    }

    #[test]
    fn constant_channel_collapses_to_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 4.2);
        let (g, b) = affine(1, 1.7, -0.3);
        let mut st = BnStats::new(1);
        let y = batch_norm(&x, &g, &b, &mut st, true, BN_MOMENTUM, BN_EPSILON).unwrap();
        assert!(y.data().iter().all(|&v| (v + 0.3).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let (g, b) = affine(2, 1.0, 0.0);
        let mut st = BnStats::new(3);
        assert!(batch_norm(&x, &g, &b, &mut st, true, 0.1, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = Tensor::<f64>::from_f64(&[1.0, 2.0, 3.0, 4.0, -5.0, 5.0, 0.0, 0.0], &[2, 4]).unwrap();
        let (g, b) = affine(4, 1.0, 0.0);
        let y = layer_norm(&x, &g, &b, 0.0).unwrap();
        for row in y.data().chunks(4) {
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }
}
