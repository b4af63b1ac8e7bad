use std::sync::Mutex;

use rand::Rng;

use super::{kaiming_normal, normal, Mode, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{self, batch_norm, layer_norm, BnStats, ConvOptions, Scalar, Tensor};

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOptions,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        opts: ConvOptions,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let per_group = in_ch / opts.groups;
        let fan_in = per_group * kernel * kernel;
        let weight = vs.add_trainable(
            &format!("{name}.weight"),
            kaiming_normal(rng, out_ch * fan_in, fan_in),
            &[out_ch, per_group, kernel, kernel],
        );
        let bias = bias.then(|| vs.add_trainable(&format!("{name}.bias"), vec![T::zero(); out_ch], &[out_ch]));
        Conv2d {
            weight,
            bias,
            opts,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let bias = self.bias.map(|b| vs.get(b));
        tensor::conv2d(x, &vs.get(self.weight), bias.as_ref(), self.opts)
    }
}

/// Batch norm whose affine parameters and running statistics live in the store.
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
    // serializes read-modify-write of the running statistics
    update: Mutex<()>,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(vs: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: vs.add_trainable(&format!("{name}.gamma"), vec![T::one(); channels], &[channels]),
            beta: vs.add_trainable(&format!("{name}.beta"), vec![T::zero(); channels], &[channels]),
            running_mean: vs.add_buffer(&format!("{name}.running_mean"), vec![T::zero(); channels], &[channels]),
            running_var: vs.add_buffer(&format!("{name}.running_var"), vec![T::one(); channels], &[channels]),
            momentum: tensor::BN_MOMENTUM,
            eps: tensor::BN_EPSILON,
            update: Mutex::new(()),
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let _guard = self.update.lock().expect("bn lock");
        let mut stats = BnStats {
            mean: vs.get(self.running_mean).to_vec(),
            var: vs.get(self.running_var).to_vec(),
        };
        let y = batch_norm(
            x,
            &vs.get(self.gamma),
            &vs.get(self.beta),
            &mut stats,
            mode.is_train(),
            self.momentum,
            self.eps,
        )?;
        if mode.is_train() {
            vs.set(self.running_mean, stats.mean)?;
            vs.set(self.running_var, stats.var)?;
        }
        Ok(y)
    }
}

/// Shape and behaviour of a convolution + batch-norm (+ ReLU) unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBnReluParams {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub relu: bool,
}

impl ConvBnReluParams {
    /// Shape-preserving (at stride 1) unit with `padding = dilation * (k - 1) / 2`.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvBnReluParams {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            dilation: 1,
            groups: 1,
            relu: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self.padding = d * (self.kernel - 1) / 2;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Drop the trailing ReLU.
    pub fn linear(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn conv_options(&self) -> ConvOptions {
        ConvOptions {
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            groups: self.groups,
        }
    }
}

pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub cfg: ConvBnReluParams,
}

impl ConvBnRelu {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        cfg: ConvBnReluParams,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(
                vs,
                &format!("{name}.conv"),
                cfg.in_ch,
                cfg.out_ch,
                cfg.kernel,
                cfg.conv_options(),
                false,
                rng,
            ),
            bn: BatchNorm2d::new(vs, &format!("{name}.bn"), cfg.out_ch),
            cfg,
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.bn.forward(vs, &self.conv.forward(vs, x)?, mode)?;
        Ok(if self.cfg.relu { y.relu() } else { y })
    }
}

/// Affine map over the last axis: `x @ W^T + b`, `W` of shape (out, in).
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_dim.max(1) as f64).sqrt();
        Linear {
            weight: vs.add_trainable(
                &format!("{name}.weight"),
                normal(rng, out_dim * in_dim, std),
                &[out_dim, in_dim],
            ),
            bias: bias.then(|| vs.add_trainable(&format!("{name}.bias"), vec![T::zero(); out_dim], &[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        crate::error::ensure!(
            shape.last() == Some(&self.in_dim),
            "linear: expected last axis {}, got shape {:?}",
            self.in_dim,
            shape
        );
        let rows = x.numel() / self.in_dim;
        let y = x.reshape(&[rows, self.in_dim])?.matmul_t(&vs.get(self.weight))?;
        let y = match self.bias {
            Some(b) => y.add(&vs.get(b).reshape(&[1, self.out_dim])?.expand(&[rows, self.out_dim])?)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.out_dim;
        y.reshape(&out_shape)
    }
}

pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(vs: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: vs.add_trainable(&format!("{name}.gamma"), vec![T::one(); dim], &[dim]),
            beta: vs.add_trainable(&format!("{name}.beta"), vec![T::zero(); dim], &[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, &vs.get(self.gamma), &vs.get(self.beta), self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_bn_relu_is_nonnegative_and_strides() {
        let mut vs = ParamStore::<f64>::new();
        let cbr = ConvBnRelu::new(&mut vs, "l", ConvBnReluParams::new(3, 5, 3).stride(2), &mut rng());
        let x = Tensor::from_vec(normal(&mut rng(), 2 * 3 * 64 * 48, 1.0), &[2, 3, 64, 48]).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = cbr.forward(&vs, &x, mode).unwrap();
            assert_eq!(y.shape(), &[2, 5, 32, 24]);
            assert!(y.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn identity_unit_reduces_to_relu() {
        let mut vs = ParamStore::<f64>::new();
        let cbr = ConvBnRelu::new(&mut vs, "l", ConvBnReluParams::new(2, 2, 1), &mut rng());
        vs.set(cbr.conv.weight, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_f64(&[-1.0, 2.0, 0.5, -0.25, 3.0, -4.0, 0.0, 1.0], &[1, 2, 2, 2]).unwrap();
        let y = cbr.forward(&vs, &x, Mode::Eval).unwrap();
        let k = 1.0 / (1.0 + tensor::BN_EPSILON).sqrt();
        for (o, i) in y.data().iter().zip(x.data()) {
            assert!((o - i.max(0.0) * k).abs() < 1e-15);
        }
    }

    #[test]
    fn train_mode_updates_running_stats_only() {
        let mut vs = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut vs, "bn", 1);
        let x = Tensor::from_f64(&[1.0, 3.0, 5.0, 7.0], &[1, 1, 2, 2]).unwrap();
        bn.forward(&vs, &x, Mode::Eval).unwrap();
        assert_eq!(vs.get(bn.running_mean).data(), &[0.0]);
        bn.forward(&vs, &x, Mode::Train).unwrap();
        assert!((vs.get(bn.running_mean).data()[0] - 0.4).abs() < 1e-12);
        assert_eq!(vs.get(bn.gamma).data(), &[1.0]);
    }

    #[test]
    fn shape_preserving_padding_rule() {
        for d in [1, 2, 3] {
            let p = ConvBnReluParams::new(4, 4, 3).dilation(d);
            assert_eq!(p.padding, d);
            let mut vs = ParamStore::<f64>::new();
            let l = ConvBnRelu::new(&mut vs, "l", p, &mut rng());
            let y = l.forward(&vs, &Tensor::ones(&[1, 4, 7, 9]), Mode::Eval).unwrap();
            assert_eq!(y.shape(), &[1, 4, 7, 9]);
        }
    }

    #[test]
    fn linear_over_last_axis() {
        let mut vs = ParamStore::<f64>::new();
        let l = Linear::new(&mut vs, "fc", 3, 2, true, &mut rng());
        vs.set(l.weight, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        vs.set(l.bias.unwrap(), vec![0.5, -0.5]).unwrap();
        let x = Tensor::from_f64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 2, 3]).unwrap();
        let y = l.forward(&vs, &x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[1.5, 4.5, 4.5, 10.5]);
    }
}
