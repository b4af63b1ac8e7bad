use rand::Rng;

use super::{Conv2d, ConvBnRelu, ConvBnReluParams, Mode, ParamStore};
use crate::error::{ensure, Result};
use crate::tensor::{upsample2, ConvOptions, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IrbConfig {
    pub in_ch: usize,
    pub out_ch: usize,
    pub expansion: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl IrbConfig {
    pub fn hidden(&self) -> usize {
        self.expansion * self.in_ch
    }

    pub fn has_shortcut(&self) -> bool {
        self.stride == 1 && self.in_ch == self.out_ch
    }
}

/// 1x1 expand -> 3x3 depthwise -> 1x1 linear projection, with an identity
/// shortcut when stride is 1 and widths agree. The expand layer is omitted for
/// expansion 1, as in MobileNetV2.
pub struct InvertedResidual {
    pub cfg: IrbConfig,
    pub expand: Option<ConvBnRelu>,
    pub depthwise: ConvBnRelu,
    pub project: ConvBnRelu,
}

impl InvertedResidual {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vs: &mut ParamStore<T>, name: &str, cfg: IrbConfig, rng: &mut R) -> Self {
        let hidden = cfg.hidden();
        let expand = (cfg.expansion != 1).then(|| {
            ConvBnRelu::new(vs, &format!("{name}.expand"), ConvBnReluParams::new(cfg.in_ch, hidden, 1), rng)
        });
        let depthwise = ConvBnRelu::new(
            vs,
            &format!("{name}.depthwise"),
            ConvBnReluParams::new(hidden, hidden, 3)
                .stride(cfg.stride)
                .dilation(cfg.dilation)
                .groups(hidden),
            rng,
        );
        let project = ConvBnRelu::new(
            vs,
            &format!("{name}.project"),
            ConvBnReluParams::new(hidden, cfg.out_ch, 1).linear(),
            rng,
        );
        InvertedResidual {
            cfg,
            expand,
            depthwise,
            project,
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ensure!(
            x.dims() == 4 && x.shape()[1] == self.cfg.in_ch,
            "inverted_residual: expected {} input channels, got shape {:?}",
            self.cfg.in_ch,
            x.shape()
        );
        let h = match &self.expand {
            Some(e) => e.forward(vs, x, mode)?,
            None => x.clone(),
        };
        let h = self.depthwise.forward(vs, &h, mode)?;
        let h = self.project.forward(vs, &h, mode)?;
        if self.cfg.has_shortcut() {
            x.add(&h)
        } else {
            Ok(h)
        }
    }
}

/// Channel-attention fusion of a backbone feature `D` with an edge feature `E`
/// of the same shape.
pub struct Caff {
    pub channels: usize,
    pub reduce: ConvBnRelu,
    pub squeeze: Conv2d,
    pub excite: Conv2d,
    pub fuse: ConvBnRelu,
}

/// Width reduction between the two attention convolutions.
pub const CAFF_REDUCTION: usize = 4;

impl Caff {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vs: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let mid = (channels / CAFF_REDUCTION).max(1);
        Caff {
            channels,
            reduce: ConvBnRelu::new(vs, &format!("{name}.reduce"), ConvBnReluParams::new(2 * channels, channels, 1), rng),
            squeeze: Conv2d::new(vs, &format!("{name}.squeeze"), channels, mid, 1, ConvOptions::default(), true, rng),
            excite: Conv2d::new(vs, &format!("{name}.excite"), mid, channels, 1, ConvOptions::default(), true, rng),
            fuse: ConvBnRelu::new(vs, &format!("{name}.fuse"), ConvBnReluParams::new(channels, channels, 3), rng),
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, d: &Tensor<T>, e: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(vs, d, e, mode)?.0)
    }

    /// Returns the fused map together with the (N, C, 1, 1) attention vector.
    pub fn forward_with_attention<T: Scalar>(
        &self,
        vs: &ParamStore<T>,
        d: &Tensor<T>,
        e: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        ensure!(
            d.shape() == e.shape(),
            "caff: D {:?} and E {:?} differ in shape",
            d.shape(),
            e.shape()
        );
        ensure!(
            d.dims() == 4 && d.shape()[1] == self.channels,
            "caff: expected {} channels, got {:?}",
            self.channels,
            d.shape()
        );
        let z = self.reduce.forward(vs, &Tensor::concat(&[d.clone(), e.clone()], 1)?, mode)?;
        let a = self
            .excite
            .forward(vs, &self.squeeze.forward(vs, &z.global_avg_pool()?)?.relu())?
            .sigmoid();
        let a_full = a.expand(d.shape())?;
        let fused = a_full.mul(d)?.add(&a_full.mul(e)?)?;
        Ok((self.fuse.forward(vs, &fused, mode)?, a))
    }
}

/// Two 3x3 Conv-BN-ReLU layers (stride 2 then 1) turning the 2-channel
/// image gradients into half-resolution edge features.
pub struct EdgeCompact {
    pub down: ConvBnRelu,
    pub refine: ConvBnRelu,
}

impl EdgeCompact {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vs: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        EdgeCompact {
            down: ConvBnRelu::new(vs, &format!("{name}.down"), ConvBnReluParams::new(2, width, 3).stride(2), rng),
            refine: ConvBnRelu::new(vs, &format!("{name}.refine"), ConvBnReluParams::new(width, width, 3), rng),
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, g: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ensure!(
            g.dims() == 4 && g.shape()[1] == 2,
            "edge_compact: expected (N,2,H,W) gradients, got {:?}",
            g.shape()
        );
        let (h, w) = (g.shape()[2], g.shape()[3]);
        ensure!(h % 2 == 0 && w % 2 == 0, "edge_compact: odd extents {h}x{w}");
        self.refine.forward(vs, &self.down.forward(vs, g, mode)?, mode)
    }
}

/// Conv-BN-ReLU followed by a bare 3x3 convolution to one logit channel.
pub struct EdgeHead {
    pub hidden: ConvBnRelu,
    pub out: Conv2d,
}

impl EdgeHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(vs: &mut ParamStore<T>, name: &str, width: usize, rng: &mut R) -> Self {
        EdgeHead {
            hidden: ConvBnRelu::new(vs, &format!("{name}.hidden"), ConvBnReluParams::new(width, width, 3), rng),
            out: Conv2d::new(vs, &format!("{name}.out"), width, 1, 3, ConvOptions::default().padding(1), true, rng),
        }
    }

    /// Edge logits, (N, 1, h, w).
    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, fc: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.out.forward(vs, &self.hidden.forward(vs, fc, mode)?)
    }

    pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
        logits.sigmoid()
    }
}

/// Concatenates skips onto the input, applies a 3x3 Conv-BN-ReLU and
/// upsamples x2.
pub struct DecoderBlock {
    pub conv: ConvBnRelu,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        DecoderBlock {
            conv: ConvBnRelu::new(vs, &format!("{name}.conv"), ConvBnReluParams::new(in_ch, out_ch, 3), rng),
        }
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, x: &Tensor<T>, skips: &[Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        ensure!(x.dims() == 4, "decoder_block: expected NCHW, got {:?}", x.shape());
        let mut parts = vec![x.clone()];
        for s in skips {
            ensure!(
                s.dims() == 4 && s.shape()[0] == x.shape()[0] && s.shape()[2..] == x.shape()[2..],
                "decoder_block: skip {:?} does not match input {:?}",
                s.shape(),
                x.shape()
            );
            parts.push(s.clone());
        }
        let joined = if parts.len() == 1 { x.clone() } else { Tensor::concat(&parts, 1)? };
        upsample2(&self.conv.forward(vs, &joined, mode)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(normal(&mut ChaCha8Rng::seed_from_u64(seed), n, 1.0), shape).unwrap()
    }

    #[test]
    fn dilated_irb_shape_and_width() {
        let mut vs = ParamStore::<f32>::new();
        let cfg = IrbConfig { in_ch: 32, out_ch: 32, expansion: 4, stride: 1, dilation: 3 };
        let irb = InvertedResidual::new(&mut vs, "irb", cfg, &mut rng());
        assert_eq!(cfg.hidden(), 128);
        assert_eq!(vs.get(irb.depthwise.conv.weight).shape(), &[128, 1, 3, 3]);
        let y = irb.forward(&vs, &Tensor::ones(&[1, 32, 20, 15]), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 32, 20, 15]);
    }

    #[test]
    fn zero_projection_gives_identity() {
        let mut vs = ParamStore::<f64>::new();
        let cfg = IrbConfig { in_ch: 8, out_ch: 8, expansion: 4, stride: 1, dilation: 2 };
        let irb = InvertedResidual::new(&mut vs, "irb", cfg, &mut rng());
        vs.fill_where(|n| n == "irb.project.conv.weight", 0.0);
        let x = randn(&[2, 8, 6, 5], 1);
        for mode in [Mode::Eval, Mode::Train] {
            let y = irb.forward(&vs, &x, mode).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn strided_irb_has_no_shortcut() {
        let mut vs = ParamStore::<f64>::new();
        let cfg = IrbConfig { in_ch: 8, out_ch: 8, expansion: 2, stride: 2, dilation: 1 };
        assert!(!cfg.has_shortcut());
        let irb = InvertedResidual::new(&mut vs, "irb", cfg, &mut rng());
        vs.fill_where(|n| n.ends_with("project.conv.weight"), 0.0);
        let x = randn(&[1, 8, 8, 6], 2);
        let y = irb.forward(&vs, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 8, 4, 3]);
        // with the projection zeroed and no shortcut the input does not leak through
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(irb.forward(&vs, &randn(&[1, 4, 8, 6], 3), Mode::Eval).is_err());
    }

    #[test]
    fn caff_saturated_attention_sums_inputs() {
        let mut vs = ParamStore::<f64>::new();
        let caff = Caff::new(&mut vs, "caff", 8, &mut rng());
        vs.fill_where(|n| n == "caff.excite.weight", 0.0);
        vs.fill_where(|n| n == "caff.excite.bias", 1e3);
        let (d, e) = (randn(&[1, 8, 5, 4], 4), randn(&[1, 8, 5, 4], 5));
        let (out, att) = caff.forward_with_attention(&vs, &d, &e, Mode::Eval).unwrap();
        assert_eq!(att.shape(), &[1, 8, 1, 1]);
        assert!(att.data().iter().all(|&a| a == 1.0));
        let direct = caff.fuse.forward(&vs, &d.add(&e).unwrap(), Mode::Eval).unwrap();
        assert_eq!(out.data(), direct.data());
    }

    #[test]
    fn caff_zero_inputs_give_zero() {
        let mut vs = ParamStore::<f64>::new();
        let caff = Caff::new(&mut vs, "caff", 4, &mut rng());
        let z = Tensor::zeros(&[2, 4, 3, 3]);
        let y = caff.forward(&vs, &z, &z, Mode::Eval).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn caff_shapes_and_mismatch() {
        let mut vs = ParamStore::<f32>::new();
        let caff = Caff::new(&mut vs, "caff", 32, &mut rng());
        let x = Tensor::full(&[1, 32, 120, 160], 0.1);
        let (y, a) = caff.forward_with_attention(&vs, &x, &x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 32, 120, 160]);
        assert_eq!(a.numel(), 32);
        assert!(caff.forward(&vs, &x, &Tensor::zeros(&[1, 32, 60, 80]), Mode::Eval).is_err());
    }

    #[test]
    fn caff_is_not_symmetric_in_its_inputs() {
        let mut vs = ParamStore::<f64>::new();
        let caff = Caff::new(&mut vs, "caff", 4, &mut rng());
        // keep the single bottleneck unit active so the gate depends on its input
        vs.fill_where(|n| n == "caff.squeeze.bias", 3.0);
        let (d, e) = (randn(&[1, 4, 3, 3], 6), randn(&[1, 4, 3, 3], 7));
        let de = caff.forward(&vs, &d, &e, Mode::Eval).unwrap();
        let ed = caff.forward(&vs, &e, &d, Mode::Eval).unwrap();
        let gap = de.data().iter().zip(ed.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap > 1e-6, "swap changed nothing");

        // swapping the input-channel halves of the 1x1 reduce weight restores symmetry
        let w = vs.get(caff.reduce.conv.weight).to_vec();
        let mut swapped = w.clone();
        for o in 0..4 {
            for c in 0..4 {
                swapped[o * 8 + c] = w[o * 8 + 4 + c];
                swapped[o * 8 + 4 + c] = w[o * 8 + c];
            }
        }
        vs.set(caff.reduce.conv.weight, swapped).unwrap();
        let ed_swapped = caff.forward(&vs, &e, &d, Mode::Eval).unwrap();
        for (a, b) in de.data().iter().zip(ed_swapped.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_compact_halves_resolution() {
        let mut vs = ParamStore::<f32>::new();
        let ec = EdgeCompact::new(&mut vs, "ec", 32, &mut rng());
        let y = ec.forward(&vs, &Tensor::ones(&[1, 2, 48, 64]), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 32, 24, 32]);
        let z = ec.forward(&vs, &Tensor::zeros(&[1, 2, 10, 6]), Mode::Eval).unwrap();
        assert_eq!(z.shape(), &[1, 32, 5, 3]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(ec.forward(&vs, &Tensor::zeros(&[1, 2, 9, 6]), Mode::Eval).is_err());
    }

    #[test]
    fn edge_head_logits_and_probabilities() {
        let mut vs = ParamStore::<f64>::new();
        let head = EdgeHead::new(&mut vs, "head", 6, &mut rng());
        let x = randn(&[2, 6, 8, 10], 8).relu();
        let logits = head.forward(&vs, &x, Mode::Eval).unwrap();
        assert_eq!(logits.shape(), &[2, 1, 8, 10]);
        let p = EdgeHead::probabilities(&logits);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        vs.fill_where(|n| n.starts_with("head.out."), 0.0);
        let logits = head.forward(&vs, &x, Mode::Eval).unwrap();
        assert!(EdgeHead::probabilities(&logits).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoder_block_shapes() {
        let mut vs = ParamStore::<f32>::new();
        let blk = DecoderBlock::new(&mut vs, "dec", 64 + 32, 64, &mut rng());
        let y = blk
            .forward(&vs, &Tensor::ones(&[1, 64, 40, 30]), &[Tensor::ones(&[1, 32, 40, 30])], Mode::Eval)
            .unwrap();
        assert_eq!(y.shape(), &[1, 64, 80, 60]);
        assert!(blk
            .forward(&vs, &Tensor::ones(&[1, 64, 40, 30]), &[Tensor::ones(&[1, 32, 20, 15])], Mode::Eval)
            .is_err());
    }

    #[test]
    fn decoder_block_without_skips_and_constant_input() {
        let mut vs = ParamStore::<f64>::new();
        let blk = DecoderBlock::new(&mut vs, "dec", 3, 2, &mut rng());
        // 1x1-equivalent kernel: only the centre tap is non-zero
        let mut w = vec![0.0; 2 * 3 * 9];
        for o in 0..2 {
            for c in 0..3 {
                w[(o * 3 + c) * 9 + 4] = 0.5;
            }
        }
        vs.set(blk.conv.conv.weight, w).unwrap();
        let y = blk.forward(&vs, &Tensor::full(&[1, 3, 4, 5], 2.0), &[], Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 10]);
        let expected = 3.0 / (1.0 + crate::tensor::BN_EPSILON).sqrt();
        assert!(y.data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }
}
