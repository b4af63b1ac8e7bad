//! Kernelized linear attention and the cross-attention aggregator that merges
//! context features with edge features.
//!
//! With the feature map `phi(x) = elu(x) + 1` the attention output for query
//! `i` is `phi(q_i) . (sum_j phi(k_j)^T v_j) / (phi(q_i) . sum_j phi(k_j) + eps)`,
//! so the `L x L` score matrix is never formed.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::{ConvBnRelu, ConvBnReluParams, LayerNorm, Linear, Mode, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const ATTENTION_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub epsilon: f64,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            model_dim,
            heads,
            epsilon: ATTENTION_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.heads > 0 && self.model_dim > 0 && self.model_dim % self.heads == 0,
            "attention: model_dim {} not divisible by {} heads",
            self.model_dim,
            self.heads
        );
        ensure!(self.epsilon > 0.0, "attention: epsilon must be positive");
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            model_dim: 128,
            heads: 4,
            epsilon: ATTENTION_EPSILON,
        }
    }
}

/// A feature map flattened to tokens `(N, H*W, C)`, remembering `H` and `W`.
#[derive(Debug, Clone)]
pub struct SequenceFeature<T: Scalar> {
    pub tokens: Tensor<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> SequenceFeature<T> {
    pub fn flatten(x: &Tensor<T>) -> Result<Self> {
        ensure!(x.dims() == 4, "flatten: expected NCHW, got {:?}", x.shape());
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let tokens = x.reshape(&[n, c, h * w])?.permute(&[0, 2, 1])?;
        Ok(SequenceFeature {
            tokens,
            height: h,
            width: w,
        })
    }

    pub fn unflatten(&self) -> Result<Tensor<T>> {
        let (n, l, c) = (self.tokens.shape()[0], self.tokens.shape()[1], self.tokens.shape()[2]);
        ensure!(
            l == self.height * self.width,
            "unflatten: {l} tokens for a {}x{} map",
            self.height,
            self.width
        );
        self.tokens.permute(&[0, 2, 1])?.reshape(&[n, c, self.height, self.width])
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

fn phi<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.elu().add_scalar(1.0)
}

/// Multi-head linear attention over `(N, heads, L, head_dim)` inputs.
pub fn linear_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, epsilon: f64) -> Result<Tensor<T>> {
    ensure!(
        q.dims() == 4 && k.dims() == 4 && v.dims() == 4,
        "linear_attention: expected rank-4 inputs, got {:?} {:?} {:?}",
        q.shape(),
        k.shape(),
        v.shape()
    );
    let (n, h, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let (lk, dv) = (k.shape()[2], v.shape()[3]);
    ensure!(
        k.shape() == [n, h, lk, d] && v.shape()[..3] == [n, h, lk],
        "linear_attention: incompatible Q {:?}, K {:?}, V {:?}",
        q.shape(),
        k.shape(),
        v.shape()
    );
    let b = n * h;
    let fq = phi(&q.reshape(&[b, lq, d])?);
    let fk = phi(&k.reshape(&[b, lk, d])?);
    let v = v.reshape(&[b, lk, dv])?;
    // (B, d, dv): summed key/value outer products
    let kv = fk.permute(&[0, 2, 1])?.bmm(&v)?;
    let numer = fq.bmm(&kv)?;
    let ksum = fk.sum_axis(1)?.permute(&[0, 2, 1])?;
    let denom = fq.bmm(&ksum)?.add_scalar(epsilon).expand(&[b, lq, dv])?;
    numer.div(&denom)?.reshape(&[n, h, lq, dv])
}

/// Linear-transformer encoder layer: queries from `x`, keys and values from
/// `source`, multi-head linear attention, a merge projection, then a residual
/// two-layer MLP over `[x, message]`. Layer norms sit before the attention
/// projections and before the MLP.
pub struct LtrEncoder {
    pub cfg: AttentionConfig,
    pub norm_attn: LayerNorm,
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub merge: Linear,
    pub norm_mlp: LayerNorm,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

impl LtrEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.model_dim;
        Ok(LtrEncoder {
            cfg,
            norm_attn: LayerNorm::new(vs, &format!("{name}.norm_attn"), c),
            q_proj: Linear::new(vs, &format!("{name}.q_proj"), c, c, true, rng),
            k_proj: Linear::new(vs, &format!("{name}.k_proj"), c, c, true, rng),
            v_proj: Linear::new(vs, &format!("{name}.v_proj"), c, c, true, rng),
            merge: Linear::new(vs, &format!("{name}.merge"), c, c, true, rng),
            norm_mlp: LayerNorm::new(vs, &format!("{name}.norm_mlp"), 2 * c),
            mlp_hidden: Linear::new(vs, &format!("{name}.mlp_hidden"), 2 * c, 2 * c, true, rng),
            mlp_out: Linear::new(vs, &format!("{name}.mlp_out"), 2 * c, c, true, rng),
        })
    }

    fn split_heads<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, l) = (t.shape()[0], t.shape()[1]);
        t.reshape(&[n, l, self.cfg.heads, self.cfg.head_dim()])?.permute(&[0, 2, 1, 3])
    }

    pub fn forward<T: Scalar>(
        &self,
        vs: &ParamStore<T>,
        x: &SequenceFeature<T>,
        source: &SequenceFeature<T>,
    ) -> Result<SequenceFeature<T>> {
        let c = self.cfg.model_dim;
        ensure!(
            x.dim() == c && source.dim() == c,
            "ltr_encoder: model_dim {c} but x has {} and source has {} channels",
            x.dim(),
            source.dim()
        );
        ensure!(
            x.tokens.shape()[0] == source.tokens.shape()[0],
            "ltr_encoder: batch mismatch"
        );
        let (n, l) = (x.tokens.shape()[0], x.len());
        let xn = self.norm_attn.forward(vs, &x.tokens)?;
        let sn = self.norm_attn.forward(vs, &source.tokens)?;
        let q = self.split_heads(&self.q_proj.forward(vs, &xn)?)?;
        let k = self.split_heads(&self.k_proj.forward(vs, &sn)?)?;
        let v = self.split_heads(&self.v_proj.forward(vs, &sn)?)?;
        let message = linear_attention(&q, &k, &v, self.cfg.epsilon)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, l, c])?;
        let message = self.merge.forward(vs, &message)?;
        let joined = self.norm_mlp.forward(vs, &Tensor::concat(&[x.tokens.clone(), message], 2)?)?;
        let update = self.mlp_out.forward(vs, &self.mlp_hidden.forward(vs, &joined)?.relu())?;
        Ok(SequenceFeature {
            tokens: x.tokens.add(&update)?,
            height: x.height,
            width: x.width,
        })
    }
}

/// Bidirectional cross-attention between context features `D5` and edge
/// features `E6`, merged by a 1x1 Conv-BN-ReLU back to `model_dim` channels.
pub struct Trfa {
    pub cfg: AttentionConfig,
    pub context_to_edge: LtrEncoder,
    /// `None` when both directions share `context_to_edge`.
    pub edge_to_context: Option<LtrEncoder>,
    pub merge: ConvBnRelu,
}

impl Trfa {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(vs, name, cfg, false, rng)
    }

    /// Both directions use one encoder; only useful for testing the wiring.
    pub fn new_shared<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(vs, name, cfg, true, rng)
    }

    fn build<T: Scalar, R: Rng + ?Sized>(
        vs: &mut ParamStore<T>,
        name: &str,
        cfg: AttentionConfig,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let context_to_edge = LtrEncoder::new(vs, &format!("{name}.context_to_edge"), cfg, rng)?;
        let edge_to_context = if shared {
            None
        } else {
            Some(LtrEncoder::new(vs, &format!("{name}.edge_to_context"), cfg, rng)?)
        };
        let merge = ConvBnRelu::new(
            vs,
            &format!("{name}.merge"),
            ConvBnReluParams::new(2 * cfg.model_dim, cfg.model_dim, 1),
            rng,
        );
        Ok(Trfa {
            cfg,
            context_to_edge,
            edge_to_context,
            merge,
        })
    }

    /// The two encoder outputs as maps: `(LTR(D5, E6), LTR(E6, D5))`.
    pub fn branch_outputs<T: Scalar>(
        &self,
        vs: &ParamStore<T>,
        d5: &Tensor<T>,
        e6: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        ensure!(
            d5.shape() == e6.shape(),
            "trfa: D5 {:?} and E6 {:?} differ in shape",
            d5.shape(),
            e6.shape()
        );
        ensure!(
            d5.dims() == 4 && d5.shape()[1] == self.cfg.model_dim,
            "trfa: expected {} channels, got {:?}",
            self.cfg.model_dim,
            d5.shape()
        );
        let ds = SequenceFeature::flatten(d5)?;
        let es = SequenceFeature::flatten(e6)?;
        let second = self.edge_to_context.as_ref().unwrap_or(&self.context_to_edge);
        let a = self.context_to_edge.forward(vs, &ds, &es)?.unflatten()?;
        let b = second.forward(vs, &es, &ds)?.unflatten()?;
        Ok((a, b))
    }

    pub fn forward<T: Scalar>(&self, vs: &ParamStore<T>, d5: &Tensor<T>, e6: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (a, b) = self.branch_outputs(vs, d5, e6)?;
        self.merge.forward(vs, &Tensor::concat(&[a, b], 1)?, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(normal(&mut ChaCha8Rng::seed_from_u64(seed), n, 1.0), shape).unwrap()
    }

    #[test]
    fn single_key_returns_its_value() {
        let q = randn(&[1, 2, 5, 3], 1);
        let k = randn(&[1, 2, 1, 3], 2);
        let v = randn(&[1, 2, 1, 3], 3);
        let out = linear_attention(&q, &k, &v, 1e-12).unwrap();
        assert_eq!(out.shape(), &[1, 2, 5, 3]);
        for h in 0..2 {
            for i in 0..5 {
                for c in 0..3 {
                    let got = out.data()[(h * 5 + i) * 3 + c];
                    assert!((got - v.data()[h * 3 + c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = randn(&[1, 1, 4, 2], 4);
        let key = [0.3, -0.7];
        let k = Tensor::from_f64(&key.repeat(6), &[1, 1, 6, 2]).unwrap();
        let v = randn(&[1, 1, 6, 2], 5);
        let out = linear_attention(&q, &k, &v, 1e-12).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..6).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 6.0;
            for i in 0..4 {
                assert!((out.data()[i * 2 + c] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let q = randn(&[1, 2, 4, 3], 1);
        assert!(linear_attention(&q, &randn(&[1, 2, 4, 2], 2), &randn(&[1, 2, 4, 3], 3), 1e-6).is_err());
        assert!(linear_attention(&q, &randn(&[1, 2, 4, 3], 2), &randn(&[1, 2, 5, 3], 3), 1e-6).is_err());
        assert!(AttentionConfig::new(130, 4).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let x = randn(&[2, 3, 4, 5], 9);
        let s = SequenceFeature::flatten(&x).unwrap();
        assert_eq!(s.tokens.shape(), &[2, 20, 3]);
        assert_eq!(s.unflatten().unwrap().data(), x.data());
    }

    #[test]
    fn encoder_with_zero_update_is_identity() {
        let mut vs = ParamStore::<f64>::new();
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let enc = LtrEncoder::new(&mut vs, "enc", cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        vs.fill_where(|n| n.starts_with("enc.mlp_out.") || n.starts_with("enc.merge."), 0.0);
        let x = SequenceFeature::flatten(&randn(&[1, 8, 3, 4], 1)).unwrap();
        let src = SequenceFeature::flatten(&randn(&[1, 8, 2, 5], 2)).unwrap();
        let y = enc.forward(&vs, &x, &src).unwrap();
        assert_eq!(y.tokens.shape(), x.tokens.shape());
        assert_eq!(y.tokens.data(), x.tokens.data());
    }

    #[test]
    fn trfa_shapes_and_swap_symmetry() {
        let mut vs = ParamStore::<f64>::new();
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let trfa = Trfa::new_shared(&mut vs, "trfa", cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (d5, e6) = (randn(&[2, 8, 3, 2], 5), randn(&[2, 8, 3, 2], 6));
        let (a, b) = trfa.branch_outputs(&vs, &d5, &e6).unwrap();
        let (a2, b2) = trfa.branch_outputs(&vs, &e6, &d5).unwrap();
        assert_eq!(a.data(), b2.data());
        assert_eq!(b.data(), a2.data());
        assert_eq!(trfa.forward(&vs, &d5, &e6, Mode::Eval).unwrap().shape(), &[2, 8, 3, 2]);
    }

    #[test]
    fn trfa_default_width() {
        let mut vs = ParamStore::<f32>::new();
        let trfa = Trfa::new(&mut vs, "trfa", AttentionConfig::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::full(&[1, 128, 15, 20], 0.25);
        let y = trfa.forward(&vs, &x, &x.mul_scalar(-1.0), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 128, 15, 20]);
    }

    #[test]
    fn zero_edge_features_stay_finite() {
        let mut vs = ParamStore::<f64>::new();
        let cfg = AttentionConfig::new(8, 2).unwrap();
        let trfa = Trfa::new(&mut vs, "trfa", cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let y = trfa
            .forward(&vs, &randn(&[1, 8, 2, 2], 7), &Tensor::zeros(&[1, 8, 2, 2]), Mode::Eval)
            .unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }
}
