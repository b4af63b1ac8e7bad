//! Named finite-difference gradient checks over every differentiable op,
//! composite block, the whole network and the training loss.
//!
//! Each case draws random shapes and values from its instance seed, reduces
//! the output to a scalar with fixed random weights, and compares analytic
//! against central-difference gradients in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{linear_attention, AttentionConfig, LtrEncoder, SequenceFeature, Trfa};
use crate::error::Result;
use crate::model::{EgdNet, ModelConfig};
use crate::nn::{
    normal, BatchNorm2d, Caff, Conv2d, ConvBnRelu, ConvBnReluParams, DecoderBlock, EdgeCompact, EdgeHead,
    InvertedResidual, IrbConfig, LayerNorm, Linear, Mode, ParamId, ParamStore,
};
use crate::tensor::{
    batch_norm, bilinear_resize, conv2d_with, grad_check, layer_norm, upsample2, BnStats, ConvAlgo, ConvOptions,
    GradCheckOptions, GradCheckReport, Tensor, BN_EPSILON, BN_MOMENTUM,
};
use crate::train::{depth_loss, edge_loss, total_loss, LossWeights};

/// Tolerance for single ops and blocks.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance for the whole network.
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Relative-error denominator floor. Central differences in 64-bit carry
/// roughly `|f| * 1e-16 / eps` of roundoff, so gradients below this are
/// held to `tol * DENOMINATOR_FLOOR` absolute instead.
pub const DENOMINATOR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseKind {
    Op,
    Block,
    Model,
}

type Runner = fn(u64) -> Result<GradCheckReport>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub kind: CaseKind,
    run: Runner,
}

impl GradCase {
    pub fn tolerance(&self) -> f64 {
        match self.kind {
            CaseKind::Model => MODEL_TOLERANCE,
            _ => OP_TOLERANCE,
        }
    }

    /// One random instance.
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }

    /// `instances` random instances; the summary keeps the worst error.
    pub fn run_many(&self, instances: usize, base_seed: u64) -> Result<CaseSummary> {
        let mut worst = 0.0f64;
        let mut skipped = 0;
        let mut failures = Vec::new();
        for i in 0..instances {
            let r = self.run(base_seed.wrapping_add(i as u64))?;
            if !r.pass {
                failures.push(r.to_string());
            }
            worst = worst.max(r.max_rel_error);
            skipped += r.skipped;
        }
        Ok(CaseSummary {
            name: self.name,
            kind: self.kind,
            instances,
            max_rel_error: worst,
            tolerance: self.tolerance(),
            skipped,
            pass: failures.is_empty(),
            failures,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CaseSummary {
    pub name: &'static str,
    pub kind: CaseKind,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Coordinates skipped as non-smooth, over all instances.
    pub skipped: usize,
    pub pass: bool,
    pub failures: Vec<String>,
}

impl std::fmt::Display for CaseSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {} x{:<3} max_rel_error={:.3e} (tol {:.0e})",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.instances,
            self.max_rel_error,
            self.tolerance
        )?;
        if self.skipped > 0 {
            write!(f, " [{} non-smooth skipped]", self.skipped)?;
        }
        Ok(())
    }
}

macro_rules! case {
    ($name:literal, $kind:ident, $f:expr) => {
        GradCase {
            name: $name,
            kind: CaseKind::$kind,
            run: $f,
        }
    };
}

pub fn cases() -> Vec<GradCase> {
    vec![
        case!("add", Op, |s| binary(s, "add", |a, b| a.add(b))),
        case!("sub", Op, |s| binary(s, "sub", |a, b| a.sub(b))),
        case!("mul", Op, |s| binary(s, "mul", |a, b| a.mul(b))),
        case!("div", Op, div_case),
        case!("neg", Op, |s| unary(s, "neg", 0.0, |x| Ok(x.neg()))),
        case!("add_scalar", Op, |s| unary(s, "add_scalar", 0.0, |x| Ok(x.add_scalar(0.7)))),
        case!("mul_scalar", Op, |s| unary(s, "mul_scalar", 0.0, |x| Ok(x.mul_scalar(-1.3)))),
        case!("relu", Op, |s| unary(s, "relu", 0.05, |x| Ok(x.relu()))),
        case!("sigmoid", Op, |s| unary(s, "sigmoid", 0.0, |x| Ok(x.sigmoid()))),
        case!("elu", Op, |s| unary(s, "elu", 0.05, |x| Ok(x.elu()))),
        case!("softplus", Op, |s| unary(s, "softplus", 0.0, |x| Ok(x.softplus()))),
        case!("abs", Op, |s| unary(s, "abs", 0.05, |x| Ok(x.abs()))),
        case!("square", Op, |s| unary(s, "square", 0.0, |x| Ok(x.square()))),
        case!("clamp", Op, clamp_case),
        case!("sum", Op, |s| unary(s, "sum", 0.0, |x| Ok(x.sum()))),
        case!("mean", Op, |s| unary(s, "mean", 0.0, |x| Ok(x.mean()))),
        case!("sum_axis", Op, sum_axis_case),
        case!("global_avg_pool", Op, |s| unary4(s, "global_avg_pool", |x| x.global_avg_pool())),
        case!("reshape", Op, |s| unary4(s, "reshape", |x| x.reshape(&[x.numel()]))),
        case!("permute", Op, |s| unary4(s, "permute", |x| x.permute(&[2, 0, 3, 1]))),
        case!("expand", Op, expand_case),
        case!("narrow", Op, |s| unary4(s, "narrow", |x| x.narrow(3, 1, x.shape()[3] - 1))),
        case!("split", Op, split_case),
        case!("concat", Op, concat_case),
        case!("matmul", Op, matmul_case),
        case!("matmul_t", Op, matmul_t_case),
        case!("bmm", Op, bmm_case),
        case!("conv2d", Op, |s| conv_case(s, ConvAlgo::Im2col)),
        case!("conv2d_naive", Op, |s| conv_case(s, ConvAlgo::Naive)),
        case!("batch_norm_train", Op, |s| bn_case(s, true)),
        case!("batch_norm_eval", Op, |s| bn_case(s, false)),
        case!("layer_norm", Op, layer_norm_case),
        case!("bilinear_resize", Op, resize_case),
        case!("upsample2", Op, |s| unary4(s, "upsample2", upsample2)),
        case!("linear_attention", Op, attention_case),
        case!("depth_loss", Op, depth_loss_case),
        case!("edge_loss", Op, edge_loss_case),
        case!("total_loss", Op, total_loss_case),
        case!("conv2d_layer", Block, conv_layer_case),
        case!("batch_norm2d", Block, bn_layer_case),
        case!("conv_bn_relu", Block, conv_bn_relu_case),
        case!("linear", Block, linear_case),
        case!("layer_norm_layer", Block, layer_norm_layer_case),
        case!("irb", Block, irb_case),
        case!("caff", Block, caff_case),
        case!("edge_compact", Block, edge_compact_case),
        case!("edge_head", Block, edge_head_case),
        case!("decoder_block", Block, decoder_block_case),
        case!("ltr_encoder", Block, ltr_case),
        case!("trfa", Block, trfa_case),
        case!("egdnet", Model, model_case),
    ]
}

pub fn find(name: &str) -> Option<GradCase> {
    cases().into_iter().find(|c| c.name == name)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_vec(normal(r, shape.iter().product(), 1.0), shape).expect("shape")
}

/// Normal values pushed at least `gap` away from 0 (for kinks).
fn randn_away(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let v: Vec<f64> = normal::<f64, _>(r, shape.iter().product(), 1.0)
        .into_iter()
        .map(|x| if x.abs() < gap { x.signum() * gap + x } else { x })
        .collect();
    Tensor::from_vec(v, shape).expect("shape")
}

fn small_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(1..=2), r.random_range(1..=3), r.random_range(2..=4), r.random_range(2..=4)]
}

/// Step 1e-5: at 1e-6 roundoff alone reaches ~2e-5 relative on the
/// normalization ops over a few hundred instances.
fn opts(seed: u64, tol: f64) -> GradCheckOptions {
    GradCheckOptions {
        epsilon: 1e-5,
        tol,
        seed,
        denominator_floor: DENOMINATOR_FLOOR,
        ..GradCheckOptions::default()
    }
}

/// `sum(out * w)` with weights fixed per instance.
fn project(out: &Tensor<f64>, w: &mut Option<Tensor<f64>>, seed: u64) -> Result<Tensor<f64>> {
    if w.as_ref().is_none_or(|w| w.shape() != out.shape()) {
        *w = Some(randn(&mut rng(seed ^ 0x5eed), out.shape()));
    }
    Ok(out.mul(w.as_ref().unwrap())?.sum())
}

fn check(
    name: &str,
    seed: u64,
    tol: f64,
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let w = std::sync::Mutex::new(None);
    grad_check(
        name,
        |x| {
            let out = f(x)?;
            if out.numel() == 1 && out.dims() == 0 {
                return Ok(out);
            }
            project(&out, &mut w.lock().expect("weights"), seed)
        },
        inputs,
        opts(seed, tol),
    )
}

fn unary(
    seed: u64,
    name: &str,
    gap: f64,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r);
    let x = randn_away(&mut r, &shape, gap);
    check(name, seed, OP_TOLERANCE, &[x], |v| f(&v[0]))
}

fn unary4(seed: u64, name: &str, f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>) -> Result<GradCheckReport> {
    unary(seed, name, 0.0, f)
}

fn binary(
    seed: u64,
    name: &str,
    f: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r);
    let (a, b) = (randn(&mut r, &shape), randn(&mut r, &shape));
    check(name, seed, OP_TOLERANCE, &[a, b], |v| f(&v[0], &v[1]))
}

fn div_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r);
    let a = randn(&mut r, &shape);
    let b = randn_away(&mut r, &shape, 0.5);
    check("div", seed, OP_TOLERANCE, &[a, b], |v| v[0].div(&v[1]))
}

fn clamp_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r);
    // Keep values clear of both bounds.
    let x: Vec<f64> = normal::<f64, _>(&mut r, shape.iter().product(), 1.0)
        .into_iter()
        .map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.3 } else { v })
        .collect();
    let x = Tensor::from_vec(x, &shape)?;
    check("clamp", seed, OP_TOLERANCE, &[x], |v| Ok(v[0].clamp(-0.5, 0.5)))
}

fn sum_axis_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = small_shape(&mut r);
    let axis = r.random_range(0..4);
    let x = randn(&mut r, &shape);
    check("sum_axis", seed, OP_TOLERANCE, &[x], move |v| v[0].sum_axis(axis))
}

fn expand_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = randn(&mut r, &[2, 1, 3, 1]);
    check("expand", seed, OP_TOLERANCE, &[x], |v| v[0].expand(&[2, 4, 3, 2]))
}

fn split_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let x = randn(&mut r, &[2, 5, 3]);
    check("split", seed, OP_TOLERANCE, &[x], |v| {
        let parts = v[0].split(1, &[2, 3])?;
        parts[0].sum().mul_scalar(0.3).add(&parts[1].square().sum())
    })
}

fn concat_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let a = randn(&mut r, &[2, 1, 3, 2]);
    let b = randn(&mut r, &[2, 3, 3, 2]);
    check("concat", seed, OP_TOLERANCE, &[a, b], |v| Tensor::concat(&[v[0].clone(), v[1].clone()], 1))
}

fn matmul_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let a = randn(&mut r, &[m, k]);
    let b = randn(&mut r, &[k, n]);
    check("matmul", seed, OP_TOLERANCE, &[a, b], |v| v[0].matmul(&v[1]))
}

fn matmul_t_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let a = randn(&mut r, &[m, k]);
    let w = randn(&mut r, &[n, k]);
    check("matmul_t", seed, OP_TOLERANCE, &[a, w], |v| v[0].matmul_t(&v[1]))
}

fn bmm_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (b, m, k, n) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    let x = randn(&mut r, &[b, m, k]);
    let y = randn(&mut r, &[b, k, n]);
    check("bmm", seed, OP_TOLERANCE, &[x, y], |v| v[0].bmm(&v[1]))
}

fn conv_case(seed: u64, algo: ConvAlgo) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let depthwise = r.random_bool(0.5);
    let c_in = r.random_range(1..=3);
    let (c_out, groups) = if depthwise { (c_in, c_in) } else { (r.random_range(1..=3), 1) };
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..=2);
    let dilation = r.random_range(1..=2);
    let o = ConvOptions::default()
        .stride(stride)
        .dilation(dilation)
        .padding(dilation * (k - 1) / 2)
        .groups(groups);
    let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
    let n = r.random_range(1..=2);
    let x = randn(&mut r, &[n, c_in, h, w]);
    let wt = randn(&mut r, &[c_out, c_in / groups, k, k]);
    let b = randn(&mut r, &[c_out]);
    let name = if algo == ConvAlgo::Naive { "conv2d_naive" } else { "conv2d" };
    check(name, seed, OP_TOLERANCE, &[x, wt, b], move |v| conv2d_with(&v[0], &v[1], Some(&v[2]), o, algo))
}

fn bn_case(seed: u64, training: bool) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, c) = (r.random_range(2..=3), r.random_range(1..=3));
    let x = randn(&mut r, &[n, c, 3, 3]);
    let g = randn(&mut r, &[c]);
    let b = randn(&mut r, &[c]);
    let mean: Vec<f64> = normal(&mut r, c, 0.5);
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
    let name = if training { "batch_norm_train" } else { "batch_norm_eval" };
    check(name, seed, OP_TOLERANCE, &[x, g, b], move |v| {
        let mut stats = BnStats {
            mean: mean.clone(),
            var: var.clone(),
        };
        batch_norm(&v[0], &v[1], &v[2], &mut stats, training, BN_MOMENTUM, BN_EPSILON)
    })
}

fn layer_norm_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let d = r.random_range(2..=6);
    let x = randn(&mut r, &[2, 3, d]);
    let g = randn(&mut r, &[d]);
    let b = randn(&mut r, &[d]);
    check("layer_norm", seed, OP_TOLERANCE, &[x, g, b], |v| layer_norm(&v[0], &v[1], &v[2], 1e-5))
}

fn resize_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (h, w) = (r.random_range(2..=5), r.random_range(2..=5));
    let x = randn(&mut r, &[1, 2, h, w]);
    let (oh, ow) = (r.random_range(1..=7), r.random_range(1..=7));
    check("bilinear_resize", seed, OP_TOLERANCE, &[x], move |v| bilinear_resize(&v[0], oh, ow))
}

fn attention_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let (h, lq, lk, d) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=3));
    let q = randn(&mut r, &[1, h, lq, d]);
    let k = randn(&mut r, &[1, h, lk, d]);
    let v = randn(&mut r, &[1, h, lk, d]);
    check("linear_attention", seed, OP_TOLERANCE, &[q, k, v], |t| {
        linear_attention(&t[0], &t[1], &t[2], 1e-6)
    })
}

fn random_mask(r: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
    m[0] = true;
    m
}

fn depth_loss_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=2), 1, r.random_range(2..=4), r.random_range(2..=4)];
    let d = randn(&mut r, &shape);
    let ds = randn(&mut r, &shape);
    let mask = random_mask(&mut r, d.numel());
    check("depth_loss", seed, OP_TOLERANCE, &[d], move |v| depth_loss(&v[0], &ds, &mask))
}

fn binary_target(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect(), shape).expect("shape")
}

fn edge_loss_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=2), 1, r.random_range(1..=4), r.random_range(1..=4)];
    let x = randn(&mut r, &shape).mul_scalar(3.0);
    let t = binary_target(&mut r, &shape);
    check("edge_loss", seed, OP_TOLERANCE, &[x], move |v| edge_loss(&v[0], &t))
}

fn total_loss_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let shape = [2, 1, 4, 4];
    let d = randn(&mut r, &shape);
    let ds = randn(&mut r, &shape);
    let x = randn(&mut r, &[2, 1, 2, 2]);
    let t = binary_target(&mut r, &[2, 1, 2, 2]);
    let mask = random_mask(&mut r, 32);
    check("total_loss", seed, OP_TOLERANCE, &[d, x], move |v| {
        Ok(total_loss(&v[0], &ds, &v[1], &t, &mask, LossWeights::default())?.total)
    })
}

/// Checks a block with respect to its input(s) and every trainable tensor
/// in `vs`: the probes are swapped into the store before each forward.
fn block_check(
    name: &str,
    seed: u64,
    tol: f64,
    vs: &ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    params: Vec<ParamId>,
    forward: impl Fn(&ParamStore<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>>,
    max_checks: Option<usize>,
) -> Result<GradCheckReport> {
    let n_in = inputs.len();
    let mut all = inputs;
    all.extend(params.iter().map(|&id| vs.get(id).detach()));
    let w = std::sync::Mutex::new(None);
    let o = GradCheckOptions {
        max_checks_per_input: max_checks,
        epsilon: 1e-5,
        skip_nonsmooth: true,
        ..opts(seed, tol)
    };
    grad_check(
        name,
        |x| {
            for (&id, t) in params.iter().zip(&x[n_in..]) {
                vs.replace(id, t.clone())?;
            }
            let out = forward(vs, &x[..n_in])?;
            project(&out, &mut w.lock().expect("weights"), seed)
        },
        &all,
        o,
    )
}

fn trainable(vs: &ParamStore<f64>) -> Vec<ParamId> {
    vs.trainable_ids().collect()
}

/// Moves BN shifts away from 0 so ReLUs after them are not balanced on
/// their kink for whole channels.
fn jitter_params(vs: &ParamStore<f64>, r: &mut ChaCha8Rng) {
    for id in vs.trainable_ids().collect::<Vec<_>>() {
        let t = vs.get(id);
        let noise: Vec<f64> = normal(r, t.numel(), 0.2);
        let v = t.data().iter().zip(noise).map(|(a, b)| a + b).collect();
        vs.set(id, v).expect("same shape");
    }
}

fn conv_layer_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let conv = Conv2d::new(&mut vs, "conv", 2, 3, 3, ConvOptions::default().padding(1), true, &mut r);
    let x = randn(&mut r, &[1, 2, 4, 4]);
    let p = trainable(&vs);
    block_check("conv2d_layer", seed, OP_TOLERANCE, &vs, vec![x], p, |vs, x| conv.forward(vs, &x[0]), None)
}

fn bn_layer_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let bn = BatchNorm2d::new(&mut vs, "bn", 3);
    jitter_params(&vs, &mut r);
    let x = randn(&mut r, &[2, 3, 3, 3]);
    let p = trainable(&vs);
    let mode = if seed % 2 == 0 { Mode::Train } else { Mode::Eval };
    block_check("batch_norm2d", seed, OP_TOLERANCE, &vs, vec![x], p, move |vs, x| bn.forward(vs, &x[0], mode), None)
}

fn conv_bn_relu_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let cfg = ConvBnReluParams::new(2, 3, 3).stride(1 + (seed % 2) as usize);
    let layer = ConvBnRelu::new(&mut vs, "cbr", cfg, &mut r);
    jitter_params(&vs, &mut r);
    let x = randn(&mut r, &[2, 2, 5, 5]);
    let p = trainable(&vs);
    block_check("conv_bn_relu", seed, OP_TOLERANCE, &vs, vec![x], p, |vs, x| layer.forward(vs, &x[0], Mode::Train), None)
}

fn linear_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let lin = Linear::new(&mut vs, "lin", 3, 4, true, &mut r);
    let x = randn(&mut r, &[2, 5, 3]);
    let p = trainable(&vs);
    block_check("linear", seed, OP_TOLERANCE, &vs, vec![x], p, |vs, x| lin.forward(vs, &x[0]), None)
}

fn layer_norm_layer_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let ln = LayerNorm::new(&mut vs, "ln", 4);
    jitter_params(&vs, &mut r);
    let x = randn(&mut r, &[3, 4]);
    let p = trainable(&vs);
    block_check("layer_norm_layer", seed, OP_TOLERANCE, &vs, vec![x], p, |vs, x| ln.forward(vs, &x[0]), None)
}

fn irb_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let stride = if seed % 3 == 0 { 2 } else { 1 };
    let cfg = IrbConfig {
        in_ch: 3,
        out_ch: if stride == 1 { 3 } else { 4 },
        expansion: 2,
        stride,
        dilation: 1 + (seed % 2) as usize,
    };
    let irb = InvertedResidual::new(&mut vs, "irb", cfg, &mut r);
    jitter_params(&vs, &mut r);
    let x = randn(&mut r, &[2, 3, 4, 4]);
    let p = trainable(&vs);
    block_check("irb", seed, OP_TOLERANCE, &vs, vec![x], p, |vs, x| irb.forward(vs, &x[0], Mode::Train), None)
}

fn caff_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let caff = Caff::new(&mut vs, "caff", 4, &mut r);
    jitter_params(&vs, &mut r);
    let d = randn(&mut r, &[2, 4, 3, 3]);
    let e = randn(&mut r, &[2, 4, 3, 3]);
    let p = trainable(&vs);
    block_check("caff", seed, OP_TOLERANCE, &vs, vec![d, e], p, |vs, x| caff.forward(vs, &x[0], &x[1], Mode::Train), None)
}

fn edge_compact_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let ec = EdgeCompact::new(&mut vs, "ec", 3, &mut r);
    jitter_params(&vs, &mut r);
    let g = randn(&mut r, &[2, 2, 4, 4]);
    let p = trainable(&vs);
    block_check("edge_compact", seed, OP_TOLERANCE, &vs, vec![g], p, |vs, x| ec.forward(vs, &x[0], Mode::Train), None)
}

fn edge_head_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let head = EdgeHead::new(&mut vs, "head", 3, &mut r);
    jitter_params(&vs, &mut r);
    let f = randn(&mut r, &[2, 3, 3, 3]);
    let p = trainable(&vs);
    block_check("edge_head", seed, OP_TOLERANCE, &vs, vec![f], p, |vs, x| head.forward(vs, &x[0], Mode::Train), None)
}

fn decoder_block_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let block = DecoderBlock::new(&mut vs, "dec", 5, 3, &mut r);
    jitter_params(&vs, &mut r);
    let x = randn(&mut r, &[2, 2, 2, 3]);
    let s1 = randn(&mut r, &[2, 2, 2, 3]);
    let s2 = randn(&mut r, &[2, 1, 2, 3]);
    let p = trainable(&vs);
    block_check("decoder_block", seed, OP_TOLERANCE, &vs, vec![x, s1, s2], p, |vs, x| {
        block.forward(vs, &x[0], &x[1..], Mode::Train)
    }, None)
}

fn ltr_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let cfg = AttentionConfig::new(4, 2)?;
    let enc = LtrEncoder::new(&mut vs, "ltr", cfg, &mut r)?;
    jitter_params(&vs, &mut r);
    let x = randn(&mut r, &[1, 4, 2, 3]);
    let s = randn(&mut r, &[1, 4, 2, 3]);
    let p = trainable(&vs);
    block_check("ltr_encoder", seed, OP_TOLERANCE, &vs, vec![x, s], p, |vs, x| {
        let out = enc.forward(vs, &SequenceFeature::flatten(&x[0])?, &SequenceFeature::flatten(&x[1])?)?;
        out.unflatten()
    }, None)
}

fn trfa_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut vs = ParamStore::new();
    let cfg = AttentionConfig::new(4, 2)?;
    let trfa = Trfa::new(&mut vs, "trfa", cfg, &mut r)?;
    jitter_params(&vs, &mut r);
    let d5 = randn(&mut r, &[2, 4, 2, 2]);
    let e6 = randn(&mut r, &[2, 4, 2, 2]);
    let p = trainable(&vs);
    block_check("trfa", seed, OP_TOLERANCE, &vs, vec![d5, e6], p, |vs, x| trfa.forward(vs, &x[0], &x[1], Mode::Train), Some(6))
}

/// Whole network on a 32x32 input with the tiny config, differentiated
/// through `total_loss`. A random subset of parameter tensors is checked
/// per instance, a few coordinates each. The Sobel input path is fixed
/// preprocessing, so the image itself is not a checked input.
fn model_case(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let model = EgdNet::<f64>::new(ModelConfig::tiny(32, 32), seed)?;
    jitter_params(&model.vs, &mut r);
    let rgb: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| r.random_range(0.0..1.0)).collect();
    let rgb = Tensor::from_vec(rgb, &[2, 3, 32, 32])?;
    let depth: Vec<f64> = (0..2 * 32 * 32).map(|_| r.random_range(0.5..8.0)).collect();
    let depth = Tensor::from_vec(depth, &[2, 1, 32, 32])?;
    let target = binary_target(&mut r, &[2, 1, 16, 16]);
    let mask = random_mask(&mut r, 2 * 32 * 32);

    let mut ids: Vec<ParamId> = model.vs.trainable_ids().collect();
    let picked = rand::seq::index::sample(&mut r, ids.len(), 12.min(ids.len())).into_vec();
    let mut chosen: Vec<ParamId> = picked.into_iter().map(|i| ids[i]).collect();
    chosen.sort_by_key(|id| model.vs.name(*id).to_string());
    ids.clear();

    let vs = &model.vs;
    let all: Vec<Tensor<f64>> = chosen.iter().map(|&id| vs.get(id).detach()).collect();
    grad_check(
        "egdnet",
        |x| {
            for (&id, t) in chosen.iter().zip(x) {
                vs.replace(id, t.clone())?;
            }
            let out = model.forward(&rgb, Mode::Train)?;
            Ok(total_loss(&out.depth, &depth, &out.edge_logits, &target, &mask, LossWeights::default())?.total)
        },
        &all,
        GradCheckOptions {
            max_checks_per_input: Some(4),
            epsilon: 3e-6,
            skip_nonsmooth: true,
            ..opts(seed, MODEL_TOLERANCE)
        },
    )
}
