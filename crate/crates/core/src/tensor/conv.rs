//! 2-D convolution (cross-correlation) with stride, zero padding, dilation and
//! groups. Two interchangeable algorithms: a direct nested-loop reference and
//! an im2col + GEMM path used by default.

use super::{gemm, nchw, MatView, Scalar, Tensor};
use crate::error::{ensure, invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvOptions {
    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    Naive,
    #[default]
    Im2col,
}

/// `floor((size + 2p - d(k-1) - 1) / s) + 1`, or `None` when that is below 1.
pub fn conv_out_extent(size: usize, kernel: usize, opts: &ConvOptions) -> Option<usize> {
    let span = opts.dilation * (kernel - 1) + 1;
    let padded = size + 2 * opts.padding;
    (padded >= span).then(|| (padded - span) / opts.stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cg: usize,
    og: usize,
    opts: ConvOptions,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cg * self.kh * self.kw
    }

    fn pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.opts.stride == 1
            && self.opts.padding == 0
            && self.ho == self.h
            && self.wo == self.w
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.opts.stride + k * self.opts.dilation) as isize - self.opts.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: &ConvOptions,
) -> Result<Geometry> {
    let (n, c, h, w) = nchw(input, "conv2d input")?;
    let (o, wc, kh, kw) = nchw(weight, "conv2d weight")?;
    ensure!(
        opts.stride >= 1 && opts.dilation >= 1 && opts.groups >= 1,
        "conv2d: stride, dilation and groups must be >= 1"
    );
    ensure!(
        c % opts.groups == 0 && o % opts.groups == 0,
        "conv2d: channels in={c} out={o} not divisible by groups={}",
        opts.groups
    );
    ensure!(
        wc == c / opts.groups,
        "conv2d: weight {:?} expects {} input channels per group, input has {}",
        weight.shape(),
        wc,
        c / opts.groups
    );
    ensure!(kh >= 1 && kw >= 1, "conv2d: empty kernel");
    if let Some(b) = bias {
        ensure!(
            b.shape() == [o],
            "conv2d: bias shape {:?} does not match {o} output channels",
            b.shape()
        );
    }
    let ho = conv_out_extent(h, kh, opts);
    let wo = conv_out_extent(w, kw, opts);
    let (ho, wo) = match (ho, wo) {
        (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
        _ => {
            return Err(invalid!(
                "conv2d: zero-sized output for input {h}x{w}, kernel {kh}x{kw}, {:?}",
                opts
            ))
        }
    };
    Ok(Geometry {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
        cg: c / opts.groups,
        og: o / opts.groups,
        opts: *opts,
    })
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: ConvOptions,
) -> Result<Tensor<T>> {
    conv2d_with(input, weight, bias, opts, ConvAlgo::default())
}

pub fn conv2d_with<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: ConvOptions,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, bias, &opts)?;
    let mut out = match algo {
        ConvAlgo::Naive => naive_forward(&g, input.data(), weight.data()),
        ConvAlgo::Im2col => im2col_forward(&g, input.data(), weight.data()),
    };
    if let Some(b) = bias {
        let plane = g.ho * g.wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b.data()[i % g.o];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    Ok(Tensor::op_result(
        "conv2d",
        out,
        vec![g.n, g.o, g.ho, g.wo],
        inputs,
        move |a| {
            let (x, w) = (a.inputs[0].data(), a.inputs[1].data());
            let gy = a.grad_output;
            let (gx, gw) = match algo {
                ConvAlgo::Naive => naive_backward(&g, x, w, gy, a.wants(0), a.wants(1)),
                ConvAlgo::Im2col => im2col_backward(&g, x, w, gy, a.wants(0), a.wants(1)),
            };
            let mut grads = vec![gx, gw];
            if a.inputs.len() == 3 {
                grads.push(a.wants(2).then(|| {
                    let plane = g.ho * g.wo;
                    let mut gb = vec![T::zero(); g.o];
                    for (i, chunk) in gy.chunks(plane).enumerate() {
                        gb[i % g.o] += chunk.iter().copied().sum::<T>();
                    }
                    gb
                }));
            }
            grads
        },
    ))
}

fn naive_forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.o * g.ho * g.wo];
    for n in 0..g.n {
        for o in 0..g.o {
            let grp = o / g.og;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = T::zero();
                    for c in 0..g.cg {
                        let ic = grp * g.cg + c;
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                acc += x[((n * g.c + ic) * g.h + iy) * g.w + ix]
                                    * w[((o * g.cg + c) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[((n * g.o + o) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

type Grads<T> = (Option<Vec<T>>, Option<Vec<T>>);

fn naive_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_x: bool,
    want_w: bool,
) -> Grads<T> {
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    for n in 0..g.n {
        for o in 0..g.o {
            let grp = o / g.og;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let go = gy[((n * g.o + o) * g.ho + oy) * g.wo + ox];
                    for c in 0..g.cg {
                        let ic = grp * g.cg + c;
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                let xi = ((n * g.c + ic) * g.h + iy) * g.w + ix;
                                let wi = ((o * g.cg + c) * g.kh + ky) * g.kw + kx;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += go * w[wi];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Unfolds one group of one image into a (cg*kh*kw, ho*wo) column matrix.
fn im2col<T: Scalar>(g: &Geometry, img: &[T], col: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cg {
        let chan = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src_row = &chan[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kx, g.w) {
                                    Some(ix) => src_row[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one group of one image.
fn col2im<T: Scalar>(g: &Geometry, col: &[T], img: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cg {
        let chan = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            chan[iy * g.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward<T: Scalar>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let plane = g.ho * g.wo;
    let k = g.patch();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * plane] };
    let wv = MatView::row_major(g.og, k);
    let cv = MatView::row_major(k, plane);
    let ov = MatView::row_major(g.og, plane);
    for n in 0..g.n {
        for grp in 0..g.opts.groups {
            let img_off = (n * g.c + grp * g.cg) * g.h * g.w;
            let img = &x[img_off..img_off + g.cg * g.h * g.w];
            let cols: &[T] = if g.pointwise() {
                img
            } else {
                im2col(g, img, &mut col);
                &col
            };
            let w_g = &w[grp * g.og * k..(grp + 1) * g.og * k];
            let out_off = (n * g.o + grp * g.og) * plane;
            gemm(w_g, wv, cols, cv, &mut out[out_off..out_off + g.og * plane], ov, false);
        }
    }
    out
}

fn im2col_backward<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    gy: &[T],
    want_x: bool,
    want_w: bool,
) -> Grads<T> {
    let plane = g.ho * g.wo;
    let k = g.patch();
    let mut gx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    let mut col = vec![T::zero(); k * plane];
    let mut gcol = vec![T::zero(); k * plane];
    let wv = MatView::row_major(g.og, k);
    let cv = MatView::row_major(k, plane);
    let ov = MatView::row_major(g.og, plane);
    for n in 0..g.n {
        for grp in 0..g.opts.groups {
            let img_off = (n * g.c + grp * g.cg) * g.h * g.w;
            let img_len = g.cg * g.h * g.w;
            let out_off = (n * g.o + grp * g.og) * plane;
            let gy_g = &gy[out_off..out_off + g.og * plane];
            let w_g = &w[grp * g.og * k..(grp + 1) * g.og * k];
            if let Some(gw) = gw.as_mut() {
                let img = &x[img_off..img_off + img_len];
                let cols: &[T] = if g.pointwise() {
                    img
                } else {
                    im2col(g, img, &mut col);
                    &col
                };
                // dW_g += dY_g (og x plane) @ cols^T (plane x k)
                gemm(gy_g, ov, cols, cv.t(), &mut gw[grp * g.og * k..(grp + 1) * g.og * k], wv, true);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[img_off..img_off + img_len];
                if g.pointwise() {
                    gemm(w_g, wv.t(), gy_g, ov, dst, cv, true);
                } else {
                    gemm(w_g, wv.t(), gy_g, ov, &mut gcol, cv, false);
                    col2im(g, &gcol, dst);
                }
            }
        }
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|i| ((i * 7 % 13) as f64 - 6.0) * scale).collect(), shape).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = ramp(&[2, 3, 5, 4], 0.3);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let w = Tensor::from_vec(w, &[3, 3, 1, 1]).unwrap();
        let b = Tensor::zeros(&[3]);
        for algo in [ConvAlgo::Naive, ConvAlgo::Im2col] {
            let y = conv2d_with(&x, &w, Some(&b), ConvOptions::default(), algo).unwrap();
            assert_eq!(y.data(), x.data());
        }
    }

    #[test]
    fn ones_kernel_on_constant_image() {
        let c = 1.75;
        let x = Tensor::<f64>::full(&[1, 1, 6, 6], c);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, ConvOptions::default().padding(1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 6, 6]);
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((y.data()[yy * 6 + xx] - 9.0 * c).abs() < 1e-12);
            }
        }
        // corner sees 4 taps
        assert!((y.data()[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn grouped_channels_stay_separate() {
        let w = ramp(&[4, 1, 3, 3], 0.1);
        let opts = ConvOptions::default().padding(1).groups(4);
        for k in 0..4 {
            let mut data = vec![0.0; 4 * 64];
            for i in 0..64 {
                data[k * 64 + i] = (i as f64).sin();
            }
            let x = Tensor::from_vec(data, &[1, 4, 8, 8]).unwrap();
            let y = conv2d(&x, &w, None, opts).unwrap();
            assert_eq!(y.shape(), &[1, 4, 8, 8]);
            for ch in 0..4 {
                let plane = &y.data()[ch * 64..(ch + 1) * 64];
                if ch == k {
                    assert!(plane.iter().any(|&v| v != 0.0));
                } else {
                    assert!(plane.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let opts = ConvOptions::default().stride(2).padding(1);
        assert_eq!(conv_out_extent(64, 3, &opts), Some(32));
        assert_eq!(conv_out_extent(48, 3, &opts), Some(24));
        let dil = ConvOptions::default().padding(3).dilation(3);
        assert_eq!(conv_out_extent(15, 3, &dil), Some(15));
        assert_eq!(conv_out_extent(1, 3, &ConvOptions::default()), None);
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 4, 5, 5]);
        // weight expects 3 channels
        assert!(conv2d(&x, &Tensor::zeros(&[2, 3, 3, 3]), None, ConvOptions::default()).is_err());
        // 4 channels over 3 groups
        assert!(conv2d(&x, &Tensor::zeros(&[3, 1, 3, 3]), None, ConvOptions::default().groups(3)).is_err());
        // kernel bigger than input
        assert!(conv2d(&x, &Tensor::zeros(&[1, 4, 7, 7]), None, ConvOptions::default()).is_err());
        // bias length
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[2, 4, 3, 3]),
            Some(&Tensor::zeros(&[3])),
            ConvOptions::default()
        )
        .is_err());
    }
}
