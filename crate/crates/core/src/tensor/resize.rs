use super::{nchw, Scalar, Tensor};
use crate::error::{ensure, Result};

/// Source taps for one output coordinate: `(i0, i1, weight of i1)`.
fn taps(out: usize, in_size: usize, out_size: usize) -> (usize, usize, f64) {
    // align_corners = false
    let scale = in_size as f64 / out_size as f64;
    let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_size - 1);
    let i1 = (i0 + 1).min(in_size - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear interpolation of an NCHW tensor to `(out_h, out_w)` with
/// half-pixel centers (align-corners off).
pub fn bilinear_resize<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = nchw(input, "bilinear_resize")?;
    ensure!(out_h >= 1 && out_w >= 1, "bilinear_resize: non-positive target {out_h}x{out_w}");
    ensure!(h >= 1 && w >= 1, "bilinear_resize: empty input");
    if (out_h, out_w) == (h, w) {
        return input.reshape(&[n, c, h, w]);
    }
    let ys: Vec<(usize, usize, T)> = (0..out_h)
        .map(|o| {
            let (a, b, l) = taps(o, h, out_h);
            (a, b, T::lit(l))
        })
        .collect();
    let xs: Vec<(usize, usize, T)> = (0..out_w)
        .map(|o| {
            let (a, b, l) = taps(o, w, out_w);
            (a, b, T::lit(l))
        })
        .collect();
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in x.chunks(h * w) {
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    Ok(Tensor::op_result(
        "bilinear_resize",
        out,
        vec![n, c, out_h, out_w],
        vec![input.clone()],
        move |a| {
            let mut g = vec![T::zero(); n * c * h * w];
            for (p, gp) in a.grad_output.chunks(out_h * out_w).enumerate() {
                let dst = &mut g[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let v = gp[oy * out_w + ox];
                        let top = v * (T::one() - ly);
                        let bot = v * ly;
                        dst[y0 * w + x0] += top * (T::one() - lx);
                        dst[y0 * w + x1] += top * lx;
                        dst[y1 * w + x0] += bot * (T::one() - lx);
                        dst[y1 * w + x1] += bot * lx;
                    }
                }
            }
            vec![Some(g)]
        },
    ))
}

/// Bilinear x2 upsampling.
pub fn upsample2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = nchw(input, "upsample2")?;
    bilinear_resize(input, 2 * h, 2 * w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 5], 0.7);
        for (h, w) in [(6, 10), (1, 1), (7, 2), (3, 5)] {
            let y = bilinear_resize(&x, h, w).unwrap();
            assert_eq!(y.shape(), &[1, 2, h, w]);
            assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn doubling_shape() {
        let x = Tensor::<f32>::zeros(&[1, 128, 20, 15]);
        assert_eq!(upsample2(&x).unwrap().shape(), &[1, 128, 40, 30]);
    }

    #[test]
    fn ramp_interior_stays_on_line() {
        let w = 8;
        let x = Tensor::<f64>::from_vec((0..w).map(|i| 2.0 * i as f64 + 1.0).collect(), &[1, 1, 1, w]).unwrap();
        let y = upsample2(&x).unwrap();
        // output j sits at input coordinate (j + 0.5) / 2 - 0.5
        for j in 1..2 * w - 1 {
            let src = (j as f64 + 0.5) / 2.0 - 0.5;
            let expected = 2.0 * src + 1.0;
            assert!((y.data()[j] - expected).abs() < 1e-12, "j={j}");
        }
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_f64(&[1.0, 5.0, -2.0, 3.0, 0.5, 9.0], &[1, 1, 2, 3]).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 3).unwrap().data(), x.data());
    }

    #[test]
    fn rejects_empty_target() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(bilinear_resize(&x, 0, 2).is_err());
    }
}
