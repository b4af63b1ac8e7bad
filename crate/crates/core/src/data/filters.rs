use super::resize_mask;
use crate::error::{ensure, Result};
use crate::tensor::{bilinear_resize, Scalar, Tensor};

/// Default binarization threshold on the Laplacian response, in meters.
pub const EDGE_THRESHOLD: f64 = 0.25;

/// Horizontal and vertical Sobel responses of the luminance image, with
/// replicate padding. The result is a constant: no gradient flows back.
pub fn sobel<T: Scalar>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let s = rgb.shape();
    ensure!(
        s.len() == 4 && s[1] == 3,
        "sobel: expected (N,3,H,W), got {:?}",
        s
    );
    let (n, h, w) = (s[0], s[2], s[3]);
    let x = rgb.data();
    let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let two = T::lit(2.0);
    let mut out = vec![T::zero(); n * 2 * h * w];
    let mut gray = vec![T::zero(); h * w];
    for i in 0..n {
        let base = i * 3 * h * w;
        for p in 0..h * w {
            gray[p] = r * x[base + p] + g * x[base + h * w + p] + b * x[base + 2 * h * w + p];
        }
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            gray[y * w + x]
        };
        let (gx, gy) = out[i * 2 * h * w..(i + 1) * 2 * h * w].split_at_mut(h * w);
        for yy in 0..h as isize {
            for xx in 0..w as isize {
                let p = yy as usize * w + xx as usize;
                gx[p] = (at(yy - 1, xx + 1) + two * at(yy, xx + 1) + at(yy + 1, xx + 1))
                    - (at(yy - 1, xx - 1) + two * at(yy, xx - 1) + at(yy + 1, xx - 1));
                gy[p] = (at(yy + 1, xx - 1) + two * at(yy + 1, xx) + at(yy + 1, xx + 1))
                    - (at(yy - 1, xx - 1) + two * at(yy - 1, xx) + at(yy - 1, xx + 1));
            }
        }
    }
    Tensor::from_vec(out, &[n, 2, h, w])
}

/// Binary edge map: 1 where the 5-point Laplacian of `depth` exceeds
/// `threshold` in magnitude. At the image border the map is extended
/// linearly, so the second difference across the border is 0 and affine
/// maps give no response anywhere. Pixels whose neighborhood touches an
/// invalid pixel (mask false or depth <= 0) are 0.
pub fn laplacian_edges(depth: &[f32], valid: Option<&[bool]>, h: usize, w: usize, threshold: f64) -> Result<Vec<f32>> {
    ensure!(depth.len() == h * w && h * w > 0, "laplacian_edges: {} values for {w}x{h}", depth.len());
    if let Some(v) = valid {
        ensure!(v.len() == h * w, "laplacian_edges: mask holds {} values for {w}x{h}", v.len());
    }
    let ok = |p: usize| depth[p] > 0.0 && valid.is_none_or(|v| v[p]);
    let d = |p: usize| depth[p] as f64;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let c = y * w + x;
            let mut nb = Vec::with_capacity(4);
            if y > 0 {
                nb.push(c - w);
            }
            if y + 1 < h {
                nb.push(c + w);
            }
            if x > 0 {
                nb.push(c - 1);
            }
            if x + 1 < w {
                nb.push(c + 1);
            }
            if !ok(c) || nb.iter().any(|&p| !ok(p)) {
                continue;
            }
            let mut resp = 0.0;
            if y > 0 && y + 1 < h {
                resp += d(c - w) + d(c + w) - 2.0 * d(c);
            }
            if x > 0 && x + 1 < w {
                resp += d(c - 1) + d(c + 1) - 2.0 * d(c);
            }
            if resp.abs() > threshold {
                out[c] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Edge supervision at half resolution: bilinear 2x downsample, then
/// [`laplacian_edges`]. Returns the `(H/2) * (W/2)` map.
pub fn make_edge_target(depth: &[f32], valid: &[bool], h: usize, w: usize, threshold: f64) -> Result<Vec<f32>> {
    ensure!(h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0, "make_edge_target: {w}x{h} is not even");
    ensure!(depth.len() == h * w && valid.len() == h * w, "make_edge_target: plane size mismatch");
    let t = Tensor::from_vec(depth.to_vec(), &[1, 1, h, w])?;
    let small = bilinear_resize(&t, h / 2, w / 2)?.to_vec();
    let small_valid = resize_mask(valid, h, w, h / 2, w / 2);
    laplacian_edges(&small, Some(&small_valid), h / 2, w / 2, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let mut data = Vec::new();
        for _ in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(y, x));
                }
            }
        }
        Tensor::from_vec(data, &[1, 3, h, w]).unwrap()
    }

    #[test]
    fn sobel_constant_is_zero() {
        let g = sobel(&gray_image(5, 6, |_, _| 0.7)).unwrap();
        assert_eq!(g.shape(), &[1, 2, 5, 6]);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sobel_ramp_interior() {
        let g = sobel(&gray_image(5, 8, |_, x| x as f64 / 255.0)).unwrap();
        let d = g.data();
        for y in 1..4 {
            for x in 1..7 {
                assert!((d[y * 8 + x] - 8.0 / 255.0).abs() < 1e-12);
                assert!(d[40 + y * 8 + x].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sobel_vertical_edge() {
        let g = sobel(&gray_image(4, 8, |_, x| if x >= 4 { 1.0 } else { 0.0 })).unwrap();
        let expect = [0.0, 0.0, 0.0, 4.0, 4.0, 0.0, 0.0, 0.0];
        for (got, want) in g.data()[8..16].iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(g.data()[32..].iter().all(|v| v.abs() < 1e-12));
        assert!(sobel(&Tensor::<f64>::zeros(&[1, 1, 4, 4])).is_err());
    }

    #[test]
    fn laplacian_flat_ramp_and_step() {
        let (h, w) = (4, 6);
        let flat = vec![2.0f32; h * w];
        assert!(laplacian_edges(&flat, None, h, w, 0.25).unwrap().iter().all(|&v| v == 0.0));
        let ramp: Vec<f32> = (0..h * w).map(|p| 1.0 + 0.5 * (p % w) as f32 + 0.25 * (p / w) as f32).collect();
        assert!(laplacian_edges(&ramp, None, h, w, 0.25).unwrap().iter().all(|&v| v == 0.0));
        let step: Vec<f32> = (0..h * w).map(|p| if p % w >= 3 { 3.0 } else { 2.0 }).collect();
        let e = laplacian_edges(&step, None, h, w, 0.25).unwrap();
        for y in 0..h {
            assert_eq!(&e[y * w..(y + 1) * w], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn laplacian_ignores_invalid_neighborhoods() {
        let (h, w) = (5, 5);
        let mut d = vec![1.0f32; 25];
        d[12] = 5.0;
        assert_eq!(laplacian_edges(&d, None, h, w, 0.25).unwrap().iter().sum::<f32>(), 5.0);
        d[7] = 0.0;
        let e = laplacian_edges(&d, None, h, w, 0.25).unwrap();
        assert_eq!(e[12], 0.0);
        assert_eq!(e[7], 0.0);
        assert_eq!(e[11], 1.0);
        let mut valid = vec![true; 25];
        valid[13] = false;
        d[7] = 1.0;
        assert_eq!(laplacian_edges(&d, Some(&valid), h, w, 0.25).unwrap()[12], 0.0);
    }

    #[test]
    fn edge_target_shape_and_step() {
        let (h, w) = (240, 320);
        let depth = vec![3.0f32; h * w];
        let t = make_edge_target(&depth, &vec![true; h * w], h, w, 0.25).unwrap();
        assert_eq!(t.len(), 120 * 160);
        assert!(t.iter().all(|&v| v == 0.0));

        for split in [8usize, 9] {
            let (h, w) = (8, 16);
            let depth: Vec<f32> = (0..h * w).map(|p| if p % w >= split { 2.0 } else { 1.0 }).collect();
            let t = make_edge_target(&depth, &vec![true; h * w], h, w, 0.25).unwrap();
            for y in 0..h / 2 {
                assert!(t[y * 8..(y + 1) * 8].iter().sum::<f32>() >= 1.0, "split {split}");
            }
        }
        assert!(make_edge_target(&[1.0; 9], &[true; 9], 3, 3, 0.25).is_err());
    }
}
