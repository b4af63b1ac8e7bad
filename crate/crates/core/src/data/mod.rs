//! Samples, image operators, augmentation, synthetic scenes and dataset files.

mod augment;
mod filters;
mod io;
mod synth;

pub use augment::{augment, center_crop_resize, sample_rng, AugmentConfig};
pub use filters::{laplacian_edges, make_edge_target, sobel, EDGE_THRESHOLD};
pub use io::{load_dataset, read_dpt, read_ppm, save_dataset, save_sample, write_dpt, write_ppm, DatasetIter};
pub use synth::{synth_generate, SYNTH_DEPTH_MAX, SYNTH_DEPTH_MIN};

use crate::error::{ensure, Result};
use crate::tensor::{bilinear_resize, Scalar, Tensor};

/// One RGB-D training pair. Planes are row-major; `rgb` is channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthSample {
    pub width: usize,
    pub height: usize,
    /// (3, H, W) in [0, 1].
    pub rgb: Vec<f32>,
    /// (H, W) in meters.
    pub depth: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthSample {
    /// Builds a sample, marking non-positive or non-finite depth invalid.
    pub fn new(width: usize, height: usize, rgb: Vec<f32>, depth: Vec<f32>) -> Result<Self> {
        let valid = depth.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Self::with_mask(width, height, rgb, depth, valid)
    }

    pub fn with_mask(width: usize, height: usize, rgb: Vec<f32>, depth: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        ensure!(n > 0, "sample: empty {width}x{height} image");
        ensure!(rgb.len() == 3 * n, "sample: rgb holds {} values, expected {}", rgb.len(), 3 * n);
        ensure!(depth.len() == n, "sample: depth holds {} values, expected {n}", depth.len());
        ensure!(valid.len() == n, "sample: mask holds {} values, expected {n}", valid.len());
        let mut s = DepthSample {
            width,
            height,
            rgb,
            depth,
            valid,
        };
        s.sanitize();
        Ok(s)
    }

    /// Invalid pixels carry depth 0; valid ones must be positive.
    fn sanitize(&mut self) {
        for (d, v) in self.depth.iter_mut().zip(self.valid.iter_mut()) {
            if !(d.is_finite() && *d > 0.0) {
                *v = false;
            }
            if !*v {
                *d = 0.0;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn rgb_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.rgb.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(data, &[1, 3, self.height, self.width]).expect("rgb shape")
    }

    pub fn depth_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.depth.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(data, &[1, 1, self.height, self.width]).expect("depth shape")
    }
}

/// A stacked batch: rgb (N,3,H,W), depth (N,1,H,W) and the flattened mask.
pub struct Batch<T: Scalar> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub mask: Vec<bool>,
}

pub fn stack<T: Scalar>(samples: &[DepthSample]) -> Result<Batch<T>> {
    ensure!(!samples.is_empty(), "stack: empty batch");
    let (w, h) = (samples[0].width, samples[0].height);
    ensure!(
        samples.iter().all(|s| s.width == w && s.height == h),
        "stack: samples differ in size"
    );
    let mut rgb = Vec::with_capacity(samples.len() * 3 * w * h);
    let mut depth = Vec::with_capacity(samples.len() * w * h);
    let mut mask = Vec::with_capacity(samples.len() * w * h);
    for s in samples {
        rgb.extend(s.rgb.iter().map(|&v| T::lit(v as f64)));
        depth.extend(s.depth.iter().map(|&v| T::lit(v as f64)));
        mask.extend_from_slice(&s.valid);
    }
    Ok(Batch {
        rgb: Tensor::from_vec(rgb, &[samples.len(), 3, h, w])?,
        depth: Tensor::from_vec(depth, &[samples.len(), 1, h, w])?,
        mask,
    })
}

/// Bilinear resize of `planes` stacked (h, w) planes.
pub(crate) fn resize_planes(data: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let t = Tensor::from_vec(data.to_vec(), &[1, planes, h, w]).expect("plane shape");
    bilinear_resize(&t, oh, ow).expect("resize").to_vec()
}

/// Mask resize: a pixel stays valid only if every bilinear tap with positive
/// weight is valid and its nearest source pixel is valid.
pub(crate) fn resize_mask(valid: &[bool], h: usize, w: usize, oh: usize, ow: usize) -> Vec<bool> {
    let ind: Vec<f32> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let blended = resize_planes(&ind, 1, h, w, oh, ow);
    let near = nearest_resize(valid, h, w, oh, ow);
    blended.iter().zip(near).map(|(&b, n)| n && b >= 1.0 - 1e-5).collect()
}

/// Nearest-neighbor resize with half-pixel centers.
pub(crate) fn nearest_resize<V: Copy>(src: &[V], h: usize, w: usize, oh: usize, ow: usize) -> Vec<V> {
    let pick = |o: usize, n: usize, on: usize| (((o as f64 + 0.5) * n as f64 / on as f64).floor() as usize).min(n - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, h, oh);
        for x in 0..ow {
            out.push(src[sy * w + pick(x, w, ow)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_depth_is_zeroed_and_masked() {
        let s = DepthSample::new(2, 1, vec![0.5; 6], vec![f32::NAN, 2.0]).unwrap();
        assert_eq!(s.depth, vec![0.0, 2.0]);
        assert_eq!(s.valid, vec![false, true]);
        assert_eq!(s.valid_count(), 1);
        assert!(DepthSample::new(2, 1, vec![0.5; 5], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn mask_resize_drops_mixed_neighborhoods() {
        let valid = vec![true, true, false, true, true, true, true, true];
        let out = resize_mask(&valid, 2, 4, 1, 2);
        assert_eq!(out, vec![true, false]);
    }
}
