use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nearest_resize, resize_mask, resize_planes, DepthSample};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Rotation range in degrees.
    pub rotation: (f64, f64),
    /// Range of the brightness, contrast and saturation factors.
    pub jitter: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rotation: (-5.0, 5.0),
            jitter: (0.6, 1.4),
        }
    }
}

impl AugmentConfig {
    /// No-op configuration.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rotation: (0.0, 0.0),
            jitter: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.flip_prob),
            "augment: flip probability {} outside [0,1]",
            self.flip_prob
        );
        ensure!(self.rotation.0 <= self.rotation.1, "augment: empty rotation range {:?}", self.rotation);
        ensure!(
            self.jitter.0 > 0.0 && self.jitter.0 <= self.jitter.1,
            "augment: bad jitter range {:?}",
            self.jitter
        );
        Ok(())
    }
}

/// Independent stream for one sample of one epoch, so augmentation does not
/// depend on batch order or worker count.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) ^ index as u64);
    rng
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Random flip, rotation and color jitter. Geometry is applied jointly to
/// rgb, depth and mask; depth values are only resampled, never rescaled.
/// Every call consumes the same number of draws from `rng`.
pub fn augment<R: Rng + ?Sized>(sample: &DepthSample, cfg: &AugmentConfig, rng: &mut R) -> DepthSample {
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let angle = uniform(rng, cfg.rotation);
    let factors = [uniform(rng, cfg.jitter), uniform(rng, cfg.jitter), uniform(rng, cfg.jitter)];

    let mut s = sample.clone();
    if flip {
        s = hflip(&s);
    }
    if angle != 0.0 {
        s = rotate(&s, angle);
    }
    jitter(&mut s.rgb, s.width * s.height, factors);
    s
}

pub(crate) fn hflip(s: &DepthSample) -> DepthSample {
    let w = s.width;
    fn flip_rows<V: Copy>(v: &[V], w: usize) -> Vec<V> {
        v.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
    }
    DepthSample {
        width: s.width,
        height: s.height,
        rgb: flip_rows(&s.rgb, w),
        depth: flip_rows(&s.depth, w),
        valid: flip_rows(&s.valid, w),
    }
}

/// Rotation about the image center by `degrees` (counter-clockwise).
/// Pixels whose source falls outside the image or touches an invalid
/// depth sample become invalid.
pub(crate) fn rotate(s: &DepthSample, degrees: f64) -> DepthSample {
    let (w, h) = (s.width, s.height);
    let n = w * h;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut rgb = vec![0.0f32; 3 * n];
    let mut depth = vec![0.0f32; n];
    let mut valid = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let p = y * w + x;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (lx, ly) = (sx - x0 as f64, sy - y0 as f64);
            let taps = [
                (y0 * w + x0, (1.0 - lx) * (1.0 - ly)),
                (y0 * w + x1, lx * (1.0 - ly)),
                (y1 * w + x0, (1.0 - lx) * ly),
                (y1 * w + x1, lx * ly),
            ];
            let lerp = |plane: &[f32]| taps.iter().map(|&(q, wt)| wt * plane[q] as f64).sum::<f64>() as f32;
            for c in 0..3 {
                rgb[c * n + p] = lerp(&s.rgb[c * n..(c + 1) * n]);
            }
            let nearest = (sy.round() as usize) * w + sx.round() as usize;
            if s.valid[nearest] && taps.iter().all(|&(q, wt)| wt == 0.0 || s.valid[q]) {
                valid[p] = true;
                depth[p] = lerp(&s.depth);
            }
        }
    }
    DepthSample {
        width: w,
        height: h,
        rgb,
        depth,
        valid,
    }
}

/// Brightness, contrast and saturation scaling, then a clamp to [0, 1].
/// A factor of exactly 1 leaves the image untouched.
fn jitter(rgb: &mut [f32], n: usize, [brightness, contrast, saturation]: [f64; 3]) {
    let luma = |rgb: &[f32], p: usize| 0.299 * rgb[p] as f64 + 0.587 * rgb[n + p] as f64 + 0.114 * rgb[2 * n + p] as f64;
    let mut touched = false;
    if brightness != 1.0 {
        rgb.iter_mut().for_each(|v| *v = (*v as f64 * brightness) as f32);
        touched = true;
    }
    if contrast != 1.0 {
        let mean = (0..n).map(|p| luma(rgb, p)).sum::<f64>() / n as f64;
        rgb.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * contrast + mean) as f32);
        touched = true;
    }
    if saturation != 1.0 {
        for p in 0..n {
            let g = luma(rgb, p);
            for c in 0..3 {
                let v = &mut rgb[c * n + p];
                *v = ((*v as f64 - g) * saturation + g) as f32;
            }
        }
        touched = true;
    }
    if touched {
        rgb.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

pub const RAW_WIDTH: usize = 640;
pub const RAW_HEIGHT: usize = 480;

/// 640x480 capture to the 320x240 evaluation frame: bilinear downsample to
/// 342x256 (nearest for the mask), then a centered 320x240 crop at row 8,
/// column 11.
pub fn center_crop_resize(sample: &DepthSample) -> Result<DepthSample> {
    ensure!(
        (sample.width, sample.height) == (RAW_WIDTH, RAW_HEIGHT),
        "center_crop_resize: expected {RAW_WIDTH}x{RAW_HEIGHT}, got {}x{}",
        sample.width,
        sample.height
    );
    let (mw, mh, ow, oh) = (342usize, 256usize, 320usize, 240usize);
    let (top, left) = ((mh - oh) / 2, (mw - ow) / 2);
    let (h, w) = (RAW_HEIGHT, RAW_WIDTH);
    let rgb = resize_planes(&sample.rgb, 3, h, w, mh, mw);
    let depth = resize_planes(&sample.depth, 1, h, w, mh, mw);
    let near = nearest_resize(&sample.valid, h, w, mh, mw);
    let blended = resize_mask(&sample.valid, h, w, mh, mw);
    let crop = |plane: &[f32]| -> Vec<f32> {
        (top..top + oh)
            .flat_map(|y| plane[y * mw + left..y * mw + left + ow].iter().copied())
            .collect()
    };
    let rgb = (0..3).flat_map(|c| crop(&rgb[c * mh * mw..(c + 1) * mh * mw])).collect();
    let valid = (top..top + oh)
        .flat_map(|y| (left..left + ow).map(move |x| y * mw + x))
        .map(|p| near[p] && blended[p])
        .collect();
    DepthSample::with_mask(ow, oh, rgb, crop(&depth), valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coord_sample(w: usize, h: usize) -> DepthSample {
        let n = w * h;
        let mut rgb = vec![0.0f32; 3 * n];
        for p in 0..n {
            rgb[p] = (p % w) as f32 / w as f32;
            rgb[n + p] = (p / w) as f32 / h as f32;
            rgb[2 * n + p] = 0.5;
        }
        let depth = (0..n).map(|p| 1.0 + (p % w) as f32 + 100.0 * (p / w) as f32).collect();
        DepthSample::new(w, h, rgb, depth).unwrap()
    }

    #[test]
    fn forced_flip_is_an_involution() {
        let s = coord_sample(7, 4);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let once = augment(&s, &cfg, &mut rng);
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!(once.depth[y * 7 + x], s.depth[y * 7 + 6 - x]);
                assert_eq!(once.rgb[y * 7 + x], s.rgb[y * 7 + 6 - x]);
            }
        }
        assert_eq!(augment(&once, &cfg, &mut rng), s);
    }

    #[test]
    fn identity_config_is_bitwise_identity() {
        let s = coord_sample(8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(augment(&s, &AugmentConfig::identity(), &mut rng), s);
    }

    #[test]
    fn flip_frequency_concentrates() {
        let s = coord_sample(2, 1);
        let cfg = AugmentConfig {
            flip_prob: 0.5,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flips = (0..10_000).filter(|_| augment(&s, &cfg, &mut rng).depth[0] != s.depth[0]).count();
        let f = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&f), "{f}");
    }

    #[test]
    fn rotation_keeps_depth_values_and_geometry_in_sync() {
        let s = coord_sample(32, 24);
        let r = rotate(&s, 4.0);
        assert!(r.valid_count() < s.valid_count());
        assert!(r.valid_count() > s.valid_count() / 2);
        let (lo, hi) = s.depth.iter().fold((f32::MAX, 0.0f32), |(a, b), &d| (a.min(d), b.max(d)));
        let n = 32 * 24;
        for p in 0..n {
            if r.valid[p] {
                assert!(r.depth[p] >= lo && r.depth[p] <= hi);
                let sx = r.rgb[p] as f64 * 32.0;
                let sy = r.rgb[n + p] as f64 * 24.0;
                let from_depth = r.depth[p] as f64 - 1.0;
                assert!((from_depth - (sx + 100.0 * sy)).abs() < 1e-2);
            } else {
                assert_eq!(r.depth[p], 0.0);
            }
        }
    }

    #[test]
    fn jitter_stays_in_range_and_spares_depth() {
        let s = coord_sample(16, 8);
        let cfg = AugmentConfig::default();
        for i in 0..20 {
            let a = augment(&s, &cfg, &mut sample_rng(5, 0, i));
            assert!(a.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
            let mut sorted: Vec<f32> = a.depth.iter().copied().filter(|&d| d > 0.0).collect();
            sorted.sort_by(f32::total_cmp);
            assert!(sorted.first().unwrap() >= &1.0);
        }
    }

    #[test]
    fn sample_streams_are_independent_of_order() {
        let a: f64 = sample_rng(9, 2, 3).random();
        let _: f64 = sample_rng(9, 2, 4).random();
        let b: f64 = sample_rng(9, 2, 3).random();
        assert_eq!(a, b);
        let c: f64 = sample_rng(9, 3, 3).random();
        assert_ne!(a, c);
    }

    #[test]
    fn center_crop_offsets() {
        let (w, h) = (RAW_WIDTH, RAW_HEIGHT);
        let n = w * h;
        let rgb = vec![0.25f32; 3 * n];
        let depth = vec![4.0f32; n];
        let out = center_crop_resize(&DepthSample::new(w, h, rgb, depth).unwrap()).unwrap();
        assert_eq!((out.width, out.height), (320, 240));
        assert!(out.depth.iter().all(|&d| d == 4.0));
        assert!(out.rgb.iter().all(|&v| v == 0.25));

        // Column index encoded in depth; mid-image resized columns map back exactly.
        let depth: Vec<f32> = (0..n).map(|p| 1.0 + (p % w) as f32).collect();
        let enc = DepthSample::new(w, h, vec![0.0; 3 * n], depth).unwrap();
        let out = center_crop_resize(&enc).unwrap();
        // Resized column j samples source x = (j + 0.5) * 640/342 - 0.5.
        let expect = |j: usize| 1.0 + ((j as f64 + 0.5) * 640.0 / 342.0 - 0.5);
        assert!((out.depth[0] as f64 - expect(11)).abs() < 1e-3);
        assert!((out.depth[319] as f64 - expect(330)).abs() < 1e-3);
        assert!(center_crop_resize(&coord_sample(64, 48)).is_err());
    }
}
