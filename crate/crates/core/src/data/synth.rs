use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_edge_target, DepthSample, EDGE_THRESHOLD};
use crate::error::{ensure, Result};

pub const SYNTH_DEPTH_MIN: f32 = 0.5;
pub const SYNTH_DEPTH_MAX: f32 = 8.0;

/// Minimum depth jump between the front rectangle and its surroundings.
const MIN_STEP: f32 = 0.75;

struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    depth: f32,
    albedo: [f32; 3],
}

/// Procedural indoor-like scenes: a floor-to-wall depth gradient plus 3 to 8
/// fronto-parallel rectangles. Color is albedo times a depth falloff, so
/// depth is recoverable from appearance. Deterministic in `seed`.
pub fn synth_generate(seed: u64, count: usize, width: usize, height: usize) -> Result<Vec<DepthSample>> {
    ensure!(
        width > 0 && height > 0 && width % 16 == 0 && height % 16 == 0,
        "synth_generate: size {width}x{height} must be positive multiples of 16"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| loop {
            let s = scene(&mut rng, width, height)?;
            let target = make_edge_target(&s.depth, &s.valid, height, width, EDGE_THRESHOLD)?;
            if target.iter().any(|&v| v > 0.0) {
                break Ok(s);
            }
        })
        .collect()
}

fn shade(depth: f32) -> f32 {
    0.3 + 0.7 * (SYNTH_DEPTH_MAX - depth) / (SYNTH_DEPTH_MAX - SYNTH_DEPTH_MIN)
}

fn scene(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Result<DepthSample> {
    let far = rng.random_range(5.0f32..SYNTH_DEPTH_MAX);
    let near = rng.random_range(2.0f32..4.0);
    let wall: [f32; 3] = [rng.random_range(0.5..0.9), rng.random_range(0.5..0.9), rng.random_range(0.5..0.9)];
    let mut depth: Vec<f32> = (0..w * h)
        .map(|p| far + (near - far) * (p / w) as f32 / (h - 1).max(1) as f32)
        .collect();
    let mut albedo: Vec<[f32; 3]> = vec![wall; w * h];

    let margin = 2.min(w / 4).min(h / 4);
    let count = rng.random_range(3..=8);
    let mut rects: Vec<Rect> = (0..count)
        .map(|_| {
            let rw = rng.random_range((w / 6).max(2)..=(w / 2).max(2));
            let rh = rng.random_range((h / 6).max(2)..=(h / 2).max(2));
            let x0 = rng.random_range(margin..=w - margin - rw);
            let y0 = rng.random_range(margin..=h - margin - rh);
            Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
                depth: rng.random_range(SYNTH_DEPTH_MIN..SYNTH_DEPTH_MAX),
                albedo: [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
            }
        })
        .collect();
    rects.sort_by(|a, b| b.depth.total_cmp(&a.depth));

    let last = rects.len() - 1;
    for (i, r) in rects.iter_mut().enumerate() {
        if i == last {
            // The frontmost rectangle must stand out from whatever surrounds it.
            let ring = ring(r, w, h);
            for _ in 0..64 {
                if ring.iter().all(|&p| (depth[p] - r.depth).abs() >= MIN_STEP) {
                    break;
                }
                r.depth = rng.random_range(SYNTH_DEPTH_MIN..SYNTH_DEPTH_MAX);
            }
        }
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                depth[y * w + x] = r.depth;
                albedo[y * w + x] = r.albedo;
            }
        }
    }

    let n = w * h;
    let mut rgb = vec![0.0f32; 3 * n];
    for p in 0..n {
        let s = shade(depth[p]);
        for c in 0..3 {
            rgb[c * n + p] = (albedo[p][c] * s).clamp(0.0, 1.0);
        }
    }
    DepthSample::new(w, h, rgb, depth)
}

/// Pixel indices just outside the rectangle, clipped to the image.
fn ring(r: &Rect, w: usize, h: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for x in r.x0..r.x1 {
        if r.y0 > 0 {
            out.push((r.y0 - 1) * w + x);
        }
        if r.y1 < h {
            out.push(r.y1 * w + x);
        }
    }
    for y in r.y0..r.y1 {
        if r.x0 > 0 {
            out.push(y * w + r.x0 - 1);
        }
        if r.x1 < w {
            out.push(y * w + r.x1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_generate(11, 4, 64, 48).unwrap();
        let b = synth_generate(11, 4, 64, 48).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_generate(12, 4, 64, 48).unwrap());
        for s in &a {
            assert_eq!((s.width, s.height), (64, 48));
            assert!(s.depth.iter().all(|d| (SYNTH_DEPTH_MIN..=SYNTH_DEPTH_MAX).contains(d)));
            assert!(s.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.valid_count(), 64 * 48);
        }
    }

    #[test]
    fn edge_targets_are_non_empty() {
        for s in synth_generate(3, 16, 32, 32).unwrap() {
            let t = make_edge_target(&s.depth, &s.valid, 32, 32, EDGE_THRESHOLD).unwrap();
            assert!(t.iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(synth_generate(0, 1, 60, 48).is_err());
    }
}
