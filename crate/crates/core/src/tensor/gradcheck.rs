//! Central finite-difference check of analytic gradients (64-bit graphs).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per input.
    /// `None` checks every coordinate.
    pub max_checks_per_input: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator. Gradients far below
    /// it are in effect compared in absolute terms, at `tol * floor`.
    pub denominator_floor: f64,
    /// Also difference at `epsilon / 2` and treat a coordinate as sitting on
    /// a kink (a ReLU switching inside the probe interval) when the two
    /// central estimates disagree, or when the one-sided slopes differ by
    /// more than curvature explains. Such coordinates are retried at
    /// `epsilon / 8` and `epsilon / 64` while roundoff allows, then skipped.
    /// Decided from numerical values only.
    pub skip_nonsmooth: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-6,
            tol: 1e-5,
            max_checks_per_input: None,
            seed: 0,
            denominator_floor: 1e-8,
            skip_nonsmooth: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub per_input_errors: Vec<f64>,
    pub pass: bool,
    /// Coordinates skipped as non-smooth.
    pub skipped: usize,
    /// Set when a non-finite value was met.
    pub numerical_error: Option<String>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<24} {} max_rel_error={:.3e}",
            self.op_name,
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_error
        )?;
        if self.skipped > 0 {
            write!(f, " ({} non-smooth skipped)", self.skipped)?;
        }
        if let Some(msg) = &self.numerical_error {
            write!(f, " ({msg})")?;
        }
        Ok(())
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central difference at step `e`, or `None` when the probe straddles a kink
/// or, for a refined step (`refined`), when roundoff would swamp the result.
///
/// A smooth `f` has one-sided slopes differing by about `f'' * e`, so the gap
/// halves with the step; across a kink it stays near the slope jump. A kink
/// shifts the central estimate by about as much as either test statistic,
/// hence the quarter tolerance.
fn smooth_difference(
    eval: &impl Fn(f64) -> Result<f64>,
    f0: f64,
    e: f64,
    refined: bool,
    opts: &GradCheckOptions,
) -> Result<Option<f64>> {
    let (fp, fm) = (eval(e)?, eval(-e)?);
    let (hp, hm) = (eval(e / 2.0)?, eval(-e / 2.0)?);
    let numeric = (fp - fm) / (2.0 * e);
    let half = (hp - hm) / e;
    if !numeric.is_finite() || !half.is_finite() {
        return Ok(Some(numeric));
    }
    let noise = 8.0 * f64::EPSILON * f0.abs().max(1.0) / e;
    let budget = 0.25 * opts.tol * numeric.abs().max(opts.denominator_floor);
    if refined && noise > budget {
        return Ok(None);
    }
    let gap = (fp - 2.0 * f0 + fm) / e;
    let gap_half = (hp - 2.0 * f0 + hm) / (e / 2.0);
    let agree = (numeric - half).abs() < budget + noise;
    let straight = (gap_half - gap / 2.0).abs() < budget + 4.0 * noise;
    Ok((agree && straight).then_some(numeric))
}

/// Compares the gradients `builder` produces by backpropagation against
/// central differences `(f(x+e) - f(x-e)) / 2e` at each checked coordinate.
///
/// `builder` must be deterministic and return a single-element tensor.
pub fn grad_check<F>(
    op_name: &str,
    builder: F,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let fail = |msg: String, per_input: Vec<f64>| GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: f64::INFINITY,
        per_input_errors: per_input,
        pass: false,
        skipped: 0,
        numerical_error: Some(msg),
    };

    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let root = builder(&leaves)?;
    let f0 = root.item()?;
    if !f0.is_finite() {
        return Ok(fail(format!("non-finite output {f0}"), Vec::new()));
    }
    root.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut skipped = 0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad_or_zeros();
        if analytic.iter().any(|v| !v.is_finite()) {
            return Ok(fail(format!("non-finite analytic gradient for input {i}"), per_input));
        }
        let n = leaf.numel();
        let coords: Vec<usize> = match opts.max_checks_per_input {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        let mut skipped_here = 0;
        let checked = coords.len();
        for j in coords {
            let eval = |delta: f64| -> Result<f64> {
                let probe: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        if k == i {
                            let mut d = t.to_vec();
                            d[j] += delta;
                            Tensor::from_vec(d, t.shape())
                        } else {
                            Ok(t.detach())
                        }
                    })
                    .collect::<Result<_>>()?;
                builder(&probe)?.item()
            };
            let numeric = if opts.skip_nonsmooth {
                let mut smooth = None;
                for (k, e) in [opts.epsilon, opts.epsilon / 8.0, opts.epsilon / 64.0].into_iter().enumerate() {
                    if let Some(n) = smooth_difference(&eval, f0, e, k > 0, &opts)? {
                        smooth = Some(n);
                        break;
                    }
                }
                match smooth {
                    Some(n) => n,
                    None => {
                        skipped_here += 1;
                        continue;
                    }
                }
            } else {
                (eval(opts.epsilon)? - eval(-opts.epsilon)?) / (2.0 * opts.epsilon)
            };
            if !numeric.is_finite() {
                return Ok(fail(
                    format!("non-finite finite difference at input {i}[{j}]"),
                    per_input,
                ));
            }
            worst = worst.max(rel_error(analytic[j], numeric, opts.denominator_floor));
        }
        if checked > 0 && 2 * skipped_here > checked {
            return Ok(fail(
                format!("input {i}: {skipped_here} of {checked} coordinates non-smooth"),
                per_input,
            ));
        }
        skipped += skipped_here;
        per_input.push(worst);
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        per_input_errors: per_input,
        pass: max_rel_error < opts.tol,
        skipped,
        numerical_error: None,
    })
}
