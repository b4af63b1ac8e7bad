use std::fmt;

use serde::Serialize;

use crate::error::{ensure, Result};

/// Which map divides the absolute error in REL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelDenominator {
    #[default]
    GroundTruth,
    Prediction,
}

impl std::str::FromStr for RelDenominator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ground_truth" => Ok(RelDenominator::GroundTruth),
            "prediction" => Ok(RelDenominator::Prediction),
            _ => Err(format!("expected `ground_truth` or `prediction`, got `{s}`")),
        }
    }
}

impl fmt::Display for RelDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelDenominator::GroundTruth => "ground_truth",
            RelDenominator::Prediction => "prediction",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid_pixels: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rmse     {:>10.6}", self.rmse)?;
        writeln!(f, "rel      {:>10.6}", self.rel)?;
        writeln!(f, "delta1   {:>10.6}", self.delta1)?;
        writeln!(f, "delta2   {:>10.6}", self.delta2)?;
        writeln!(f, "delta3   {:>10.6}", self.delta3)?;
        write!(f, "pixels   {:>10}", self.n_valid_pixels)
    }
}

/// Pixel-weighted running sums, so reports over many samples equal the
/// report over their concatenation.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    sq_err: f64,
    rel: f64,
    hits: [usize; 3],
    n: usize,
    denominator: RelDenominator,
}

impl MetricAccumulator {
    pub fn new(denominator: RelDenominator) -> Self {
        MetricAccumulator {
            denominator,
            ..Default::default()
        }
    }

    /// `d` must already be clamped positive.
    pub fn add(&mut self, d: &[f64], d_star: &[f64], mask: &[bool]) -> Result<()> {
        ensure!(
            d.len() == d_star.len() && d.len() == mask.len(),
            "metrics: length mismatch {} / {} / {}",
            d.len(),
            d_star.len(),
            mask.len()
        );
        let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
        for ((&p, &g), _) in d.iter().zip(d_star).zip(mask).filter(|(_, &m)| m) {
            ensure!(p > 0.0 && g > 0.0, "metrics: non-positive depth at a valid pixel ({p}, {g})");
            let e = p - g;
            self.sq_err += e * e;
            self.rel += e.abs()
                / match self.denominator {
                    RelDenominator::GroundTruth => g,
                    RelDenominator::Prediction => p,
                };
            let ratio = (g / p).max(p / g);
            for (hit, t) in self.hits.iter_mut().zip(thresholds) {
                if ratio < t {
                    *hit += 1;
                }
            }
            self.n += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        ensure!(self.n > 0, "metrics: no valid pixels");
        let n = self.n as f64;
        Ok(EvalReport {
            rmse: (self.sq_err / n).sqrt(),
            rel: self.rel / n,
            delta1: self.hits[0] as f64 / n,
            delta2: self.hits[1] as f64 / n,
            delta3: self.hits[2] as f64 / n,
            n_valid_pixels: self.n,
        })
    }
}

/// RMSE, REL and threshold accuracies over the valid pixels of one map.
pub fn metrics(d: &[f64], d_star: &[f64], mask: &[bool], denominator: RelDenominator) -> Result<EvalReport> {
    let mut acc = MetricAccumulator::new(denominator);
    acc.add(d, d_star, mask)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let r = metrics(&[1.0, 2.0], &[2.0, 4.0], &[true; 2], RelDenominator::GroundTruth).unwrap();
        assert!((r.rmse - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.rel, 0.5);
        let r = metrics(&[1.0, 2.0], &[2.0, 4.0], &[true; 2], RelDenominator::Prediction).unwrap();
        assert_eq!(r.rel, 1.0);

        let r = metrics(&[1.0, 2.0, 4.0], &[1.0, 2.0, 5.0], &[true; 3], RelDenominator::GroundTruth).unwrap();
        assert_eq!(r.delta1, 2.0 / 3.0);
        assert_eq!(r.delta2, 1.0);
    }

    #[test]
    fn identical_maps_are_perfect() {
        let d = [0.5, 1.0, 7.0];
        let r = metrics(&d, &d, &[true; 3], RelDenominator::GroundTruth).unwrap();
        assert_eq!((r.rmse, r.rel, r.delta1, r.delta2, r.delta3), (0.0, 0.0, 1.0, 1.0, 1.0));
        assert_eq!(r.n_valid_pixels, 3);
    }

    #[test]
    fn mask_and_errors() {
        let r = metrics(&[1.0, 9.0], &[1.0, 0.0], &[true, false], RelDenominator::GroundTruth).unwrap();
        assert_eq!(r.n_valid_pixels, 1);
        assert!(metrics(&[1.0], &[1.0], &[false], RelDenominator::GroundTruth).is_err());
        assert!(metrics(&[1.0], &[1.0, 2.0], &[true], RelDenominator::GroundTruth).is_err());
        assert_eq!("prediction".parse::<RelDenominator>().unwrap(), RelDenominator::Prediction);
        assert!("gt".parse::<RelDenominator>().is_err());
    }

    #[test]
    fn accumulation_matches_concatenation() {
        let (a, b) = ([1.0, 2.0, 3.0], [1.5, 2.5, 2.0]);
        let mut acc = MetricAccumulator::new(RelDenominator::GroundTruth);
        acc.add(&a[..1], &b[..1], &[true]).unwrap();
        acc.add(&a[1..], &b[1..], &[true, true]).unwrap();
        let whole = metrics(&a, &b, &[true; 3], RelDenominator::GroundTruth).unwrap();
        let split = acc.report().unwrap();
        assert!((whole.rmse - split.rmse).abs() < 1e-15);
        assert_eq!(whole.n_valid_pixels, split.n_valid_pixels);
        assert!(whole.to_json().starts_with("{\"rmse\":"));
    }
}
