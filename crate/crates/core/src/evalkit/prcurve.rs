//! Threshold-swept precision/recall curves and trapezoidal AUPRC.

use serde::Serialize;

use super::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSweep {
    /// Every distinct observed score, which makes the curve exact for the sample.
    Observed,
    /// `steps + 1` evenly spaced thresholds from `hi` down to `lo`.
    Grid { lo: f64, hi: f64, steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Points run from the `(recall 0, precision 1)` anchor at threshold `+∞`
/// down through decreasing thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub auprc: f64,
}

impl PRCurve {
    /// Trapezoidal area under the stored `(recall, precision)` points.
    pub fn trapezoid(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].recall - w[0].recall) * (w[0].precision + w[1].precision) / 2.0).sum()
    }
}

/// Samples are `(score, is_positive)`. A sample is predicted positive at
/// threshold `t` when `score ≥ t`; precision is 1 when nothing is predicted.
pub fn pr_curve(samples: &[(f64, bool)], sweep: ThresholdSweep) -> Result<PRCurve> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    if samples.iter().any(|(s, _)| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore("pr_curve".into(), "sample".into()));
    }
    let mut sorted: Vec<(f64, bool)> = samples.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    // positives among the first i samples
    let mut tp_prefix = Vec::with_capacity(sorted.len() + 1);
    tp_prefix.push(0usize);
    for &(_, positive) in &sorted {
        tp_prefix.push(tp_prefix.last().unwrap() + usize::from(positive));
    }
    let total_pos = *tp_prefix.last().unwrap();
    if total_pos == 0 || total_pos == sorted.len() {
        return Err(EvalError::OneClass);
    }

    let thresholds: Vec<f64> = match sweep {
        ThresholdSweep::Observed => {
            let mut t: Vec<f64> = sorted.iter().map(|(s, _)| *s).collect();
            t.dedup();
            t
        }
        ThresholdSweep::Grid { lo, hi, steps } => {
            if !(lo.is_finite() && hi.is_finite() && hi > lo && steps >= 1) {
                return Err(EvalError::InvalidSweep(format!(
                    "threshold grid needs finite lo < hi and steps ≥ 1, got [{lo}, {hi}] x {steps}"
                )));
            }
            let step = (hi - lo) / steps as f64;
            (0..=steps).map(|i| if i == steps { lo } else { hi - i as f64 * step }).collect()
        }
    };

    let mut points = Vec::with_capacity(thresholds.len() + 1);
    let mut area = 0.0;
    let (mut prev_tp, mut prev_precision) = (0usize, 1.0);
    points.push(PRPoint { threshold: f64::INFINITY, precision: 1.0, recall: 0.0 });
    for threshold in thresholds {
        let predicted = sorted.partition_point(|(s, _)| *s >= threshold);
        let tp = tp_prefix[predicted];
        let precision = if predicted == 0 { 1.0 } else { tp as f64 / predicted as f64 };
        // accumulate in units of true positives so a perfect curve sums to exactly P
        area += (tp - prev_tp) as f64 * (precision + prev_precision) / 2.0;
        points.push(PRPoint { threshold, precision, recall: tp as f64 / total_pos as f64 });
        prev_tp = tp;
        prev_precision = precision;
    }
    Ok(PRCurve { points, auprc: area / total_pos as f64 })
}
