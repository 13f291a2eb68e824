//! Binned similarity distributions and their symmetric KL divergence.

use super::{EvalError, Result};

pub const DEFAULT_BINS: usize = 100;
/// Mass given to empty bins before taking logarithms.
pub const SMOOTHING: f64 = 1e-10;

/// Equal-width histogram over `[lo, hi]`, normalized to unit mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn from_mass(lo: f64, hi: f64, mass: Vec<f64>) -> Result<Self> {
        check_layout(lo, hi, mass.len())?;
        if mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(EvalError::InvalidHistogram("mass must be finite and non-negative".into()));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(EvalError::InvalidHistogram(format!("mass sums to {total}")));
        }
        Ok(Self { lo, hi, mass })
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    /// Empty bins raised to [`SMOOTHING`], then renormalized.
    pub fn smoothed(&self) -> Vec<f64> {
        let raised: Vec<f64> = self.mass.iter().map(|&m| if m == 0.0 { SMOOTHING } else { m }).collect();
        let total: f64 = raised.iter().sum();
        raised.into_iter().map(|m| m / total).collect()
    }

    fn same_layout(&self, other: &Self) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.bins() == other.bins()
    }
}

fn check_layout(lo: f64, hi: f64, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(EvalError::InvalidHistogram("bins must be at least 1".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(EvalError::InvalidHistogram(format!("bad range [{lo}, {hi}]")));
    }
    Ok(())
}

/// Values outside `[lo, hi]` land in the boundary bins.
pub fn similarity_histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    check_layout(lo, hi, bins)?;
    if values.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if !v.is_finite() {
            return Err(EvalError::InvalidHistogram("non-finite value".into()));
        }
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    Ok(Histogram { lo, hi, mass: counts.into_iter().map(|c| c as f64 / n).collect() })
}

/// `KL(p‖q) + KL(q‖p)` with natural logarithms, on smoothed masses.
pub fn symmetric_kl(p: &Histogram, q: &Histogram) -> Result<f64> {
    if !p.same_layout(q) {
        return Err(EvalError::LayoutMismatch);
    }
    let (ps, qs) = (p.smoothed(), q.smoothed());
    // Σ p ln(p/q) + q ln(q/p) = Σ (p − q) ln(p/q); symmetric term by term
    Ok(ps.iter().zip(&qs).map(|(&a, &b)| (a - b) * (a.ln() - b.ln())).sum())
}
