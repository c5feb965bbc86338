//! Paired two-sided t-test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::MetricsError;

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub mean_delta: f64,
    pub significant: bool,
}

/// Paired t-test on `a[i] - b[i]`. Zero-variance deltas give p = 1 when
/// their mean is zero and p = 0 (with an infinite t) otherwise.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    paired_ttest_at(a, b, DEFAULT_ALPHA)
}

pub fn paired_ttest_at(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples(n));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let (t, p) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (var.sqrt() / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
        let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
        (t, p)
    };
    Ok(TTest { t, df, p, mean_delta: mean, significant: p <= alpha })
}
