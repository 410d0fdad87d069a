//! Paired Student t-test over per-trial accuracies.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::episodes::TrialResult;
use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct TTestReport {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    /// Two-sided.
    pub p_value: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on `a[i] − b[i]`.
///
/// Zero variance of the differences gives `t = ±∞, p = 0` when their mean is
/// nonzero, and `t = 0, p = 1` when it is zero.
pub fn paired_ttest(a: &TrialResult, b: &TrialResult) -> Result<TTestReport> {
    paired_ttest_samples(&a.accuracies, &b.accuracies)
}

pub fn paired_ttest_samples(a: &[f64], b: &[f64]) -> Result<TTestReport> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_ttest", (a.len(), 1), (b.len(), 1)));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Config("a paired t-test needs at least two trials".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    // Identical differences have zero variance even when `mean` rounds.
    let constant = diffs.iter().all(|&d| d == diffs[0]);
    let var = if constant {
        0.0
    } else {
        diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    };
    let df = n - 1;

    let (t, p) = if var == 0.0 {
        if diffs[0] == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(diffs[0]), 0.0)
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df as f64)
            .map_err(|e| Error::Config(format!("t distribution: {e}")))?;
        let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
        (t, p)
    };
    Ok(TTestReport {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        significant: p < SIGNIFICANCE_LEVEL,
    })
}
