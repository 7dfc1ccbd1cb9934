use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::stats::{mean, population_variance, sample_variance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TTestResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!(
            "each sample needs at least two values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::invalid("t-test samples must be finite"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (sample_variance(a) / na, sample_variance(b) / nb);
    let se2 = va + vb;
    if se2 <= 0.0 {
        return Err(Error::invalid("both samples have zero variance"));
    }
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
    };
    Ok(TTestResult {
        t,
        df,
        p,
        n_a: a.len(),
        n_b: b.len(),
    })
}

/// Mean over all sliding windows of the within-window population variance.
pub fn stability_metric(rewards: &[f64], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::invalid("window must be >= 1"));
    }
    if rewards.len() < window {
        return Err(Error::invalid(format!(
            "series of length {} is shorter than the window {window}",
            rewards.len()
        )));
    }
    let vars: Vec<f64> = rewards.windows(window).map(population_variance).collect();
    Ok(mean(&vars))
}
