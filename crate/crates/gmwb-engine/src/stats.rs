//! Statistical helpers: batch-means errors, the exact one-step variance
//! transition law, and a Kolmogorov-Smirnov test against it.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Deterministic pairwise sum. The split order depends only on the slice
/// length, so the result is identical no matter how the values were
/// produced, and rounding error grows logarithmically instead of linearly.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Near-equal contiguous partition of `0..n` into `batches` ranges.
fn batch_bounds(n: usize, batches: usize, b: usize) -> (usize, usize) {
    (b * n / batches, (b + 1) * n / batches)
}

/// Means of `batches` contiguous blocks of `values`, in order. Block sizes
/// differ by at most one.
pub fn batch_means(values: &[f64], batches: usize) -> Vec<f64> {
    assert!(batches >= 2, "need at least two batches");
    assert!(
        values.len() >= batches,
        "need at least one value per batch"
    );
    (0..batches)
        .map(|b| {
            let (lo, hi) = batch_bounds(values.len(), batches, b);
            pairwise_sum(&values[lo..hi]) / (hi - lo) as f64
        })
        .collect()
}

/// Full-sample mean of `values` with a batch-means standard error: the
/// spread of contiguous block means measures the Monte Carlo error without
/// assuming the values are independent.
pub fn mean_with_batch_se(values: &[f64], batches: usize) -> (f64, f64) {
    let mean = pairwise_sum(values) / values.len() as f64;
    (mean, batch_se(&batch_means(values, batches)))
}

/// Standard error of the mean inferred from a set of batch means.
pub fn batch_se(batch_vals: &[f64]) -> f64 {
    let b = batch_vals.len() as f64;
    let center = pairwise_sum(batch_vals) / b;
    let devs: Vec<f64> = batch_vals.iter().map(|m| (m - center) * (m - center)).collect();
    (pairwise_sum(&devs) / (b * (b - 1.0))).sqrt()
}

/// Chi-squared CDF with `dof` degrees of freedom.
pub fn chi_squared_cdf(dof: f64, x: f64) -> f64 {
    ChiSquared::new(dof)
        .expect("positive degrees of freedom")
        .cdf(x)
}

/// Noncentral chi-squared CDF, evaluated as a Poisson mixture of central
/// chi-squared CDFs. The mixture is summed until its remaining mass is
/// below 1e-16, which bounds the truncation error by the same amount.
pub fn noncentral_chi_squared_cdf(dof: f64, noncentrality: f64, x: f64) -> f64 {
    if noncentrality == 0.0 {
        return chi_squared_cdf(dof, x);
    }
    let half = 0.5 * noncentrality;
    let mut weight = (-half).exp();
    let mut covered = weight;
    let mut sum = weight * chi_squared_cdf(dof, x);
    let mut j = 0usize;
    while 1.0 - covered > 1e-16 && j < 10_000 {
        weight *= half / (j + 1) as f64;
        covered += weight;
        j += 1;
        sum += weight * chi_squared_cdf(dof + 2.0 * j as f64, x);
    }
    sum
}

/// Exact one-step law of the simulated variance: starting from `v`, the
/// next value is `sigma^2` times a noncentral chi-squared variable with `n`
/// degrees of freedom and noncentrality `psi^2 v / sigma^2`. This is the
/// CDF of that law at `x`.
pub fn variance_transition_cdf(n: usize, psi: f64, sigma: f64, v: f64, x: f64) -> f64 {
    let s2 = sigma * sigma;
    noncentral_chi_squared_cdf(n as f64, psi * psi * v / s2, x / s2)
}

/// Kolmogorov-Smirnov statistic of `samples` (sorted in place) against a
/// continuous CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).expect("samples must be comparable"));
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic Kolmogorov-Smirnov p-value for a statistic `d` from `n`
/// samples, with the usual finite-sample scaling correction.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sqrt_n = (n as f64).sqrt();
    let x = d * (sqrt_n + 0.12 + 0.11 / sqrt_n);
    kolmogorov_tail(x)
}

fn kolmogorov_tail(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * x * x).exp();
        let signed = if k % 2 == 1 { term } else { -term };
        sum += signed;
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
