//! Small numeric helpers shared across modules.

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (denominator n).
pub fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64;
    var.max(0.0).sqrt()
}

/// Least-squares affine fit of `values` against indices 0..n; returns
/// (intercept, slope). A single point fits as a constant.
pub fn ols_fit(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n < 2 {
        return (values.first().copied().unwrap_or(0.0), 0.0);
    }
    let nf = n as f64;
    let sum_t = nf * (nf - 1.0) / 2.0;
    let sum_tt = nf * (nf - 1.0) * (2.0 * nf - 1.0) / 6.0;
    let sum_v: f64 = values.iter().sum();
    let sum_tv: f64 = values.iter().enumerate().map(|(t, v)| t as f64 * v).sum();
    let denom = sum_tt - sum_t * sum_t / nf;
    if denom == 0.0 {
        return (mean(values), 0.0);
    }
    let slope = (sum_tv - sum_t * sum_v / nf) / denom;
    let intercept = (sum_v - slope * sum_t) / nf;
    (intercept, slope)
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
