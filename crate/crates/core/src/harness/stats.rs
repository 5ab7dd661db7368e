use rand::Rng;
use serde::Serialize;

use crate::rng::stream;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    percentile(&s, 0.5)
}

/// Linearly interpolated quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bootstrap distribution of `statistic`, sorted ascending.
pub fn bootstrap(
    values: &[f64],
    statistic: fn(&[f64]) -> f64,
    resamples: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = stream(seed);
    let n = values.len();
    let mut buf = vec![0.0; n];
    let mut out: Vec<f64> = (0..resamples)
        .map(|_| {
            for slot in buf.iter_mut() {
                *slot = values[rng.random_range(0..n)];
            }
            statistic(&buf)
        })
        .collect();
    out.sort_by(f64::total_cmp);
    out
}

/// Percentile interval at `level`, widened if needed to contain the point
/// estimate.
pub fn bootstrap_interval(
    values: &[f64],
    statistic: fn(&[f64]) -> f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> [f64; 2] {
    let point = statistic(values);
    if values.len() < 2 {
        return [point, point];
    }
    let dist = bootstrap(values, statistic, resamples, seed);
    let tail = 0.5 * (1.0 - level);
    [
        percentile(&dist, tail).min(point),
        percentile(&dist, 1.0 - tail).max(point),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricStats {
    pub n: usize,
    pub mean: f64,
    pub mean_ci: [f64; 2],
    pub median: f64,
    pub median_ci: [f64; 2],
    pub rmse: f64,
    pub rmse_ci: [f64; 2],
}

/// Mean, median and RMSE with 95% bootstrap intervals; `None` without data.
pub fn summarize(values: &[f64], seed: u64) -> Option<MetricStats> {
    if values.is_empty() {
        return None;
    }
    let ci = |f: fn(&[f64]) -> f64, k: u64| {
        bootstrap_interval(
            values,
            f,
            BOOTSTRAP_RESAMPLES,
            0.95,
            crate::rng::derive_seed(seed, &[k]),
        )
    };
    Some(MetricStats {
        n: values.len(),
        mean: mean(values),
        mean_ci: ci(mean, 0),
        median: median(values),
        median_ci: ci(median, 1),
        rmse: rms(values),
        rmse_ci: ci(rms, 2),
    })
}
