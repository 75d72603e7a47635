//! Summary statistics of a weight tensor's value distribution.

use crate::error::{QftError, Result};
use crate::tensor::{Real, Tensor};

/// Lower and upper quantiles bounding the central mass.
pub const CENTRAL_LO: f64 = 0.005;
pub const CENTRAL_HI: f64 = 0.995;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistributionStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub stdev: f64,
    /// Width of the interval holding the central 99% of values.
    pub central_width: f64,
    /// Full range over central width; 1 for a constant tensor.
    pub range_ratio: f64,
    /// Entries farther than `k` standard deviations from the mean.
    pub outlier_count: usize,
    pub k: f64,
}

impl DistributionStats {
    /// Fraction of the full range the central 99% occupies.
    pub fn central_fraction(&self) -> f64 {
        1.0 / self.range_ratio
    }

    pub fn report(&self) -> String {
        format!(
            "count={}\nmin={:.6e}\nmax={:.6e}\nmean={:.6e}\nstdev={:.6e}\n\
             central_width={:.6e}\nrange_ratio={:.4}\ncentral_fraction={:.6}\n\
             outliers_beyond_{}sd={}\n",
            self.count,
            self.min,
            self.max,
            self.mean,
            self.stdev,
            self.central_width,
            self.range_ratio,
            self.central_fraction(),
            self.k,
            self.outlier_count,
        )
    }
}

/// Linearly interpolated quantile of sorted values.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn distribution_stats<T: Real>(x: &Tensor<T>, k: f64) -> Result<DistributionStats> {
    if x.is_empty() {
        return Err(QftError::Empty("distribution_stats"));
    }
    if !(k > 0.0) {
        return Err(QftError::InvalidArgument(format!("k must be positive, got {k}")));
    }
    let mut v: Vec<f64> = x.data().iter().map(|t| t.as_f64()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let stdev = (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    let min = v[0];
    let max = v[v.len() - 1];
    let central_width = quantile(&v, CENTRAL_HI) - quantile(&v, CENTRAL_LO);
    let range_ratio = if central_width > 0.0 {
        (max - min) / central_width
    } else {
        1.0
    };
    let outlier_count = if stdev > 0.0 {
        v.iter().filter(|a| (*a - mean).abs() > k * stdev).count()
    } else {
        0
    };
    Ok(DistributionStats {
        count: v.len(),
        min,
        max,
        mean,
        stdev,
        central_width,
        range_ratio,
        outlier_count,
        k,
    })
}
