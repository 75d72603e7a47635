//! Dense-and-sparse weight quantizer.
//!
//! A weight matrix is split into a dense part holding every value inside the
//! per-channel thresholds `[t_min, t_max]`, stored as affine-quantized
//! integers, and a CSR sparse part holding the outliers in full precision.
//! Outlier positions keep the zero-point in the dense payload so their dense
//! contribution dequantizes to exactly zero.

use serde::{Deserialize, Serialize};

use super::affine::{check_bit_width, qmax, quantize_value, AffineParams, QuantizedTensor};
use super::sparse::{CsrBuilder, SparseOutliers};
use crate::error::{QftError, Result};
use crate::tensor::{minmax, Real, Tensor};

/// Inclusive dense range of one channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Threshold<T = f32> {
    pub min: T,
    pub max: T,
}

impl<T: Real> Threshold<T> {
    #[inline]
    pub fn is_outlier(&self, v: T) -> bool {
        v < self.min || v > self.max
    }
}

/// How the outlier fraction is turned into thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// `p` is the fraction of entries treated as outliers, `p/2` per tail,
    /// taken as order statistics of each channel.
    #[default]
    Percentile,
    /// `p` is a fraction of the channel's `[min, max]` span, trimmed
    /// `p/2` from each end.
    RangeFraction,
}

pub(crate) fn check_fraction(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(QftError::InvalidArgument(format!(
            "outlier fraction {p} outside [0, 1)"
        )));
    }
    Ok(())
}

/// Fractions for a sweep: each valid, strictly increasing, non-empty.
pub fn check_sweep_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(QftError::Empty("sweep fractions"));
    }
    for &p in fractions {
        check_fraction(p)?;
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(QftError::InvalidArgument(
            "sweep fractions must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Number of entries per tail the percentile rule isolates in a channel of
/// `n` values.
pub fn outliers_per_tail(n: usize, p: f64) -> usize {
    if n == 0 {
        return 0;
    }
    let k = (n as f64 * p / 2.0).round() as usize;
    k.min((n - 1) / 2)
}

pub fn compute_outlier_thresholds<T: Real>(
    w: &Tensor<T>,
    p: f64,
    rule: ThresholdRule,
) -> Result<Vec<Threshold<T>>> {
    check_fraction(p)?;
    if w.is_empty() {
        return Err(QftError::Empty("compute_outlier_thresholds"));
    }
    let mut scratch = Vec::with_capacity(w.cols());
    Ok(w.rows_iter()
        .map(|row| match rule {
            ThresholdRule::Percentile => {
                let k = outliers_per_tail(row.len(), p);
                if k == 0 {
                    let (min, max) = minmax(row);
                    return Threshold { min, max };
                }
                scratch.clear();
                scratch.extend_from_slice(row);
                let n = scratch.len();
                let (_, &mut min, _) = scratch.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
                let (_, &mut max, _) =
                    scratch.select_nth_unstable_by(n - 1 - k, |a, b| a.total_cmp(b));
                Threshold { min, max }
            }
            ThresholdRule::RangeFraction => {
                let (lo, hi) = minmax(row);
                let trim = (hi - lo) * T::lit(p / 2.0);
                Threshold {
                    min: lo + trim,
                    max: hi - trim,
                }
            }
        })
        .collect())
}

/// Dense params for every channel, derived from the thresholds alone.
fn dense_params<T: Real>(thresholds: &[Threshold<T>], bit_width: u8) -> AffineParams<T> {
    let (scales, zero_points) = thresholds
        .iter()
        .map(|t| AffineParams::from_range(t.min, t.max, bit_width))
        .unzip();
    AffineParams {
        scales,
        zero_points,
        bit_width,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSparseWeight<T = f32> {
    dense: QuantizedTensor<T>,
    sparse: SparseOutliers<T>,
    thresholds: Vec<Threshold<T>>,
    outlier_fraction: f64,
}

/// Split `w` against per-channel thresholds and quantize the dense part.
pub fn decompose_dense_sparse<T: Real>(
    w: &Tensor<T>,
    thresholds: &[Threshold<T>],
    bit_width: u8,
    outlier_fraction: f64,
) -> Result<DenseSparseWeight<T>> {
    check_bit_width(bit_width)?;
    check_fraction(outlier_fraction)?;
    if thresholds.len() != w.rows() {
        return Err(QftError::shape(
            "decompose_dense_sparse",
            format!("{} thresholds", w.rows()),
            thresholds.len(),
        ));
    }
    if let Some(r) = thresholds.iter().position(|t| !(t.min <= t.max)) {
        return Err(QftError::InvalidArgument(format!(
            "threshold for channel {r} has t_min > t_max"
        )));
    }
    let params = dense_params(thresholds, bit_width);
    split(w, thresholds.to_vec(), params, outlier_fraction)
}

fn split<T: Real>(
    w: &Tensor<T>,
    thresholds: Vec<Threshold<T>>,
    params: AffineParams<T>,
    outlier_fraction: f64,
) -> Result<DenseSparseWeight<T>> {
    let (rows, cols) = w.shape();
    let top = qmax(params.bit_width);
    let mut payload = Vec::with_capacity(w.len());
    let mut csr = CsrBuilder::new(rows, cols);
    for (r, row) in w.rows_iter().enumerate() {
        let (s, z) = params.channel(r);
        let t = thresholds[r];
        for (c, &v) in row.iter().enumerate() {
            if t.is_outlier(v) {
                csr.push(c, v);
                payload.push(z as u8);
            } else {
                payload.push(quantize_value(v, s, z, top));
            }
        }
        csr.end_row();
    }
    Ok(DenseSparseWeight {
        dense: QuantizedTensor::from_parts(rows, cols, payload, params)?,
        sparse: csr.finish(),
        thresholds,
        outlier_fraction,
    })
}

impl<T: Real> DenseSparseWeight<T> {
    /// Thresholds at fraction `p` followed by decomposition.
    pub fn quantize(w: &Tensor<T>, p: f64, rule: ThresholdRule, bit_width: u8) -> Result<Self> {
        let thresholds = compute_outlier_thresholds(w, p, rule)?;
        decompose_dense_sparse(w, &thresholds, bit_width, p)
    }

    /// Re-split `w` against the cached thresholds and dense params. Entries
    /// may move between the dense and sparse parts.
    pub fn requantize(&self, w: &Tensor<T>) -> Result<Self> {
        if w.shape() != self.shape() {
            return Err(QftError::shape(
                "requantize",
                format!("{:?}", self.shape()),
                format!("{:?}", w.shape()),
            ));
        }
        split(
            w,
            self.thresholds.clone(),
            self.dense.params().clone(),
            self.outlier_fraction,
        )
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        let mut w = self.dense.dequantize();
        self.sparse.scatter_into(&mut w);
        w
    }

    pub fn from_parts(
        dense: QuantizedTensor<T>,
        sparse: SparseOutliers<T>,
        thresholds: Vec<Threshold<T>>,
        outlier_fraction: f64,
    ) -> Result<Self> {
        if dense.shape() != sparse.shape() || thresholds.len() != dense.shape().0 {
            return Err(QftError::shape(
                "DenseSparseWeight",
                format!("{:?}", dense.shape()),
                format!("{:?} / {} thresholds", sparse.shape(), thresholds.len()),
            ));
        }
        sparse.validate()?;
        check_fraction(outlier_fraction)?;
        Ok(Self {
            dense,
            sparse,
            thresholds,
            outlier_fraction,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.dense.shape()
    }

    pub fn dense(&self) -> &QuantizedTensor<T> {
        &self.dense
    }

    pub fn sparse(&self) -> &SparseOutliers<T> {
        &self.sparse
    }

    pub fn thresholds(&self) -> &[Threshold<T>] {
        &self.thresholds
    }

    pub fn outlier_fraction(&self) -> f64 {
        self.outlier_fraction
    }

    pub fn bit_width(&self) -> u8 {
        self.dense.bit_width()
    }

    /// Dense payload, channel params and CSR arrays.
    pub fn storage_bytes(&self) -> usize {
        self.dense.storage_bytes() + self.sparse.storage_bytes()
    }

    /// Bytes of the cached per-channel thresholds.
    pub fn threshold_bytes(&self) -> usize {
        self.thresholds.len() * 2 * T::BYTES
    }
}

pub fn reconstruct<T: Real>(dsw: &DenseSparseWeight<T>) -> Tensor<T> {
    dsw.reconstruct()
}

/// Euclidean distance between two tensors, accumulated in f64.
pub fn l2_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.check_same_shape(b, "l2_distance")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt())
}
