//! Quantizers for model states.
//!
//! Gradients and momentum use the uniform affine quantizer; weights use the
//! dense-and-sparse quantizer. [`StateCodec`] and [`WeightCodec`] pick between
//! those and a pass-through mode that stores values exactly, which exists to
//! separate algorithmic error from quantization error in tests.

mod affine;
mod dense_sparse;
mod sparse;

pub use affine::{
    compute_affine_params, dequantize, qmax, quantize, quantize_channelwise, AffineParams,
    QuantizedTensor, DEFAULT_BIT_WIDTH, MAX_BIT_WIDTH, MIN_BIT_WIDTH,
};
pub use dense_sparse::{
    check_sweep_fractions, compute_outlier_thresholds, decompose_dense_sparse, l2_distance, outliers_per_tail,
    reconstruct, DenseSparseWeight, Threshold, ThresholdRule,
};
pub use sparse::{SparseOutliers, INDEX_BYTES};

use serde::{Deserialize, Serialize};

use crate::error::{QftError, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_OUTLIER_FRACTION: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    #[default]
    Affine,
    /// Quantize and dequantize are the identity.
    PassThrough,
}

/// Encoder for gradients and momentum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StateCodec {
    pub mode: QuantMode,
    pub bit_width: u8,
}

impl Default for StateCodec {
    fn default() -> Self {
        Self {
            mode: QuantMode::Affine,
            bit_width: DEFAULT_BIT_WIDTH,
        }
    }
}

impl StateCodec {
    pub fn pass_through() -> Self {
        Self {
            mode: QuantMode::PassThrough,
            bit_width: DEFAULT_BIT_WIDTH,
        }
    }

    /// Channel-wise quantization with fresh params.
    pub fn encode<T: Real>(&self, x: Tensor<T>) -> Result<StoredState<T>> {
        match self.mode {
            QuantMode::Affine => Ok(StoredState::Quantized(quantize_channelwise(
                &x,
                self.bit_width,
            )?)),
            QuantMode::PassThrough => Ok(StoredState::Exact(x)),
        }
    }
}

/// A gradient or momentum tensor in its storage form.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredState<T = f32> {
    Quantized(QuantizedTensor<T>),
    Exact(Tensor<T>),
}

impl<T: Real> StoredState<T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            StoredState::Quantized(q) => q.shape(),
            StoredState::Exact(t) => t.shape(),
        }
    }

    pub fn decode(&self) -> Tensor<T> {
        match self {
            StoredState::Quantized(q) => q.dequantize(),
            StoredState::Exact(t) => t.clone(),
        }
    }

    /// `dst += decode(self)`.
    pub fn add_decoded_into(&self, dst: &mut Tensor<T>) -> Result<()> {
        match self {
            StoredState::Quantized(q) => q.add_dequantized_into(dst),
            StoredState::Exact(t) => {
                t.check_same_shape(dst, "add_decoded_into")?;
                for (d, &v) in dst.data_mut().iter_mut().zip(t.data()) {
                    *d += v;
                }
                Ok(())
            }
        }
    }

    pub fn storage_bytes(&self) -> usize {
        match self {
            StoredState::Quantized(q) => q.storage_bytes(),
            StoredState::Exact(t) => t.len() * T::BYTES,
        }
    }
}

/// Encoder for weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightCodec {
    pub mode: QuantMode,
    pub bit_width: u8,
    pub outlier_fraction: f64,
    pub rule: ThresholdRule,
}

impl Default for WeightCodec {
    fn default() -> Self {
        Self {
            mode: QuantMode::Affine,
            bit_width: DEFAULT_BIT_WIDTH,
            outlier_fraction: DEFAULT_OUTLIER_FRACTION,
            rule: ThresholdRule::Percentile,
        }
    }
}

impl WeightCodec {
    pub fn pass_through() -> Self {
        Self {
            mode: QuantMode::PassThrough,
            ..Self::default()
        }
    }

    pub fn state_codec(&self) -> StateCodec {
        StateCodec {
            mode: self.mode,
            bit_width: self.bit_width,
        }
    }

    /// Fresh thresholds at the configured fraction, then decomposition.
    pub fn encode<T: Real>(&self, w: Tensor<T>) -> Result<StoredWeight<T>> {
        match self.mode {
            QuantMode::Affine => Ok(StoredWeight::DenseSparse(DenseSparseWeight::quantize(
                &w,
                self.outlier_fraction,
                self.rule,
                self.bit_width,
            )?)),
            QuantMode::PassThrough => Ok(StoredWeight::Exact(w)),
        }
    }
}

/// A weight matrix in its storage form.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredWeight<T = f32> {
    DenseSparse(DenseSparseWeight<T>),
    Exact(Tensor<T>),
}

impl<T: Real> StoredWeight<T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            StoredWeight::DenseSparse(d) => d.shape(),
            StoredWeight::Exact(t) => t.shape(),
        }
    }

    /// Floating-point view of the weight; the caller owns (and drops) it.
    pub fn reconstruct(&self) -> Tensor<T> {
        match self {
            StoredWeight::DenseSparse(d) => d.reconstruct(),
            StoredWeight::Exact(t) => t.clone(),
        }
    }

    /// Store `w` against the cached thresholds.
    pub fn requantize(&mut self, w: Tensor<T>) -> Result<()> {
        if w.shape() != self.shape() {
            return Err(QftError::shape(
                "StoredWeight::requantize",
                format!("{:?}", self.shape()),
                format!("{:?}", w.shape()),
            ));
        }
        match self {
            StoredWeight::DenseSparse(d) => *d = d.requantize(&w)?,
            StoredWeight::Exact(t) => *t = w,
        }
        Ok(())
    }

    /// Recompute thresholds from the current weight and re-decompose.
    pub fn refresh_thresholds(&mut self, p: f64, rule: ThresholdRule) -> Result<()> {
        if let StoredWeight::DenseSparse(d) = self {
            let w = d.reconstruct();
            *d = DenseSparseWeight::quantize(&w, p, rule, d.bit_width())?;
        }
        Ok(())
    }

    pub fn as_dense_sparse(&self) -> Option<&DenseSparseWeight<T>> {
        match self {
            StoredWeight::DenseSparse(d) => Some(d),
            StoredWeight::Exact(_) => None,
        }
    }

    /// Model-state bytes: payload, channel params and sparse arrays (or the
    /// full fp matrix in pass-through mode).
    pub fn storage_bytes(&self) -> usize {
        match self {
            StoredWeight::DenseSparse(d) => d.storage_bytes(),
            StoredWeight::Exact(t) => t.len() * T::BYTES,
        }
    }

    pub fn threshold_bytes(&self) -> usize {
        self.as_dense_sparse().map_or(0, |d| d.threshold_bytes())
    }
}
