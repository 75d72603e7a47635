//! Uniform affine quantizer.
//!
//! `q = clip(round(x / s) + z, 0, 2^b - 1)` and `x̂ = s · (q - z)`, with the
//! scale and zero-point taken from the arithmetic bounds of each channel.

use crate::error::{QftError, Result};
use crate::tensor::{minmax, Real, Tensor};

pub const MIN_BIT_WIDTH: u8 = 2;
pub const MAX_BIT_WIDTH: u8 = 8;
pub const DEFAULT_BIT_WIDTH: u8 = 8;

/// Scale used for a channel whose (zero-extended) range is empty, as a
/// multiple of `max(|min|, 1)`.
const DEGENERATE_SCALE: f64 = 1.0 / (1u64 << 20) as f64;

pub(crate) fn check_bit_width(bit_width: u8) -> Result<()> {
    if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&bit_width) {
        return Err(QftError::InvalidArgument(format!(
            "bit width {bit_width} outside [{MIN_BIT_WIDTH}, {MAX_BIT_WIDTH}]"
        )));
    }
    Ok(())
}

#[inline]
pub fn qmax(bit_width: u8) -> i32 {
    (1i32 << bit_width) - 1
}

/// Per-channel scale and zero-point. A single entry applies to every row.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T = f32> {
    pub scales: Vec<T>,
    pub zero_points: Vec<i32>,
    pub bit_width: u8,
}

impl<T: Real> AffineParams<T> {
    /// Parameters covering `[lo, hi]`. The range is widened to include zero
    /// so that the zero-point lands inside `[0, 2^b - 1]` and `0.0` is exactly
    /// representable.
    pub fn from_range(lo: T, hi: T, bit_width: u8) -> (T, i32) {
        let top = qmax(bit_width);
        let lo = lo.min(T::zero());
        let hi = hi.max(T::zero());
        let span = hi - lo;
        let scale = span / T::lit(top as f64);
        if !(span > T::zero()) || !(scale > T::min_positive_value()) || !scale.is_finite() {
            let s = lo.abs().max(T::one()) * T::lit(DEGENERATE_SCALE);
            return (s, 0);
        }
        let z = (-lo / scale).round().as_f64();
        (scale, (z as i32).clamp(0, top))
    }

    pub fn channels(&self) -> usize {
        self.scales.len()
    }

    #[inline]
    pub fn channel(&self, row: usize) -> (T, i32) {
        let i = if self.scales.len() == 1 { 0 } else { row };
        (self.scales[i], self.zero_points[i])
    }

    /// Bytes held by the parameters: one scale and one `i32` zero-point per
    /// channel.
    pub fn storage_bytes(&self) -> usize {
        self.scales.len() * (T::BYTES + 4)
    }

    fn check_rows(&self, rows: usize) -> Result<()> {
        let n = self.scales.len();
        if n != 1 && n != rows {
            return Err(QftError::shape(
                "quantize",
                format!("1 or {rows} channels"),
                format!("{n} channels"),
            ));
        }
        Ok(())
    }
}

/// Scale and zero-point from the min/max of `values`, per row when
/// `channel_wise`, otherwise one pair for the whole tensor.
pub fn compute_affine_params<T: Real>(
    values: &Tensor<T>,
    bit_width: u8,
    channel_wise: bool,
) -> Result<AffineParams<T>> {
    check_bit_width(bit_width)?;
    if values.is_empty() {
        return Err(QftError::Empty("compute_affine_params"));
    }
    let ranges = if channel_wise {
        let (mins, maxs) = values.channel_minmax()?;
        mins.into_iter().zip(maxs).collect::<Vec<_>>()
    } else {
        vec![minmax(values.data())]
    };
    let (scales, zero_points) = ranges
        .into_iter()
        .map(|(lo, hi)| AffineParams::from_range(lo, hi, bit_width))
        .unzip();
    Ok(AffineParams {
        scales,
        zero_points,
        bit_width,
    })
}

#[inline]
pub(crate) fn quantize_value<T: Real>(x: T, scale: T, zero_point: i32, top: i32) -> u8 {
    let q = (x / scale).round() + T::lit(zero_point as f64);
    let q = q.max(T::zero()).min(T::lit(top as f64));
    // NaN input maps to 0 via the saturating cast
    q.as_f64() as u8
}

#[inline]
pub(crate) fn dequantize_value<T: Real>(q: u8, scale: T, zero_point: i32) -> T {
    scale * T::lit((q as i32 - zero_point) as f64)
}

/// Integer payload plus per-channel affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T = f32> {
    rows: usize,
    cols: usize,
    values: Vec<u8>,
    params: AffineParams<T>,
}

impl<T: Real> QuantizedTensor<T> {
    pub fn from_parts(
        rows: usize,
        cols: usize,
        values: Vec<u8>,
        params: AffineParams<T>,
    ) -> Result<Self> {
        check_bit_width(params.bit_width)?;
        if values.len() != rows * cols {
            return Err(QftError::shape("QuantizedTensor", rows * cols, values.len()));
        }
        params.check_rows(rows)?;
        let top = qmax(params.bit_width);
        if let Some(bad) = values.iter().find(|&&v| v as i32 > top) {
            return Err(QftError::InvalidArgument(format!(
                "payload value {bad} exceeds {top}"
            )));
        }
        if let Some(z) = params.zero_points.iter().find(|&&z| z < 0 || z > top) {
            return Err(QftError::InvalidArgument(format!("zero-point {z} out of range")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            params,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn params(&self) -> &AffineParams<T> {
        &self.params
    }

    pub fn bit_width(&self) -> u8 {
        self.params.bit_width
    }

    pub fn dequantize(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            let (s, z) = self.params.channel(r);
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            data.extend(row.iter().map(|&q| dequantize_value(q, s, z)));
        }
        Tensor::from_vec(self.rows, self.cols, data).expect("shape checked at construction")
    }

    /// `dst += dequantize(self)` without a temporary.
    pub fn add_dequantized_into(&self, dst: &mut Tensor<T>) -> Result<()> {
        if dst.shape() != self.shape() {
            return Err(QftError::shape(
                "add_dequantized_into",
                format!("{:?}", self.shape()),
                format!("{:?}", dst.shape()),
            ));
        }
        for r in 0..self.rows {
            let (s, z) = self.params.channel(r);
            let src = &self.values[r * self.cols..(r + 1) * self.cols];
            for (d, &q) in dst.row_mut(r).iter_mut().zip(src) {
                *d += dequantize_value(q, s, z);
            }
        }
        Ok(())
    }

    /// Payload bytes: `ceil(b / 8)` per element, i.e. one byte for b ≤ 8.
    pub fn payload_bytes(&self) -> usize {
        self.values.len() * (self.params.bit_width as usize).div_ceil(8)
    }

    pub fn storage_bytes(&self) -> usize {
        self.payload_bytes() + self.params.storage_bytes()
    }
}

pub fn quantize<T: Real>(x: &Tensor<T>, params: &AffineParams<T>) -> Result<QuantizedTensor<T>> {
    check_bit_width(params.bit_width)?;
    params.check_rows(x.rows())?;
    let top = qmax(params.bit_width);
    let mut values = Vec::with_capacity(x.len());
    for (r, row) in x.rows_iter().enumerate() {
        let (s, z) = params.channel(r);
        values.extend(row.iter().map(|&v| quantize_value(v, s, z, top)));
    }
    Ok(QuantizedTensor {
        rows: x.rows(),
        cols: x.cols(),
        values,
        params: params.clone(),
    })
}

pub fn dequantize<T: Real>(q: &QuantizedTensor<T>) -> Tensor<T> {
    q.dequantize()
}

/// Channel-wise params from `x` followed by quantization.
pub fn quantize_channelwise<T: Real>(x: &Tensor<T>, bit_width: u8) -> Result<QuantizedTensor<T>> {
    let params = compute_affine_params(x, bit_width, true)?;
    quantize(x, &params)
}
