//! Memory accounting for model states.
//!
//! Two modes share one [`MemoryProfile`] type: [`analytic_profile`] computes
//! the bytes each training method needs for `N` parameters, and
//! [`measured_profile`] counts the bytes the engine's own structures hold.
//! The module also carries the threshold sweep and distribution statistics
//! used to pick and justify the outlier fraction.

pub mod sources;
mod stats;
pub mod transient;

pub use sources::{heavy_tailed_tensor, load_tensor, normal_tensor};
pub use stats::{distribution_stats, DistributionStats};

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{QftError, Result};
use crate::gradflow::GradientStack;
use crate::network::{Model, SavedTensors};
use crate::optim::{AdamState, FpLionState, LionState};
use crate::quant::{
    check_sweep_fractions, outliers_per_tail, DenseSparseWeight, ThresholdRule, INDEX_BYTES,
};
use crate::tensor::{Real, Tensor};

pub const GIB: f64 = (1u64 << 30) as f64;
pub const GB: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Adam,
    AdamMixed,
    Bitsandbytes,
    Lion,
    Qft,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Adam,
        Method::AdamMixed,
        Method::Bitsandbytes,
        Method::Lion,
        Method::Qft,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Adam => "adam",
            Method::AdamMixed => "adam-mixed",
            Method::Bitsandbytes => "bitsandbytes",
            Method::Lion => "lion",
            Method::Qft => "qft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = QftError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| QftError::InvalidArgument(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Units {
    #[default]
    GiB,
    GB,
}

impl Units {
    pub fn divisor(self) -> f64 {
        match self {
            Units::GiB => GIB,
            Units::GB => GB,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Units::GiB => "GiB",
            Units::GB => "GB",
        }
    }
}

impl FromStr for Units {
    type Err = QftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gib" => Ok(Units::GiB),
            "gb" => Ok(Units::GB),
            _ => Err(QftError::InvalidArgument(format!("unknown unit '{s}'"))),
        }
    }
}

/// Bytes per model-state category for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryProfile {
    pub method: Method,
    pub param_count: u64,
    pub weights_bytes: u64,
    pub gradients_bytes: u64,
    pub weight_copies_bytes: u64,
    pub momentum_bytes: u64,
    pub variances_bytes: u64,
    pub activation_bytes: u64,
    /// Cached per-channel outlier thresholds; bookkeeping, not a model state.
    pub metadata_bytes: u64,
    /// Model-state bytes of fp32 Adam for the same parameter count.
    pub adam_reference_bytes: u64,
}

impl MemoryProfile {
    pub fn model_state_bytes(&self) -> u64 {
        self.weights_bytes
            + self.gradients_bytes
            + self.weight_copies_bytes
            + self.momentum_bytes
            + self.variances_bytes
    }

    pub fn total_bytes(&self) -> u64 {
        self.model_state_bytes() + self.activation_bytes + self.metadata_bytes
    }

    /// Model-state bytes relative to fp32 Adam.
    pub fn ratio_vs_adam(&self) -> f64 {
        if self.adam_reference_bytes == 0 {
            return 0.0;
        }
        self.model_state_bytes() as f64 / self.adam_reference_bytes as f64
    }

    pub fn components(&self) -> [(&'static str, u64); 9] {
        [
            ("weights", self.weights_bytes),
            ("gradients", self.gradients_bytes),
            ("weight_copies", self.weight_copies_bytes),
            ("momentum", self.momentum_bytes),
            ("variances", self.variances_bytes),
            ("activation", self.activation_bytes),
            ("metadata", self.metadata_bytes),
            ("model_states", self.model_state_bytes()),
            ("total", self.total_bytes()),
        ]
    }

    /// `key=value` report, one line per field.
    pub fn report(&self, units: Units) -> String {
        let mut out = String::new();
        let d = units.divisor();
        let _ = writeln!(out, "method={}", self.method);
        let _ = writeln!(out, "param_count={}", self.param_count);
        let _ = writeln!(out, "units={}", units.label());
        for (name, bytes) in self.components() {
            let _ = writeln!(out, "{name}_bytes={bytes}");
            let _ = writeln!(out, "{name}={:.4}", bytes as f64 / d);
        }
        let _ = writeln!(out, "ratio_vs_adam={:.6}", self.ratio_vs_adam());
        out.push_str("peak=unavailable (engine-owned bytes only)\n");
        out
    }

    pub const CSV_HEADER: &'static str = "method,component,bytes";

    /// `method,component,bytes` rows without the header.
    pub fn csv_rows(&self) -> String {
        self.components()
            .iter()
            .map(|(name, bytes)| format!("{},{name},{bytes}\n", self.method))
            .collect()
    }
}

/// Knobs for the analytic profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileConfig {
    pub param_count: u64,
    pub fp_bytes: u64,
    pub half_bytes: u64,
    pub int_bytes: u64,
    pub outlier_fraction: f64,
    /// Fraction of every state kept in fp rather than quantized.
    pub unquantized_fraction: f64,
    /// Elements per quantization channel, used to estimate the channel count
    /// when no explicit layout is given.
    pub channel_len: u64,
    pub sparse_index_bytes: u64,
    pub activation_bytes: u64,
    /// Exact `(rows, cols)` of every weight tensor; overrides `param_count`
    /// and `channel_len` when non-empty.
    pub layout: Vec<(u64, u64)>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            param_count: 0,
            fp_bytes: 4,
            half_bytes: 2,
            int_bytes: 1,
            outlier_fraction: 0.01,
            unquantized_fraction: 0.0,
            channel_len: 4096,
            sparse_index_bytes: INDEX_BYTES as u64,
            activation_bytes: 0,
            layout: Vec::new(),
        }
    }
}

impl ProfileConfig {
    pub fn for_params(param_count: u64) -> Self {
        Self {
            param_count,
            ..Self::default()
        }
    }

    /// Exact layout of a model's weight matrices.
    pub fn for_model<T: Real>(model: &Model<T>) -> Self {
        let layout: Vec<(u64, u64)> = model
            .layers()
            .iter()
            .map(|l| {
                let (r, c) = l.weight().shape();
                (r as u64, c as u64)
            })
            .collect();
        Self {
            param_count: layout.iter().map(|(r, c)| r * c).sum(),
            fp_bytes: T::BYTES as u64,
            outlier_fraction: model.codec().outlier_fraction,
            layout,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.outlier_fraction;
        let u = self.unquantized_fraction;
        if !(p >= 0.0 && u >= 0.0 && p + u < 1.0) {
            return Err(QftError::InvalidArgument(format!(
                "need p >= 0, u >= 0 and p + u < 1 (p={p}, u={u})"
            )));
        }
        if self.layout.is_empty() && self.channel_len == 0 {
            return Err(QftError::InvalidArgument("channel_len must be positive".into()));
        }
        Ok(())
    }

    fn param_total(&self) -> u64 {
        if self.layout.is_empty() {
            self.param_count
        } else {
            self.layout.iter().map(|(r, c)| r * c).sum()
        }
    }

    /// `(rows, cols)` shapes to account; a single pseudo-tensor of
    /// `N / channel_len` channels when no layout is given.
    fn shapes(&self) -> Vec<(f64, f64)> {
        if self.layout.is_empty() {
            let cols = self.channel_len as f64;
            vec![(self.param_count as f64 / cols, cols)]
        } else {
            self.layout.iter().map(|&(r, c)| (r as f64, c as f64)).collect()
        }
    }
}

struct QftBytes {
    weights: f64,
    state: f64,
    metadata: f64,
}

fn qft_bytes(cfg: &ProfileConfig) -> QftBytes {
    let u = cfg.unquantized_fraction;
    let q = 1.0 - u;
    let fp = cfg.fp_bytes as f64;
    let int = cfg.int_bytes as f64;
    let idx = cfg.sparse_index_bytes as f64;
    let params = fp + 4.0; // scale + i32 zero-point per channel
    let mut out = QftBytes {
        weights: 0.0,
        state: 0.0,
        metadata: 0.0,
    };
    for (rows, cols) in cfg.shapes() {
        let n = rows * cols;
        let per_tail = outliers_per_tail(cols as usize, cfg.outlier_fraction) as f64;
        let nnz = rows * 2.0 * per_tail * q;
        let quantized = n * q * int + rows * q * params;
        let kept = n * u * fp;
        out.weights += quantized + kept + nnz * (fp + idx) + (rows + 1.0) * idx;
        out.state += quantized + kept;
        out.metadata += rows * q * 2.0 * fp;
    }
    out
}

/// Memory a training method needs for the configured parameter count.
pub fn analytic_profile(cfg: &ProfileConfig, method: Method) -> Result<MemoryProfile> {
    cfg.validate()?;
    let n = cfg.param_total();
    let fp = cfg.fp_bytes * n;
    let half = cfg.half_bytes * n;
    let int = cfg.int_bytes * n;
    let mut p = MemoryProfile {
        method,
        param_count: n,
        weights_bytes: 0,
        gradients_bytes: 0,
        weight_copies_bytes: 0,
        momentum_bytes: 0,
        variances_bytes: 0,
        activation_bytes: cfg.activation_bytes,
        metadata_bytes: 0,
        adam_reference_bytes: 4 * fp,
    };
    match method {
        Method::Adam => {
            p.weights_bytes = fp;
            p.gradients_bytes = fp;
            p.momentum_bytes = fp;
            p.variances_bytes = fp;
        }
        Method::AdamMixed => {
            p.weights_bytes = half;
            p.gradients_bytes = half;
            p.weight_copies_bytes = fp;
            p.momentum_bytes = fp;
            p.variances_bytes = fp;
        }
        Method::Bitsandbytes => {
            p.weights_bytes = half;
            p.gradients_bytes = half;
            p.weight_copies_bytes = fp;
            p.momentum_bytes = int;
            p.variances_bytes = int;
        }
        Method::Lion => {
            p.weights_bytes = fp;
            p.gradients_bytes = fp;
            p.momentum_bytes = fp;
        }
        Method::Qft => {
            let q = qft_bytes(cfg);
            p.weights_bytes = q.weights.round() as u64;
            p.gradients_bytes = q.state.round() as u64;
            p.momentum_bytes = q.state.round() as u64;
            p.metadata_bytes = q.metadata.round() as u64;
        }
    }
    Ok(p)
}

/// Bytes held by a live quantized engine: stored weights, the gradient
/// stack, optimizer momentum and (optionally) saved forward inputs.
pub fn measured_profile<T: Real>(
    model: &Model<T>,
    state: &LionState<T>,
    stack: &GradientStack<T>,
    saved: Option<&SavedTensors<'_, T>>,
) -> MemoryProfile {
    let n = model.num_params() as u64;
    let layers = model.layers();
    MemoryProfile {
        method: Method::Qft,
        param_count: n,
        weights_bytes: layers.iter().map(|l| l.weight().storage_bytes() as u64).sum(),
        gradients_bytes: stack.storage_bytes() as u64,
        weight_copies_bytes: 0,
        momentum_bytes: state.storage_bytes() as u64,
        variances_bytes: 0,
        activation_bytes: saved.map_or(0, |s| s.activation_bytes() as u64),
        metadata_bytes: layers.iter().map(|l| l.weight().threshold_bytes() as u64).sum(),
        adam_reference_bytes: 4 * T::BYTES as u64 * n,
    }
}

/// Optimizer state of an fp baseline.
pub enum FpOptimizerState<'a, T> {
    Lion(&'a FpLionState<T>),
    Adam(&'a AdamState<T>),
}

/// Bytes held by an fp baseline: weights, the gradients it keeps between
/// backward and step, and its optimizer state.
pub fn measured_fp_profile<T: Real>(
    params: &[Tensor<T>],
    grads: Option<&[Tensor<T>]>,
    optimizer: FpOptimizerState<'_, T>,
) -> MemoryProfile {
    let bytes = |v: &[Tensor<T>]| v.iter().map(|t| (t.len() * T::BYTES) as u64).sum::<u64>();
    let n: u64 = params.iter().map(|t| t.len() as u64).sum();
    let (method, momentum, variances) = match optimizer {
        FpOptimizerState::Lion(s) => (Method::Lion, s.storage_bytes() as u64, 0),
        FpOptimizerState::Adam(s) => {
            let (m, v) = s.storage_bytes();
            (Method::Adam, m as u64, v as u64)
        }
    };
    MemoryProfile {
        method,
        param_count: n,
        weights_bytes: bytes(params),
        gradients_bytes: grads.map_or(0, bytes),
        weight_copies_bytes: 0,
        momentum_bytes: momentum,
        variances_bytes: variances,
        activation_bytes: 0,
        metadata_bytes: 0,
        adam_reference_bytes: 4 * T::BYTES as u64 * n,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub nnz: usize,
    /// Model-state bytes of the decomposed weight.
    pub bytes: usize,
    pub l2: f64,
}

/// Decompose `w` at each outlier fraction and report bytes and L2 error.
pub fn threshold_sweep<T: Real>(
    w: &Tensor<T>,
    fractions: &[f64],
    rule: ThresholdRule,
    bit_width: u8,
) -> Result<Vec<SweepRow>> {
    check_sweep_fractions(fractions)?;
    fractions
        .iter()
        .map(|&p| {
            let d = DenseSparseWeight::quantize(w, p, rule, bit_width)?;
            Ok(SweepRow {
                fraction: p,
                nnz: d.sparse().nnz(),
                bytes: d.storage_bytes(),
                l2: crate::quant::l2_distance(&d.reconstruct(), w)?,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("fraction,nnz,bytes,l2\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.6e}", r.fraction, r.nnz, r.bytes, r.l2);
    }
    out
}
