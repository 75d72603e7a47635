//! Tensors to inspect: synthetic distributions or a checkpointed layer.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{QftError, Result};
use crate::tensor::Tensor;
use crate::trainer::load_checkpoint;

/// Share of each row replaced by outliers in the heavy-tailed tensor.
pub const HEAVY_TAIL_FRACTION: f64 = 0.005;
/// Outlier magnitudes, in standard deviations of the normal core.
pub const HEAVY_TAIL_MAGNITUDE: (f64, f64) = (100.0, 1000.0);

/// Standard normal entries.
pub fn normal_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("sized buffer")
}

/// Normal core where `round(cols · fraction)` entries per row are replaced by
/// values of random sign and magnitude uniform in `magnitude` (in units of
/// the core's standard deviation).
pub fn heavy_tailed_tensor(
    rows: usize,
    cols: usize,
    fraction: f64,
    magnitude: (f64, f64),
    seed: u64,
) -> Tensor {
    let mut t = normal_tensor(rows, cols, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let per_row = ((cols as f64 * fraction).round() as usize).min(cols);
    for r in 0..rows {
        let row = t.row_mut(r);
        for c in sample(&mut rng, cols, per_row) {
            let m = rng.random_range(magnitude.0..=magnitude.1);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            row[c] = (sign * m) as f32;
        }
    }
    t
}

/// Parse `synthetic:<normal|heavy>-<rows>x<cols>[-s<seed>]` or a checkpoint
/// path (reading layer `layer`, 1-based).
pub fn load_tensor(source: &str, layer: usize) -> Result<Tensor> {
    let Some(spec) = source.strip_prefix("synthetic:") else {
        let ck = load_checkpoint(Path::new(source))?;
        let layers = ck.model.layers();
        return layers
            .get(layer.wrapping_sub(1))
            .map(|l| l.weight().reconstruct())
            .ok_or_else(|| {
                QftError::InvalidArgument(format!(
                    "layer {layer} out of range, checkpoint has {}",
                    layers.len()
                ))
            });
    };
    let bad = || {
        QftError::InvalidArgument(format!(
            "bad synthetic tensor '{spec}', expected normal-RxC or heavy-RxC with optional -sSEED"
        ))
    };
    let parts: Vec<&str> = spec.split('-').collect();
    let (kind, shape, seed) = match parts[..] {
        [kind, shape] => (kind, shape, 0),
        [kind, shape, seed] => (
            kind,
            shape,
            seed.strip_prefix('s')
                .and_then(|s| s.parse().ok())
                .ok_or_else(bad)?,
        ),
        _ => return Err(bad()),
    };
    let (rows, cols) = shape.split_once('x').ok_or_else(bad)?;
    let dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(bad);
    let (rows, cols) = (dim(rows)?, dim(cols)?);
    match kind {
        "normal" => Ok(normal_tensor(rows, cols, seed)),
        "heavy" => Ok(heavy_tailed_tensor(
            rows,
            cols,
            HEAVY_TAIL_FRACTION,
            HEAVY_TAIL_MAGNITUDE,
            seed,
        )),
        _ => Err(bad()),
    }
}
