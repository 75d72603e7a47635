use std::fmt::Write as _;
use std::path::Path;

use crate::error::{QftError, Result};

pub const METRICS_HEADER: &str = "step,epoch,loss,grad_norm,state_bytes";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    /// Mean loss of the step's batch.
    pub loss: f64,
    /// L2 norm of the weight gradients before quantization.
    pub grad_norm: f64,
    /// Measured model-state bytes while the gradients are held.
    pub state_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    rows: Vec<StepMetrics>,
}

impl RunMetrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a row; steps must increase and values must be finite.
    pub fn push(&mut self, row: StepMetrics) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(QftError::InvalidArgument(format!(
                    "step {} after step {}",
                    row.step, last.step
                )));
            }
        }
        if !row.loss.is_finite() || !row.grad_norm.is_finite() {
            return Err(QftError::InvalidArgument(format!(
                "non-finite metrics: loss {} grad_norm {}",
                row.loss, row.grad_norm
            ))
            .at_step(row.step));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[StepMetrics] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.9e},{:.9e},{}",
                r.step, r.epoch, r.loss, r.grad_norm, r.state_bytes
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
