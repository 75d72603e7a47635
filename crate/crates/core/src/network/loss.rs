use serde::{Deserialize, Serialize};

use crate::error::{QftError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    Mse,
    /// Targets are per-sample probability rows (usually one-hot).
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn code(self) -> u8 {
        match self {
            LossKind::Mse => 0,
            LossKind::SoftmaxCrossEntropy => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LossKind::Mse),
            1 => Ok(LossKind::SoftmaxCrossEntropy),
            _ => Err(QftError::InvalidArgument(format!("unknown loss code {code}"))),
        }
    }
}

/// Batch-mean loss and its gradient with respect to `output`.
pub fn loss_and_grad<T: Real>(
    output: &Tensor<T>,
    target: &Tensor<T>,
    kind: LossKind,
) -> Result<(T, Tensor<T>)> {
    output.check_same_shape(target, "loss_and_grad")?;
    if output.rows() == 0 {
        return Err(QftError::Empty("loss_and_grad"));
    }
    let batch = T::lit(output.rows() as f64);
    match kind {
        LossKind::Mse => {
            let diff = output.sub(target)?;
            let loss = diff.sum_squares() / batch;
            let two = T::lit(2.0);
            let grad = diff.map(|d| two * d / batch);
            Ok((loss, grad))
        }
        LossKind::SoftmaxCrossEntropy => {
            let mut loss = T::zero();
            let mut grad = Tensor::zeros(output.rows(), output.cols());
            for r in 0..output.rows() {
                let logits = output.row(r);
                let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let sum = logits.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
                let log_z = max + sum.ln();
                let g = grad.row_mut(r);
                for (c, (&v, &t)) in logits.iter().zip(target.row(r)).enumerate() {
                    loss -= t * (v - log_z);
                    g[c] = ((v - log_z).exp() - t) / batch;
                }
            }
            Ok((loss / batch, grad))
        }
    }
}
