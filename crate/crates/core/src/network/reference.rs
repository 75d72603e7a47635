//! Plain floating-point MLP with the same layout and arithmetic as the
//! quantized model, used for baselines and equivalence checks.

use super::{init_weights, loss_and_grad, Activation, LossKind, ModelConfig};
use crate::error::{QftError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FpMlp<T = f32> {
    pub weights: Vec<Tensor<T>>,
    pub activations: Vec<Activation>,
    pub loss: LossKind,
}

impl<T: Real> FpMlp<T> {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            weights: init_weights(config)?,
            activations: config.junction_activations(),
            loss: config.loss,
        })
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Output plus the input of every layer.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        for (i, w) in self.weights.iter().enumerate() {
            let out = h.matmul_bt(w)?;
            inputs.push(h);
            h = match self.activations.get(i) {
                Some(act) => act.apply(out),
                None => out,
            };
        }
        Ok((h, inputs))
    }

    /// Weight gradients in layer order `1..=L`.
    pub fn backward(&self, inputs: Vec<Tensor<T>>, g_out: Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if inputs.len() != self.weights.len() {
            return Err(QftError::InvalidArgument(format!(
                "{} saved inputs for {} layers",
                inputs.len(),
                self.weights.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.weights.len());
        let mut g = g_out;
        for l in (0..self.weights.len()).rev() {
            let input = &inputs[l];
            let g_in = g.matmul(&self.weights[l])?;
            grads.push(g.matmul_at(input)?);
            if l > 0 {
                g = self.activations[l - 1].backward(input, g_in)?;
            }
        }
        grads.reverse();
        Ok(grads)
    }

    pub fn loss(&self, x: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
        let (out, _) = self.forward(x)?;
        Ok(loss_and_grad(&out, target, self.loss)?.0)
    }
}
