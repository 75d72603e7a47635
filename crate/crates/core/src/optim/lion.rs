use serde::{Deserialize, Serialize};

use crate::error::{QftError, Result};
use crate::gradflow::GradientStack;
use crate::network::Model;
use crate::profiler::transient::{self, Buffer};
use crate::quant::{StateCodec, StoredState};
use crate::tensor::{sign, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay from `lr` to zero over the run.
    LinearDecay,
}

impl LrSchedule {
    pub fn lr_at(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::LinearDecay if total_steps == 0 => base,
            LrSchedule::LinearDecay => base * (1.0 - step as f64 / total_steps as f64),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LionHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub schedule: LrSchedule,
}

impl Default for LionHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
            lr: 1e-3,
            schedule: LrSchedule::Constant,
        }
    }
}

impl LionHyper {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(QftError::Config(format!(
                "lion hyperparameters need 0 <= beta < 1, lr > 0, weight_decay >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One stored momentum tensor per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LionState<T = f32> {
    momentum: Vec<StoredState<T>>,
    codec: StateCodec,
}

impl<T: Real> LionState<T> {
    /// Zero momentum for every layer of `model`.
    pub fn new(model: &Model<T>, codec: StateCodec) -> Result<Self> {
        let momentum = model
            .layers()
            .iter()
            .map(|l| {
                let (r, c) = l.weight().shape();
                codec.encode(Tensor::zeros(r, c))
            })
            .collect::<Result<_>>()?;
        Ok(Self { momentum, codec })
    }

    pub fn from_parts(momentum: Vec<StoredState<T>>, codec: StateCodec) -> Self {
        Self { momentum, codec }
    }

    pub fn momentum(&self) -> &[StoredState<T>] {
        &self.momentum
    }

    pub fn codec(&self) -> StateCodec {
        self.codec
    }

    pub fn storage_bytes(&self) -> usize {
        self.momentum.iter().map(|m| m.storage_bytes()).sum()
    }
}

/// `w ← w − η(sign(β1·m + (1−β1)·g) + λ·w)` and `m ← β2·m + (1−β2)·g`,
/// elementwise and in place.
pub(crate) fn lion_update<T: Real>(w: &mut [T], m: &mut [T], g: &[T], h: &LionHyper) {
    let b1 = T::lit(h.beta1);
    let b2 = T::lit(h.beta2);
    let c1 = T::lit(1.0 - h.beta1);
    let c2 = T::lit(1.0 - h.beta2);
    let lr = T::lit(h.lr);
    let wd = T::lit(h.weight_decay);
    for ((w, m), &g) in w.iter_mut().zip(m.iter_mut()).zip(g) {
        let delta = b1 * *m + c1 * g;
        *w = *w - lr * (sign(delta) + wd * *w);
        *m = b2 * *m + c2 * g;
    }
}

/// Quantized Lion step: pops one gradient per layer in order `1..=L`,
/// updates the dequantized weight and momentum, and stores both back.
pub fn lion_step_quantized<T: Real>(
    model: &mut Model<T>,
    state: &mut LionState<T>,
    stack: &mut GradientStack<T>,
    h: &LionHyper,
) -> Result<()> {
    step_layers(model, state, stack, h, None)
}

/// [`lion_step_quantized`] with a hook that sees each layer's weight before
/// and after the update, ahead of requantization.
pub fn lion_step_observed<T: Real>(
    model: &mut Model<T>,
    state: &mut LionState<T>,
    stack: &mut GradientStack<T>,
    h: &LionHyper,
    mut observe: impl FnMut(usize, &Tensor<T>, &Tensor<T>),
) -> Result<()> {
    step_layers(model, state, stack, h, Some(&mut observe))
}

type Observer<'a, T> = &'a mut dyn FnMut(usize, &Tensor<T>, &Tensor<T>);

fn step_layers<T: Real>(
    model: &mut Model<T>,
    state: &mut LionState<T>,
    stack: &mut GradientStack<T>,
    h: &LionHyper,
    mut observe: Option<Observer<'_, T>>,
) -> Result<()> {
    let num_layers = model.num_layers();
    if state.momentum.len() != num_layers {
        return Err(QftError::InvalidArgument(format!(
            "optimizer state has {} layers, model has {num_layers}",
            state.momentum.len()
        )));
    }
    match stack.len() {
        n if n == num_layers => {}
        n if n < num_layers => return Err(QftError::StackUnderflow),
        n => {
            return Err(QftError::StackInconsistent(format!(
                "{n} gradients for {num_layers} layers"
            )))
        }
    }
    if let Some((top, _)) = stack.peek() {
        if *top != 1 {
            return Err(QftError::StackInconsistent(format!(
                "top of stack is layer {top}, expected layer 1"
            )));
        }
    }

    for (i, layer) in model.layers_mut().iter_mut().enumerate() {
        let (index, grad) = stack.pop()?;
        if index != layer.index() {
            return Err(QftError::StackInconsistent(format!(
                "popped layer {index} while updating layer {}",
                layer.index()
            )));
        }
        let shape = layer.weight().shape();
        if grad.shape() != shape {
            return Err(QftError::shape(
                "lion_step_quantized",
                format!("{shape:?}"),
                format!("{:?}", grad.shape()),
            ));
        }
        let bytes = shape.0 * shape.1 * T::BYTES;

        let g = grad.decode();
        drop(grad);
        let _g_hold = transient::hold(Buffer::Gradient, bytes);
        let mut m = state.momentum[i].decode();
        let _m_hold = transient::hold(Buffer::Momentum, bytes);
        let mut w = layer.weight().reconstruct();
        let _w_hold = transient::hold(Buffer::Weight, bytes);

        match observe.as_mut() {
            Some(f) => {
                let before = w.clone();
                lion_update(w.data_mut(), m.data_mut(), g.data(), h);
                f(layer.index(), &before, &w);
            }
            None => lion_update(w.data_mut(), m.data_mut(), g.data(), h),
        }

        state.momentum[i] = state.codec.encode(m)?;
        layer.weight_mut().requantize(w)?;
    }
    Ok(())
}
