//! Gradient flow through quantized weights.
//!
//! The backward pass walks layers `L..=1`, dequantizes each weight on the
//! fly, computes the input and weight gradients by the chain rule, quantizes
//! the weight gradient and pushes it onto a global [`GradientStack`]. The
//! optimizer later pops the stack, which yields layers in `1..=L` order, so
//! the entry it needs is always on top.

use crate::error::{QftError, Result};
use crate::network::SavedTensors;
use crate::profiler::transient::{self, Buffer};
use crate::quant::{StateCodec, StoredState};
use crate::tensor::{Real, Tensor};

/// FILO container of per-layer quantized weight gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientStack<T = f32> {
    entries: Vec<(usize, StoredState<T>)>,
}

impl<T: Real> GradientStack<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, layer_index: usize, grad: StoredState<T>) {
        self.entries.push((layer_index, grad));
    }

    pub fn pop(&mut self) -> Result<(usize, StoredState<T>)> {
        self.entries.pop().ok_or(QftError::StackUnderflow)
    }

    pub fn peek(&self) -> Option<&(usize, StoredState<T>)> {
        self.entries.last()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Layer indices from bottom to top.
    pub fn layer_order(&self) -> Vec<usize> {
        self.entries.iter().map(|(l, _)| *l).collect()
    }

    pub fn storage_bytes(&self) -> usize {
        self.entries.iter().map(|(_, g)| g.storage_bytes()).sum()
    }

    /// Entry of `layer_index` in a stack filled by one full backward over
    /// `num_layers` layers (bottom holds layer `num_layers`).
    fn slot_mut(&mut self, layer_index: usize, num_layers: usize) -> Result<&mut StoredState<T>> {
        let pos = num_layers
            .checked_sub(layer_index)
            .filter(|&p| p < self.entries.len())
            .ok_or_else(|| {
                QftError::StackInconsistent(format!("no slot for layer {layer_index}"))
            })?;
        let (found, grad) = &mut self.entries[pos];
        if *found != layer_index {
            return Err(QftError::StackInconsistent(format!(
                "expected layer {layer_index} at depth {pos}, found {found}"
            )));
        }
        Ok(grad)
    }
}

/// Re-encode `acc + g_new` with fresh params.
pub fn accumulate<T: Real>(
    acc: &StoredState<T>,
    mut g_new: Tensor<T>,
    codec: StateCodec,
) -> Result<StoredState<T>> {
    acc.add_decoded_into(&mut g_new)?;
    codec.encode(g_new)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BackwardReport {
    /// Squared L2 norm of the weight gradients right before quantization.
    pub grad_sq_norm: f64,
    /// Whether the pass accumulated into an existing stack.
    pub accumulated: bool,
}

/// Backward pass over the saved forward state.
///
/// An empty `stack` receives one entry per layer (pushed `L..=1`). A stack
/// already holding a full set from an earlier micro-batch is accumulated
/// into in place. Any other stack state is an error.
pub fn backward<T: Real>(
    saved: SavedTensors<'_, T>,
    g_out: Tensor<T>,
    stack: &mut GradientStack<T>,
    codec: StateCodec,
) -> Result<BackwardReport> {
    let num_layers = saved.len();
    if num_layers == 0 {
        return Err(QftError::Empty("backward"));
    }
    if g_out.shape() != saved.output_shape {
        return Err(QftError::shape(
            "backward",
            format!("{:?}", saved.output_shape),
            format!("{:?}", g_out.shape()),
        ));
    }
    let accumulated = match stack.len() {
        0 => false,
        n if n == num_layers => true,
        n => {
            return Err(QftError::StackInconsistent(format!(
                "stack holds {n} entries for a {num_layers}-layer backward"
            )))
        }
    };

    let SavedTensors {
        layers,
        activations,
        ..
    } = saved;
    let mut report = BackwardReport {
        grad_sq_norm: 0.0,
        accumulated,
    };
    let mut g_o = g_out;
    for entry in layers.into_iter().rev() {
        let l = entry.index;
        let g_i = if l > 1 {
            let w = entry.weight.reconstruct();
            let _hold = transient::hold(Buffer::Weight, w.len() * T::BYTES);
            Some(g_o.matmul(&w)?)
        } else {
            None
        };

        let mut g_w = g_o.matmul_at(&entry.input)?;
        let _hold = transient::hold(Buffer::Gradient, g_w.len() * T::BYTES);
        if accumulated {
            let slot = stack.slot_mut(l, num_layers)?;
            slot.add_decoded_into(&mut g_w)?;
            report.grad_sq_norm += g_w.sum_squares().as_f64();
            *slot = codec.encode(g_w)?;
        } else {
            report.grad_sq_norm += g_w.sum_squares().as_f64();
            stack.push(l, codec.encode(g_w)?);
        }

        if let Some(g_i) = g_i {
            g_o = activations[l - 2].backward(&entry.input, g_i)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{loss_and_grad, Activation, LossKind, Model, ModelConfig};
    use crate::quant::{quantize_channelwise, WeightCodec};
    use proptest::prelude::*;

    fn batch<T: Real>(rows: usize, cols: usize, salt: usize) -> Tensor<T> {
        let data = (0..rows * cols)
            .map(|i| T::lit((((i + salt) * 37) % 23) as f64 / 23.0 - 0.45))
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn push_pop_order_is_filo() {
        let mut s = GradientStack::<f32>::new();
        for l in (1..=4).rev() {
            s.push(l, StoredState::Exact(Tensor::filled(1, 1, l as f32)));
        }
        let order: Vec<_> = (0..4).map(|_| s.pop().unwrap().0).collect();
        assert_eq!(order, vec![1, 2, 3, 4]);
        assert!(matches!(s.pop(), Err(QftError::StackUnderflow)));
    }

    #[test]
    fn push_pop_roundtrips_payload() {
        let g = quantize_channelwise(&Tensor::from_rows(&[&[0.3f32, -1.0, 2.5]]), 8).unwrap();
        let mut s = GradientStack::new();
        s.push(7, StoredState::Quantized(g.clone()));
        assert_eq!(s.pop().unwrap(), (7, StoredState::Quantized(g)));
    }

    #[test]
    fn single_layer_mse_gradient_matches_analytic() {
        let cfg = ModelConfig::new(vec![3, 2]).with_seed(11);
        let m = Model::<f32>::build(&cfg, WeightCodec::pass_through()).unwrap();
        let x = batch::<f32>(4, 3, 0);
        let t = batch::<f32>(4, 2, 5);
        let (out, saved) = m.forward(&x).unwrap();
        let (_, g_o) = loss_and_grad(&out, &t, LossKind::Mse).unwrap();
        let mut stack = GradientStack::new();
        backward(saved, g_o, &mut stack, StateCodec::pass_through()).unwrap();
        let (l, g) = stack.pop().unwrap();
        assert_eq!(l, 1);
        // (2/batch)·(out − t)ᵀ·x
        let expected = out.sub(&t).unwrap().transpose().matmul(&x).unwrap().scale(2.0 / 4.0);
        for (a, b) in g.decode().data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_weight_gradients() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![5, 4, 3]), WeightCodec::default()).unwrap();
        let (out, saved) = m.forward(&batch(2, 5, 1)).unwrap();
        let mut stack = GradientStack::new();
        backward(saved, Tensor::zeros(out.rows(), out.cols()), &mut stack, StateCodec::default()).unwrap();
        while let Ok((_, g)) = stack.pop() {
            assert!(g.decode().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_rejects_bad_inputs() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![5, 4, 3]), WeightCodec::default()).unwrap();
        let (_, saved) = m.forward(&batch(2, 5, 1)).unwrap();
        let mut stack = GradientStack::new();
        assert!(matches!(
            backward(saved, Tensor::zeros(2, 2), &mut stack, StateCodec::default()),
            Err(QftError::Shape { .. })
        ));
        let (_, saved) = m.forward(&batch(2, 5, 1)).unwrap();
        stack.push(1, StoredState::Exact(Tensor::zeros(4, 5)));
        assert!(matches!(
            backward(saved, Tensor::zeros(2, 3), &mut stack, StateCodec::default()),
            Err(QftError::StackInconsistent(_))
        ));
    }

    /// Central finite differences of the batch loss with respect to one
    /// weight entry of an f64 pass-through model, plus the roundoff floor
    /// below which the difference quotient cannot resolve anything.
    fn finite_difference(
        weights: &[Tensor<f64>],
        cfg: &ModelConfig,
        x: &Tensor<f64>,
        t: &Tensor<f64>,
        layer: usize,
        idx: usize,
    ) -> (f64, f64) {
        let loss_with = |delta: f64| {
            let mut ws = weights.to_vec();
            ws[layer].data_mut()[idx] += delta;
            let m = Model::<f64>::from_weights(ws, cfg.junction_activations(), cfg.loss, WeightCodec::pass_through()).unwrap();
            let out = m.predict(x).unwrap();
            loss_and_grad(&out, t, cfg.loss).unwrap().0
        };
        let h = 1e-5 * weights[layer].data()[idx].abs().max(1.0);
        let noise = f64::EPSILON * loss_with(0.0).abs() / h;
        ((loss_with(h) - loss_with(-h)) / (2.0 * h), noise)
    }

    #[test]
    fn gradients_match_finite_differences_f64() {
        for (act, loss) in [
            (Activation::Relu, LossKind::Mse),
            (Activation::None, LossKind::Mse),
            (Activation::Relu, LossKind::SoftmaxCrossEntropy),
        ] {
            let cfg = ModelConfig::new(vec![6, 5, 4, 3]).with_seed(21).with_activation(act).with_loss(loss);
            let weights = crate::network::init_weights::<f64>(&cfg).unwrap();
            let m = Model::<f64>::from_weights(weights.clone(), cfg.junction_activations(), loss, WeightCodec::pass_through()).unwrap();
            let x = batch::<f64>(7, 6, 3);
            let t = match loss {
                LossKind::Mse => batch::<f64>(7, 3, 9),
                LossKind::SoftmaxCrossEntropy => {
                    let mut t = Tensor::zeros(7, 3);
                    for r in 0..7 {
                        t.set(r, r % 3, 1.0);
                    }
                    t
                }
            };
            let (out, saved) = m.forward(&x).unwrap();
            let (_, g_o) = loss_and_grad(&out, &t, loss).unwrap();
            let mut stack = GradientStack::new();
            backward(saved, g_o, &mut stack, StateCodec::pass_through()).unwrap();
            let mut max_rel = 0.0f64;
            for layer in 0..3 {
                let (l, g) = stack.pop().unwrap();
                assert_eq!(l, layer + 1);
                let g = g.decode();
                for idx in 0..g.len() {
                    let (fd, noise) = finite_difference(&weights, &cfg, &x, &t, layer, idx);
                    let an = g.data()[idx];
                    let floor = (noise / 1e-6).max(1e-8);
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(floor);
                    max_rel = max_rel.max(rel);
                }
            }
            assert!(max_rel < 1e-6, "{act:?}/{loss:?}: max rel error {max_rel}");
        }
    }

    #[test]
    fn accumulate_zero_identity() {
        let g = batch::<f32>(3, 4, 2);
        let zero = StateCodec::default().encode(Tensor::zeros(3, 4)).unwrap();
        let acc = accumulate(&zero, g.clone(), StateCodec::default()).unwrap();
        let direct = StateCodec::default().encode(g.clone()).unwrap();
        assert_eq!(acc, direct);
        let StoredState::Quantized(q) = &acc else { unreachable!() };
        let back = acc.decode();
        for r in 0..3 {
            let (s, _) = q.params().channel(r);
            for (a, b) in back.row(r).iter().zip(g.row(r)) {
                assert!((a - b).abs() <= s / 2.0 + 1e-7);
            }
        }
    }

    #[test]
    fn accumulate_k_equal_micro_batches() {
        // fp accumulation oracle: k·g, error within k·(s/2) of the final scale
        let g = batch::<f32>(4, 6, 8);
        let codec = StateCodec::default();
        for k in [2usize, 4, 8] {
            let mut acc = codec.encode(g.clone()).unwrap();
            let mut bound = vec![0.0f32; 4];
            let add_bound = |acc: &StoredState<f32>, bound: &mut Vec<f32>| {
                let StoredState::Quantized(q) = acc else { unreachable!() };
                for (r, b) in bound.iter_mut().enumerate() {
                    *b += q.params().channel(r).0 / 2.0 + 1e-6;
                }
            };
            add_bound(&acc, &mut bound);
            for _ in 1..k {
                acc = accumulate(&acc, g.clone(), codec).unwrap();
                add_bound(&acc, &mut bound);
            }
            let expected = g.scale(k as f32);
            let back = acc.decode();
            for r in 0..4 {
                for (a, b) in back.row(r).iter().zip(expected.row(r)) {
                    assert!((a - b).abs() <= bound[r], "k={k} row {r}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn accumulate_shape_mismatch() {
        let acc = StateCodec::default().encode(Tensor::<f32>::zeros(2, 2)).unwrap();
        assert!(accumulate(&acc, Tensor::zeros(2, 3), StateCodec::default()).is_err());
    }

    #[test]
    fn backward_accumulates_into_full_stack() {
        let cfg = ModelConfig::new(vec![4, 6, 2]).with_seed(5);
        let m = Model::<f32>::build(&cfg, WeightCodec::pass_through()).unwrap();
        let x1 = batch::<f32>(3, 4, 1);
        let x2 = batch::<f32>(3, 4, 2);
        let t = batch::<f32>(3, 2, 3);
        let run = |x: &Tensor<f32>, stack: &mut GradientStack<f32>| {
            let (out, saved) = m.forward(x).unwrap();
            let (_, g) = loss_and_grad(&out, &t, LossKind::Mse).unwrap();
            backward(saved, g, stack, StateCodec::pass_through()).unwrap()
        };
        let mut acc = GradientStack::new();
        assert!(!run(&x1, &mut acc).accumulated);
        assert!(run(&x2, &mut acc).accumulated);
        let (mut a, mut b) = (GradientStack::new(), GradientStack::new());
        run(&x1, &mut a);
        run(&x2, &mut b);
        assert_eq!(acc.layer_order(), vec![2, 1]);
        for _ in 0..2 {
            let (la, ga) = a.pop().unwrap();
            let (lb, gb) = b.pop().unwrap();
            let (lc, gc) = acc.pop().unwrap();
            assert_eq!((la, lb), (lc, lc));
            assert_eq!(gc.decode(), gb.decode().add(&ga.decode()).unwrap());
        }
    }

    #[test]
    fn stored_gradient_bytes_are_one_per_element_plus_params() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![10, 7, 3]), WeightCodec::default()).unwrap();
        let (out, saved) = m.forward(&batch(2, 10, 0)).unwrap();
        let mut stack = GradientStack::new();
        backward(saved, out, &mut stack, StateCodec::default()).unwrap();
        assert_eq!(stack.storage_bytes(), (70 + 7 * 8) + (21 + 3 * 8));
    }

    proptest! {
        #[test]
        fn stack_holds_one_entry_per_layer_in_order(depth in 1usize..=8, seed in any::<u64>()) {
            let mut dims = vec![3usize];
            dims.extend((0..depth).map(|i| 2 + (i + seed as usize) % 4));
            let m = Model::<f32>::build(&ModelConfig::new(dims).with_seed(seed), WeightCodec::default()).unwrap();
            let (out, saved) = m.forward(&batch(2, 3, seed as usize % 7)).unwrap();
            let mut stack = GradientStack::new();
            backward(saved, out, &mut stack, StateCodec::default()).unwrap();
            prop_assert_eq!(stack.len(), depth);
            prop_assert_eq!(stack.layer_order(), (1..=depth).rev().collect::<Vec<_>>());
            let popped: Vec<_> = (0..depth).map(|_| stack.pop().unwrap().0).collect();
            prop_assert_eq!(popped, (1..=depth).collect::<Vec<_>>());
            prop_assert!(matches!(stack.pop(), Err(QftError::StackUnderflow)));
        }
    }
}
