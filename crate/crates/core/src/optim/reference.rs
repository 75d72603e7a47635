//! Full-precision Lion and Adam over plain tensors.

use serde::{Deserialize, Serialize};

use super::LionHyper;
use crate::error::{QftError, Result};
use crate::tensor::{Real, Tensor};

fn check_shapes<T: Real>(params: &[Tensor<T>], other: &[Tensor<T>], op: &'static str) -> Result<()> {
    if params.len() != other.len() {
        return Err(QftError::shape(op, format!("{} tensors", params.len()), other.len()));
    }
    for (p, o) in params.iter().zip(other) {
        p.check_same_shape(o, op)?;
    }
    Ok(())
}

/// Momentum-only state of the fp32 Lion.
#[derive(Clone, Debug, PartialEq)]
pub struct FpLionState<T = f32> {
    pub momentum: Vec<Tensor<T>>,
}

impl<T: Real> FpLionState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        Self {
            momentum: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn storage_bytes(&self) -> usize {
        self.momentum.iter().map(|m| m.len() * T::BYTES).sum()
    }
}

pub fn lion_step_reference<T: Real>(
    params: &mut [Tensor<T>],
    state: &mut FpLionState<T>,
    grads: &[Tensor<T>],
    h: &LionHyper,
) -> Result<()> {
    check_shapes(params, grads, "lion_step_reference")?;
    check_shapes(params, &state.momentum, "lion_step_reference")?;
    let beta1 = T::lit(h.beta1);
    let beta2 = T::lit(h.beta2);
    let one_minus_beta1 = T::lit(1.0 - h.beta1);
    let one_minus_beta2 = T::lit(1.0 - h.beta2);
    let lr = T::lit(h.lr);
    let decay = T::lit(h.weight_decay);
    for ((w, m), g) in params.iter_mut().zip(&mut state.momentum).zip(grads) {
        let update = m
            .zip_map(g, "lion", |m, g| beta1 * m + one_minus_beta1 * g)?
            .sign();
        let w_data = w.data_mut();
        for (i, u) in update.data().iter().enumerate() {
            w_data[i] = w_data[i] - lr * (*u + decay * w_data[i]);
        }
        *m = m.zip_map(g, "lion", |m, g| beta2 * m + one_minus_beta2 * g)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.lr > 0.0
            && self.eps > 0.0;
        if !ok {
            return Err(QftError::Config(format!("invalid adam hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub momentum: Vec<Tensor<T>>,
    pub variance: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            momentum: zeros(),
            variance: zeros(),
            step: 0,
        }
    }

    pub fn storage_bytes(&self) -> (usize, usize) {
        let bytes = |v: &[Tensor<T>]| v.iter().map(|t| t.len() * T::BYTES).sum();
        (bytes(&self.momentum), bytes(&self.variance))
    }
}

/// Adam with bias correction.
pub fn adam_step_reference<T: Real>(
    params: &mut [Tensor<T>],
    state: &mut AdamState<T>,
    grads: &[Tensor<T>],
    h: &AdamHyper,
) -> Result<()> {
    check_shapes(params, grads, "adam_step_reference")?;
    check_shapes(params, &state.momentum, "adam_step_reference")?;
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(h.beta1);
    let b2 = T::lit(h.beta2);
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    let lr = T::lit(h.lr);
    let eps = T::lit(h.eps);
    for (((w, m), v), g) in params
        .iter_mut()
        .zip(&mut state.momentum)
        .zip(&mut state.variance)
        .zip(grads)
    {
        let w = w.data_mut();
        let m = m.data_mut();
        let v = v.data_mut();
        for (i, &g) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lion_reference_scalar_example() {
        let mut w = vec![Tensor::from_vec1(vec![1.0f64])];
        let mut st = FpLionState {
            momentum: vec![Tensor::from_vec1(vec![0.5])],
        };
        let g = vec![Tensor::from_vec1(vec![-0.2])];
        let h = LionHyper {
            lr: 1e-4,
            ..Default::default()
        };
        lion_step_reference(&mut w, &mut st, &g, &h).unwrap();
        assert_eq!(w[0].get(0, 0), 1.0 - 1e-4);
        assert!((st.momentum[0].get(0, 0) - 0.493).abs() < 1e-15);
    }

    #[test]
    fn lion_update_magnitude_is_lr() {
        let g: Vec<f32> = (0..64).map(|i| ((i * 13) % 9) as f32 - 4.0).collect();
        let w0: Vec<f32> = (0..64).map(|i| (i as f32 * 0.37).sin()).collect();
        let mut w = vec![Tensor::from_vec(8, 8, w0.clone()).unwrap()];
        let grads = vec![Tensor::from_vec(8, 8, g.clone()).unwrap()];
        let mut st = FpLionState::zeros_like(&w);
        let lr = 1.0 / 1024.0; // exact in binary so differences are exact
        let h = LionHyper { lr, ..Default::default() };
        lion_step_reference(&mut w, &mut st, &grads, &h).unwrap();
        for ((&a, &b), &gv) in w[0].data().iter().zip(&w0).zip(&g) {
            let d = (a - b).abs();
            if gv == 0.0 {
                assert_eq!(d, 0.0);
            } else {
                assert!((d - lr as f32).abs() <= f32::EPSILON * b.abs().max(1.0), "{d}");
            }
        }
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut w = vec![Tensor::from_vec1(vec![0.0f64; 4])];
        let g = vec![Tensor::from_vec1(vec![0.5, -2.0, 3.0, -0.1])];
        let mut st = AdamState::zeros_like(&w);
        let h = AdamHyper::default();
        adam_step_reference(&mut w, &mut st, &g, &h).unwrap();
        for (&wv, &gv) in w[0].data().iter().zip(g[0].data()) {
            // m̂ = g, v̂ = g², so Δ = −η·g/(|g|+ε)
            let expected = -h.lr * gv / (gv.abs() + h.eps);
            assert!((wv - expected).abs() < 1e-15);
            assert!((wv + h.lr * gv.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let w0 = Tensor::from_vec1(vec![0.3f32, -0.7]);
        let mut w = vec![w0.clone()];
        let g = vec![Tensor::zeros(1, 2)];
        let mut st = AdamState::zeros_like(&w);
        for _ in 0..10 {
            adam_step_reference(&mut w, &mut st, &g, &AdamHyper::default()).unwrap();
        }
        assert_eq!(w[0], w0);
    }

    #[test]
    fn adam_keeps_two_states_lion_one() {
        let params = vec![Tensor::<f32>::zeros(3, 5), Tensor::zeros(5, 2)];
        let (m, v) = AdamState::zeros_like(&params).storage_bytes();
        let lion = FpLionState::zeros_like(&params).storage_bytes();
        assert_eq!((m, v), (100, 100));
        assert_eq!(lion, 100);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut w = vec![Tensor::<f32>::zeros(2, 2)];
        let g = vec![Tensor::zeros(2, 3)];
        let mut st = FpLionState::zeros_like(&w);
        assert!(lion_step_reference(&mut w, &mut st, &g, &LionHyper::default()).is_err());
        let mut ad = AdamState::zeros_like(&w);
        assert!(adam_step_reference(&mut w, &mut ad, &g, &AdamHyper::default()).is_err());
        assert!(lion_step_reference(&mut w, &mut st, &[], &LionHyper::default()).is_err());
    }

    proptest! {
        #[test]
        fn sign_term_invariant_under_positive_scaling(
            g in prop::collection::vec(-5.0f64..5.0, 1..32),
            m in prop::collection::vec(-5.0f64..5.0, 32),
            c in 0.01f64..100.0,
        ) {
            let n = g.len();
            let m = &m[..n];
            let direction = |scale: f64| {
                let mut w = vec![Tensor::from_vec1(vec![0.0; n])];
                let mut st = FpLionState { momentum: vec![Tensor::from_vec1(m.iter().map(|v| v * scale).collect())] };
                let gs = vec![Tensor::from_vec1(g.iter().map(|v| v * scale).collect())];
                lion_step_reference(&mut w, &mut st, &gs, &LionHyper { lr: 1.0, ..Default::default() }).unwrap();
                w[0].sign()
            };
            // elementwise sign(Δ) unaffected, up to ties at |Δ| ≈ 0
            let a = direction(1.0);
            let b = direction(c);
            for i in 0..n {
                let delta = 0.9 * m[i] + 0.1 * g[i];
                if delta.abs() > 1e-12 {
                    prop_assert_eq!(a.data()[i], b.data()[i]);
                }
            }
        }

        #[test]
        fn sign_oddness_and_scale_invariance(x in prop::collection::vec(-1e3f32..1e3, 1..20), c in 1e-3f32..1e3) {
            let t = Tensor::from_vec1(x);
            prop_assert_eq!(t.scale(-1.0).sign(), t.sign().scale(-1.0));
            let scaled = t.scale(c);
            for (a, b) in scaled.sign().data().iter().zip(t.sign().data()) {
                prop_assert!(a == b || scaled.data().contains(&0.0));
            }
        }
    }
}
