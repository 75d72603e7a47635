//! Sequential stack of bias-free linear layers with quantized weights.
//!
//! Weights are held only as [`StoredWeight`]s. A forward pass reconstructs
//! each layer's weight on the fly, uses it for one matmul and drops it; what
//! survives is the layer input plus a borrow of the stored weight, which the
//! backward pass consumes.

mod loss;
pub mod reference;

pub use loss::{loss_and_grad, LossKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QftError, Result};
use crate::profiler::transient::{self, Buffer};
use crate::quant::{StoredWeight, ThresholdRule, WeightCodec};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

impl Activation {
    pub fn apply<T: Real>(self, x: Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::None => x,
        }
    }

    /// Gradient through the activation, given the activation's output.
    pub fn backward<T: Real>(self, activated: &Tensor<T>, grad: Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Activation::Relu => activated.relu_backward(&grad),
            Activation::None => Ok(grad),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::None => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::None),
            _ => Err(QftError::InvalidArgument(format!(
                "unknown activation code {code}"
            ))),
        }
    }
}

/// One activation for every junction, or one per junction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActivationSpec {
    All(Activation),
    PerJunction(Vec<Activation>),
}

impl Default for ActivationSpec {
    fn default() -> Self {
        ActivationSpec::All(Activation::Relu)
    }
}

/// Synthetic outliers written into the initial weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlierInjection {
    /// Fraction of entries replaced by outliers.
    pub fraction: f64,
    /// Outlier magnitude as a multiple of the init bound `1/sqrt(in)`.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: ActivationSpec,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub inject_outliers: Option<OutlierInjection>,
}

impl ModelConfig {
    pub fn new(layer_dims: Vec<usize>) -> Self {
        Self {
            layer_dims,
            activation: ActivationSpec::default(),
            loss: LossKind::Mse,
            seed: 0,
            inject_outliers: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = ActivationSpec::All(activation);
        self
    }

    pub fn with_loss(mut self, loss: LossKind) -> Self {
        self.loss = loss;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(QftError::Config(
                "layer_dims needs at least two entries (one layer)".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(QftError::Config("layer_dims entries must be positive".into()));
        }
        if let ActivationSpec::PerJunction(acts) = &self.activation {
            if acts.len() != self.num_layers() - 1 {
                return Err(QftError::Config(format!(
                    "{} activations given for {} junctions",
                    acts.len(),
                    self.num_layers() - 1
                )));
            }
        }
        if let Some(inj) = &self.inject_outliers {
            if !(0.0..1.0).contains(&inj.fraction) || !(inj.scale > 0.0) {
                return Err(QftError::Config(
                    "inject_outliers needs fraction in [0, 1) and scale > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn junction_activations(&self) -> Vec<Activation> {
        match &self.activation {
            ActivationSpec::All(a) => vec![*a; self.num_layers().saturating_sub(1)],
            ActivationSpec::PerJunction(v) => v.clone(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1]).sum()
    }
}

/// Seeded fp initialization, uniform in `[-1/sqrt(in), 1/sqrt(in)]`, plus
/// optional injected outliers. Values are drawn in f64 so every element type
/// starts from the same weights.
pub fn init_weights<T: Real>(config: &ModelConfig) -> Result<Vec<Tensor<T>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    config
        .layer_dims
        .windows(2)
        .map(|dims| {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let mut v = rng.random_range(-bound..bound);
                    if let Some(inj) = &config.inject_outliers {
                        if rng.random::<f64>() < inj.fraction {
                            v = v.signum() * inj.scale * bound;
                        }
                    }
                    T::lit(v)
                })
                .collect();
            Tensor::from_vec(fan_out, fan_in, data)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedLinearLayer<T = f32> {
    index: usize,
    weight: StoredWeight<T>,
}

impl<T: Real> QuantizedLinearLayer<T> {
    /// 1-based layer position.
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn weight(&self) -> &StoredWeight<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut StoredWeight<T> {
        &mut self.weight
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape().1
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().0
    }

    /// Reconstructed fp weight, registered with the transient meter for as
    /// long as the returned guard lives.
    pub fn dequantized_weight(&self) -> (Tensor<T>, transient::Hold) {
        let w = self.weight.reconstruct();
        let hold = transient::hold(Buffer::Weight, w.len() * T::BYTES);
        (w, hold)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    layers: Vec<QuantizedLinearLayer<T>>,
    activations: Vec<Activation>,
    loss: LossKind,
    codec: WeightCodec,
}

/// Forward-pass state one layer needs for its backward step.
#[derive(Debug)]
pub struct SavedLayer<'m, T> {
    pub index: usize,
    pub input: Tensor<T>,
    pub weight: &'m StoredWeight<T>,
}

/// Everything a backward pass needs; borrowing the model keeps it immutable
/// until the backward pass has consumed this value.
#[derive(Debug)]
pub struct SavedTensors<'m, T> {
    pub(crate) layers: Vec<SavedLayer<'m, T>>,
    pub(crate) activations: &'m [Activation],
    pub(crate) output_shape: (usize, usize),
}

impl<'m, T: Real> SavedTensors<'m, T> {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[SavedLayer<'m, T>] {
        &self.layers
    }

    pub fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }

    /// Bytes of the saved layer inputs.
    pub fn activation_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.input.len() * T::BYTES).sum()
    }
}

impl<T: Real> Model<T> {
    /// Initialize in fp, quantize every layer with `codec` and drop the fp
    /// buffers.
    pub fn build(config: &ModelConfig, codec: WeightCodec) -> Result<Self> {
        let weights = init_weights::<T>(config)?;
        Self::from_weights(weights, config.junction_activations(), config.loss, codec)
    }

    /// Quantize the given fp weights (`[out × in]` each).
    pub fn from_weights(
        weights: Vec<Tensor<T>>,
        activations: Vec<Activation>,
        loss: LossKind,
        codec: WeightCodec,
    ) -> Result<Self> {
        let stored = weights
            .into_iter()
            .map(|w| codec.encode(w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_stored(stored, activations, loss, codec)
    }

    pub fn from_stored(
        weights: Vec<StoredWeight<T>>,
        activations: Vec<Activation>,
        loss: LossKind,
        codec: WeightCodec,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(QftError::Config("model needs at least one layer".into()));
        }
        if activations.len() != weights.len() - 1 {
            return Err(QftError::Config(format!(
                "{} activations for {} layers",
                activations.len(),
                weights.len()
            )));
        }
        for (l, pair) in weights.windows(2).enumerate() {
            if pair[0].shape().0 != pair[1].shape().1 {
                return Err(QftError::shape(
                    "Model",
                    format!("layer {} input width {}", l + 2, pair[0].shape().0),
                    pair[1].shape().1,
                ));
            }
        }
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(i, weight)| QuantizedLinearLayer {
                index: i + 1,
                weight,
            })
            .collect();
        Ok(Self {
            layers,
            activations,
            loss,
            codec,
        })
    }

    pub fn layers(&self) -> &[QuantizedLinearLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [QuantizedLinearLayer<T>] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn codec(&self) -> WeightCodec {
        self.codec
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_features()];
        dims.extend(self.layers.iter().map(|l| l.out_features()));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_features() * l.out_features())
            .sum()
    }

    /// Quantized forward pass; returns the output and the per-layer state the
    /// backward pass consumes.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SavedTensors<'_, T>)> {
        self.check_input(x)?;
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = {
                let (w, _hold) = layer.dequantized_weight();
                h.matmul_bt(&w)?
            };
            saved.push(SavedLayer {
                index: layer.index,
                input: h,
                weight: &layer.weight,
            });
            h = match self.activations.get(i) {
                Some(act) => act.apply(out),
                None => out,
            };
        }
        let output_shape = h.shape();
        Ok((
            h,
            SavedTensors {
                layers: saved,
                activations: &self.activations,
                output_shape,
            },
        ))
    }

    /// Forward pass without keeping anything for backward.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let out = {
                let (w, _hold) = layer.dequantized_weight();
                h.matmul_bt(&w)?
            };
            h = match self.activations.get(i) {
                Some(act) => act.apply(out),
                None => out,
            };
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.layers[0].in_features();
        if x.cols() != want {
            return Err(QftError::shape("forward", format!("{want} input features"), x.cols()));
        }
        Ok(())
    }

    /// Recompute outlier thresholds for every layer from its current weight.
    pub fn refresh_thresholds(&mut self, p: f64) -> Result<()> {
        let rule = self.codec.rule;
        self.codec.outlier_fraction = p;
        for layer in &mut self.layers {
            layer.weight.refresh_thresholds(p, rule)?;
        }
        Ok(())
    }

    pub fn threshold_rule(&self) -> ThresholdRule {
        self.codec.rule
    }

    /// Reconstructed fp weights of every layer (inspection and tests).
    pub fn reconstruct_weights(&self) -> Vec<Tensor<T>> {
        self.layers.iter().map(|l| l.weight.reconstruct()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::StoredWeight;

    fn input(rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|i| ((i * 7) % 11) as f32 / 11.0 - 0.4).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::new(vec![4, 4]).with_seed(9);
        let a = Model::<f32>::build(&cfg, WeightCodec::default()).unwrap();
        let b = Model::<f32>::build(&cfg, WeightCodec::default()).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::build(&cfg.clone().with_seed(10), WeightCodec::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn build_shapes() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![4, 8, 2]), WeightCodec::default()).unwrap();
        assert_eq!(m.num_layers(), 2);
        assert_eq!(m.layers()[0].weight().shape(), (8, 4));
        assert_eq!(m.layers()[1].weight().shape(), (2, 8));
        assert_eq!(m.layers()[1].index(), 2);
        assert_eq!(m.layer_dims(), vec![4, 8, 2]);
    }

    #[test]
    fn build_rejects_invalid_dims() {
        for dims in [vec![], vec![3], vec![3, 0, 2]] {
            assert!(Model::<f32>::build(&ModelConfig::new(dims), WeightCodec::default()).is_err());
        }
        let mut cfg = ModelConfig::new(vec![3, 4, 2]);
        cfg.activation = ActivationSpec::PerJunction(vec![Activation::Relu, Activation::Relu]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn build_reconstruction_within_half_step_of_init() {
        let cfg = ModelConfig::new(vec![16, 12, 3]).with_seed(3);
        let init = init_weights::<f32>(&cfg).unwrap();
        let m = Model::<f32>::build(&cfg, WeightCodec::default()).unwrap();
        for (layer, w0) in m.layers().iter().zip(&init) {
            let d = layer.weight().as_dense_sparse().unwrap();
            let w = d.reconstruct();
            for r in 0..w.rows() {
                let (s, _) = d.dense().params().channel(r);
                for (a, b) in w.row(r).iter().zip(w0.row(r)) {
                    assert!((a - b).abs() <= s / 2.0 + 4.0 * f32::EPSILON * b.abs());
                }
            }
        }
    }

    #[test]
    fn pass_through_forward_is_exact_product() {
        let cfg = ModelConfig::new(vec![5, 3]).with_seed(1);
        let m = Model::<f32>::build(&cfg, WeightCodec::pass_through()).unwrap();
        let w = init_weights::<f32>(&cfg).unwrap().remove(0);
        let x = input(4, 5);
        let (out, saved) = m.forward(&x).unwrap();
        assert_eq!(out, x.matmul(&w.transpose()).unwrap());
        assert_eq!(saved.len(), 1);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![6, 5, 2]), WeightCodec::default()).unwrap();
        let (out, _) = m.forward(&Tensor::zeros(3, 6)).unwrap();
        assert_eq!(out, Tensor::zeros(3, 2));
    }

    #[test]
    fn forward_saves_one_entry_per_layer() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![6, 5, 4, 2]), WeightCodec::default()).unwrap();
        let x = input(3, 6);
        let (out, saved) = m.forward(&x).unwrap();
        assert_eq!(saved.len(), 3);
        assert_eq!(saved.layers()[0].input, x);
        assert_eq!(saved.output_shape(), out.shape());
        for (s, l) in saved.layers().iter().zip(m.layers()) {
            assert!(std::ptr::eq(s.weight, l.weight()));
        }
        assert_eq!(m.predict(&x).unwrap(), out);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![6, 2]), WeightCodec::default()).unwrap();
        assert!(m.forward(&Tensor::zeros(3, 5)).is_err());
    }

    #[test]
    fn quantized_forward_within_error_bound_of_fp_reference() {
        // parallel fp model oracle, bound propagated layer by layer
        let cfg = ModelConfig::new(vec![8, 16, 16, 4]).with_seed(5).with_activation(Activation::Relu);
        let fp = init_weights::<f32>(&cfg).unwrap();
        let m = Model::<f32>::build(&cfg, WeightCodec::default()).unwrap();
        let x = input(5, 8);
        let q_out = m.predict(&x).unwrap();

        let mut h = x.clone();
        let mut err = vec![0.0f32; 5]; // per-row bound on |h_q - h_fp|_2
        for (l, (w, layer)) in fp.iter().zip(m.layers()).enumerate() {
            let d = layer.weight().as_dense_sparse().unwrap();
            let max_s = d.dense().params().scales.iter().fold(0.0f32, |a, &b| a.max(b));
            let rows = w.rows() as f32;
            let w_norm = w.sum_squares().sqrt();
            let next = h.matmul_bt(w).unwrap();
            for (b, e) in err.iter_mut().enumerate() {
                let in_norm: f32 = h.row(b).iter().map(|v| v * v).sum::<f32>().sqrt();
                // ||ΔW||_F ≤ sqrt(rows·in)·s/2 ; output error ≤ ||W||·e + ||ΔW||·(||h||+e)
                let dw = (rows * w.cols() as f32).sqrt() * max_s / 2.0;
                *e = w_norm * *e + dw * (in_norm + *e);
            }
            h = if l + 1 < fp.len() { next.relu() } else { next };
        }
        for b in 0..5 {
            let diff: f32 = q_out
                .row(b)
                .iter()
                .zip(h.row(b))
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f32>()
                .sqrt();
            assert!(diff <= err[b] + 1e-6, "row {b}: {diff} > {}", err[b]);
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn injected_outliers_land_in_sparse_part() {
        let mut cfg = ModelConfig::new(vec![200, 50]).with_seed(2);
        cfg.inject_outliers = Some(OutlierInjection {
            fraction: 0.002,
            scale: 1000.0,
        });
        let w0 = init_weights::<f32>(&cfg).unwrap().remove(0);
        let spikes = w0.data().iter().filter(|v| v.abs() > 1.0).count();
        assert!(spikes > 0);
        let m = Model::<f32>::build(&cfg, WeightCodec::default()).unwrap();
        let d = m.layers()[0].weight().as_dense_sparse().unwrap();
        let exact = d.sparse().values().iter().filter(|v| v.abs() > 1.0).count();
        assert_eq!(exact, spikes);
    }

    #[test]
    fn refresh_is_deterministic() {
        let m = Model::<f32>::build(&ModelConfig::new(vec![64, 8]).with_seed(4), WeightCodec::default()).unwrap();
        let (mut a, mut b) = (m.clone(), m);
        a.refresh_thresholds(0.05).unwrap();
        b.refresh_thresholds(0.05).unwrap();
        assert_eq!(a, b);
        assert!(matches!(a.layers()[0].weight(), StoredWeight::DenseSparse(_)));
    }
}
