use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::{OptimizerKind, TrainConfig};
use super::data::{ingest_dataset, Dataset};
use super::metrics::{RunMetrics, StepMetrics};
use crate::error::{QftError, Result};
use crate::gradflow::{backward, GradientStack};
use crate::network::reference::FpMlp;
use crate::network::{loss_and_grad, Model};
use crate::optim::{
    adam_step_reference, lion_step_quantized, lion_step_reference, AdamState, FpLionState,
    LionHyper, LionState,
};
use crate::profiler::transient::{self, TransientPeaks};
use crate::profiler::{
    measured_fp_profile, measured_profile, FpOptimizerState, MemoryProfile, Units,
};
use crate::tensor::Tensor;

/// Mixed into the run seed for the batch-order stream.
const BATCH_SALT: u64 = 0xba7c_4e50_0001;

/// Cycles through the dataset in `batch_size` windows, reshuffling after
/// each full pass.
struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batches<'a> {
    fn new(data: &'a Dataset, seed: u64) -> Self {
        Self {
            data,
            order: (0..data.len()).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ BATCH_SALT),
        }
    }

    fn next_batch(&mut self, size: usize) -> Dataset {
        let mut rows = Vec::with_capacity(size);
        while rows.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (size - rows.len()).min(self.order.len() - self.pos);
            rows.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        self.data.select(&rows)
    }
}

fn micro_batches(batch: &Dataset, k: usize) -> Vec<Dataset> {
    let per = batch.len() / k;
    (0..k)
        .map(|i| batch.select(&(i * per..(i + 1) * per).collect::<Vec<_>>()))
        .collect()
}

fn lion_at(cfg: &TrainConfig, step_index: usize) -> LionHyper {
    let lr = cfg.lion.schedule.lr_at(cfg.lion.lr, step_index, cfg.total_steps());
    cfg.lion.with_lr(lr)
}

/// Scale applied to each micro-batch's output gradient so the accumulated
/// gradient is the mean over the whole batch.
fn micro_scale(k: usize) -> Option<f32> {
    (k > 1).then(|| 1.0 / k as f32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub optimizer: OptimizerKind,
    /// Loss over the full dataset before the first step.
    pub initial_loss: f64,
    /// Loss over the full dataset after the last step.
    pub final_loss: f64,
    pub metrics: RunMetrics,
    /// Measured model-state bytes at the last step, gradients held.
    pub profile: MemoryProfile,
    /// High-water marks of transient fp buffers (quantized runs only).
    pub transient: TransientPeaks,
}

pub struct QftRun {
    pub outcome: RunOutcome,
    pub model: Model<f32>,
    pub state: LionState<f32>,
    /// Threshold refreshes performed (one per epoch after the first).
    pub refreshes: usize,
}

pub fn dataset_loss(model: &Model<f32>, data: &Dataset) -> Result<f64> {
    let out = model.predict(&data.inputs)?;
    Ok(loss_and_grad(&out, &data.targets, model.loss_kind())?.0 as f64)
}

fn fp_dataset_loss(net: &FpMlp<f32>, data: &Dataset) -> Result<f64> {
    Ok(net.loss(&data.inputs, &data.targets)? as f64)
}

pub fn load_dataset(cfg: &TrainConfig) -> Result<Dataset> {
    let dims = &cfg.model.layer_dims;
    let (features, targets) = match (dims.first(), dims.last()) {
        (Some(&f), Some(&t)) => (f, t),
        _ => return Err(QftError::Config("model has no layers".into())),
    };
    ingest_dataset(&cfg.dataset_source(), features, targets, cfg.seed)
}

/// Quantized training: forward → loss → backward per micro-batch into the
/// gradient stack → quantized Lion. Thresholds are refreshed at the start of
/// every epoch after the first. With `checkpoint_dir`, a checkpoint is
/// written after each epoch.
pub fn run_qft(cfg: &TrainConfig, data: &Dataset, checkpoint_dir: Option<&Path>) -> Result<QftRun> {
    cfg.validate()?;
    let mut model = Model::<f32>::build(&cfg.model, cfg.weight_codec())?;
    let codec = cfg.state_codec();
    let mut state = LionState::new(&model, codec)?;
    let initial_loss = dataset_loss(&model, data)?;
    let mut batches = Batches::new(data, cfg.seed);
    let mut metrics = RunMetrics::new();
    let mut profile = measured_profile(&model, &state, &GradientStack::new(), None);
    let mut refreshes = 0;
    let k = cfg.micro_batches;
    transient::reset();

    for epoch in 0..cfg.epochs {
        if epoch > 0 {
            model.refresh_thresholds(cfg.outlier_fraction)?;
            refreshes += 1;
        }
        for s in 0..cfg.steps_per_epoch {
            let index = epoch * cfg.steps_per_epoch + s;
            let step = index + 1;
            let batch = batches.next_batch(cfg.batch_size);
            let mut stack = GradientStack::new();
            let mut loss_sum = 0.0;
            let mut grad_sq_norm = 0.0;
            for micro in micro_batches(&batch, k) {
                let (out, saved) = model.forward(&micro.inputs).map_err(|e| e.at_step(step))?;
                let (loss, mut g) = loss_and_grad(&out, &micro.targets, model.loss_kind())?;
                drop(out);
                if let Some(c) = micro_scale(k) {
                    g = g.scale(c);
                }
                let report = backward(saved, g, &mut stack, codec).map_err(|e| e.at_step(step))?;
                loss_sum += loss as f64;
                grad_sq_norm = report.grad_sq_norm;
            }
            profile = measured_profile(&model, &state, &stack, None);
            lion_step_quantized(&mut model, &mut state, &mut stack, &lion_at(cfg, index))
                .map_err(|e| e.at_step(step))?;
            metrics.push(StepMetrics {
                step,
                epoch,
                loss: loss_sum / k as f64,
                grad_norm: grad_sq_norm.sqrt(),
                state_bytes: profile.model_state_bytes(),
            })?;
        }
        if let Some(dir) = checkpoint_dir {
            let step = ((epoch + 1) * cfg.steps_per_epoch) as u64;
            save_checkpoint(&model, &state, step, &dir.join(format!("epoch-{}.qftc", epoch + 1)))?;
        }
    }

    let final_loss = dataset_loss(&model, data)?;
    Ok(QftRun {
        outcome: RunOutcome {
            optimizer: OptimizerKind::QftLion,
            initial_loss,
            final_loss,
            metrics,
            profile,
            transient: transient::peaks(),
        },
        model,
        state,
        refreshes,
    })
}

enum FpOptimizer {
    Lion(FpLionState<f32>),
    Adam(AdamState<f32>),
}

impl FpOptimizer {
    fn view(&self) -> FpOptimizerState<'_, f32> {
        match self {
            FpOptimizer::Lion(s) => FpOptimizerState::Lion(s),
            FpOptimizer::Adam(s) => FpOptimizerState::Adam(s),
        }
    }
}

/// Full-precision baseline with the same data order, micro-batching and
/// initial weights as [`run_qft`]. Returns the outcome and final weights.
pub fn run_fp(cfg: &TrainConfig, data: &Dataset, kind: OptimizerKind) -> Result<(RunOutcome, Vec<Tensor>)> {
    cfg.validate()?;
    let mut net = FpMlp::<f32>::build(&cfg.model)?;
    let mut opt = match kind {
        OptimizerKind::FpLion => FpOptimizer::Lion(FpLionState::zeros_like(&net.weights)),
        OptimizerKind::FpAdam => FpOptimizer::Adam(AdamState::zeros_like(&net.weights)),
        OptimizerKind::QftLion => {
            return Err(QftError::InvalidArgument("run_fp needs an fp optimizer".into()))
        }
    };
    let initial_loss = fp_dataset_loss(&net, data)?;
    let mut batches = Batches::new(data, cfg.seed);
    let mut metrics = RunMetrics::new();
    let mut profile = measured_fp_profile(&net.weights, None, opt.view());
    let k = cfg.micro_batches;

    for epoch in 0..cfg.epochs {
        for s in 0..cfg.steps_per_epoch {
            let index = epoch * cfg.steps_per_epoch + s;
            let step = index + 1;
            let batch = batches.next_batch(cfg.batch_size);
            let mut grads: Option<Vec<Tensor>> = None;
            let mut loss_sum = 0.0;
            for micro in micro_batches(&batch, k) {
                let (out, inputs) = net.forward(&micro.inputs)?;
                let (loss, mut g) = loss_and_grad(&out, &micro.targets, net.loss)?;
                if let Some(c) = micro_scale(k) {
                    g = g.scale(c);
                }
                let gs = net.backward(inputs, g).map_err(|e| e.at_step(step))?;
                grads = Some(match grads {
                    None => gs,
                    Some(acc) => acc
                        .iter()
                        .zip(&gs)
                        .map(|(a, b)| a.add(b))
                        .collect::<Result<_>>()?,
                });
                loss_sum += loss as f64;
            }
            let grads = grads.expect("at least one micro-batch");
            let grad_norm = grads.iter().map(|g| g.sum_squares() as f64).sum::<f64>().sqrt();
            profile = measured_fp_profile(&net.weights, Some(&grads), opt.view());
            match &mut opt {
                FpOptimizer::Lion(st) => {
                    lion_step_reference(&mut net.weights, st, &grads, &lion_at(cfg, index))
                }
                FpOptimizer::Adam(st) => adam_step_reference(&mut net.weights, st, &grads, &cfg.adam),
            }
            .map_err(|e| e.at_step(step))?;
            metrics.push(StepMetrics {
                step,
                epoch,
                loss: loss_sum / k as f64,
                grad_norm,
                state_bytes: profile.model_state_bytes(),
            })?;
        }
    }

    let final_loss = fp_dataset_loss(&net, data)?;
    Ok((
        RunOutcome {
            optimizer: kind,
            initial_loss,
            final_loss,
            metrics,
            profile,
            transient: TransientPeaks::default(),
        },
        net.weights,
    ))
}

/// Run the configured optimizer and write `metrics.csv` (plus per-epoch and
/// final checkpoints for quantized runs) into `output_dir` when set.
pub fn train(cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let dir = cfg.output_dir.as_deref();
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let outcome = match cfg.optimizer {
        OptimizerKind::QftLion => {
            let run = run_qft(cfg, &data, dir)?;
            if let Some(dir) = dir {
                save_checkpoint(&run.model, &run.state, cfg.total_steps() as u64, &dir.join("final.qftc"))?;
            }
            run.outcome
        }
        kind => run_fp(cfg, &data, kind)?.0,
    };
    if let Some(dir) = dir {
        outcome.metrics.write_csv(&dir.join("metrics.csv"))?;
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    /// qft-lion, fp-lion, fp-adam in that order.
    pub runs: Vec<RunOutcome>,
}

impl Comparison {
    pub fn get(&self, kind: OptimizerKind) -> Option<&RunOutcome> {
        self.runs.iter().find(|r| r.optimizer == kind)
    }

    /// Per-step batch loss of every method side by side.
    pub fn loss_curves_csv(&self) -> String {
        let mut out = String::from("step");
        for r in &self.runs {
            let _ = write!(out, ",{}", r.optimizer.name());
        }
        out.push('\n');
        let steps = self.runs.iter().map(|r| r.metrics.len()).max().unwrap_or(0);
        for i in 0..steps {
            let _ = write!(out, "{}", i + 1);
            for r in &self.runs {
                match r.metrics.rows().get(i) {
                    Some(m) => {
                        let _ = write!(out, ",{:.9e}", m.loss);
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// `method,component,bytes` rows for every run.
    pub fn profiles_csv(&self) -> String {
        let mut out = format!("{}\n", MemoryProfile::CSV_HEADER);
        for r in &self.runs {
            for line in r.profile.csv_rows().lines() {
                // the profile names the memory method; label rows by run
                let rest = line.split_once(',').map_or(line, |(_, rest)| rest);
                let _ = writeln!(out, "{},{rest}", r.optimizer.name());
            }
        }
        out
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let lion_bytes = self
            .get(OptimizerKind::FpLion)
            .map(|r| r.profile.model_state_bytes());
        for r in &self.runs {
            let name = r.optimizer.name();
            let p = &r.profile;
            let _ = writeln!(out, "{name}.initial_loss={:.6e}", r.initial_loss);
            let _ = writeln!(out, "{name}.final_loss={:.6e}", r.final_loss);
            for (component, bytes) in p.components() {
                let _ = writeln!(out, "{name}.{component}_bytes={bytes}");
            }
            let _ = writeln!(out, "{name}.ratio_vs_adam={:.6}", p.ratio_vs_adam());
            if let Some(lb) = lion_bytes.filter(|&b| b > 0) {
                let _ = writeln!(
                    out,
                    "{name}.state_vs_fp_lion={:.6}",
                    p.model_state_bytes() as f64 / lb as f64
                );
            }
        }
        let _ = writeln!(out, "units={}", Units::GiB.label());
        out
    }
}

/// Train qft-lion, fp-lion and fp-adam from the same seed and data. With
/// `output_dir`, writes `loss_curves.csv`, `profiles.csv` and `report.txt`.
pub fn compare_runs(cfg: &TrainConfig) -> Result<Comparison> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let qft = run_qft(cfg, &data, None)?.outcome;
    let lion = run_fp(cfg, &data, OptimizerKind::FpLion)?.0;
    let adam = run_fp(cfg, &data, OptimizerKind::FpAdam)?.0;
    let cmp = Comparison {
        runs: vec![qft, lion, adam],
    };
    if let Some(dir) = cfg.output_dir.as_deref() {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("loss_curves.csv"), cmp.loss_curves_csv())?;
        std::fs::write(dir.join("profiles.csv"), cmp.profiles_csv())?;
        std::fs::write(dir.join("report.txt"), cmp.report())?;
    }
    Ok(cmp)
}
