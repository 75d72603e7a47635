use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QftError, Result};
use crate::network::ModelConfig;
use crate::optim::{AdamHyper, LionHyper};
use crate::quant::{
    QuantMode, StateCodec, ThresholdRule, WeightCodec, DEFAULT_BIT_WIDTH,
    DEFAULT_OUTLIER_FRACTION, MAX_BIT_WIDTH, MIN_BIT_WIDTH,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    QftLion,
    FpLion,
    FpAdam,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [
        OptimizerKind::QftLion,
        OptimizerKind::FpLion,
        OptimizerKind::FpAdam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::QftLion => "qft-lion",
            OptimizerKind::FpLion => "fp-lion",
            OptimizerKind::FpAdam => "fp-adam",
        }
    }
}

/// Rows of the synthetic dataset when none is configured.
pub const DEFAULT_SYNTHETIC_ROWS: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub lion: LionHyper,
    pub adam: AdamHyper,
    /// Rows per optimizer step, split evenly across micro-batches.
    pub batch_size: usize,
    pub micro_batches: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub outlier_fraction: f64,
    pub bit_width: u8,
    pub quant_mode: QuantMode,
    pub threshold_rule: ThresholdRule,
    /// CSV path or `synthetic:<kind>-<features>-<targets>-n<rows>`; a
    /// synthetic regression set matching the model when absent.
    pub dataset: Option<String>,
    /// Seed for data generation, shuffling and batch order.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(vec![8, 32, 1]),
            optimizer: OptimizerKind::QftLion,
            lion: LionHyper::default(),
            adam: AdamHyper::default(),
            batch_size: 32,
            micro_batches: 1,
            epochs: 1,
            steps_per_epoch: 100,
            outlier_fraction: DEFAULT_OUTLIER_FRACTION,
            bit_width: DEFAULT_BIT_WIDTH,
            quant_mode: QuantMode::Affine,
            threshold_rule: ThresholdRule::Percentile,
            dataset: None,
            seed: 0,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| QftError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            QftError::Config(msg) => QftError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| QftError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lion.validate()?;
        self.adam.validate()?;
        let counts = [
            ("batch_size", self.batch_size),
            ("micro_batches", self.micro_batches),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(QftError::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size % self.micro_batches != 0 {
            return Err(QftError::Config(format!(
                "batch_size {} is not divisible by micro_batches {}",
                self.batch_size, self.micro_batches
            )));
        }
        if !(0.0..0.5).contains(&self.outlier_fraction) {
            return Err(QftError::Config(format!(
                "outlier_fraction {} outside [0, 0.5)",
                self.outlier_fraction
            )));
        }
        if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&self.bit_width) {
            return Err(QftError::Config(format!(
                "bit_width {} outside [{MIN_BIT_WIDTH}, {MAX_BIT_WIDTH}]",
                self.bit_width
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    pub fn micro_batch_size(&self) -> usize {
        self.batch_size / self.micro_batches
    }

    pub fn dataset_source(&self) -> String {
        self.dataset.clone().unwrap_or_else(|| {
            let dims = &self.model.layer_dims;
            format!(
                "synthetic:reg-{}-{}-n{DEFAULT_SYNTHETIC_ROWS}",
                dims.first().copied().unwrap_or(0),
                dims.last().copied().unwrap_or(0)
            )
        })
    }

    pub fn weight_codec(&self) -> WeightCodec {
        WeightCodec {
            mode: self.quant_mode,
            bit_width: self.bit_width,
            outlier_fraction: self.outlier_fraction,
            rule: self.threshold_rule,
        }
    }

    pub fn state_codec(&self) -> StateCodec {
        StateCodec {
            mode: self.quant_mode,
            bit_width: self.bit_width,
        }
    }
}
