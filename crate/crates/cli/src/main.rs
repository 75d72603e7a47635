use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use qft::profiler::{
    analytic_profile, distribution_stats, load_tensor, sweep_csv, threshold_sweep, Method,
    MemoryProfile, ProfileConfig, Units,
};
use qft::quant::{ThresholdRule, DEFAULT_BIT_WIDTH};
use qft::trainer::{compare_runs, train, TrainConfig};

#[derive(Parser)]
#[command(name = "qft", version, about = "Quantized full-parameter tuning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Analytic model-state memory for a parameter count.
    Profile {
        #[arg(long)]
        params: u64,
        /// adam, adam-mixed, bitsandbytes, lion, qft or all.
        #[arg(long, default_value = "all")]
        method: String,
        #[arg(long, default_value_t = 0.01)]
        outlier_fraction: f64,
        #[arg(long, default_value_t = 0.0)]
        unquantized_fraction: f64,
        /// Elements per quantization channel.
        #[arg(long, default_value_t = 4096)]
        channel_len: u64,
        /// gib or gb.
        #[arg(long, default_value = "gib")]
        units: String,
        /// Emit method,component,bytes rows instead of the report.
        #[arg(long)]
        csv: bool,
    },
    /// Bytes and L2 error of the dense-and-sparse split across outlier fractions.
    Sweep {
        /// Checkpoint path or synthetic:<normal|heavy>-<rows>x<cols>[-s<seed>].
        #[arg(long)]
        weights: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.0045,0.01,0.03,0.05")]
        fractions: Vec<f64>,
        /// Layer to read from a checkpoint, 1-based.
        #[arg(long, default_value_t = 1)]
        layer: usize,
        #[arg(long, default_value_t = DEFAULT_BIT_WIDTH)]
        bit_width: u8,
        /// Thresholds from order statistics instead of a share of the range.
        #[arg(long, default_value = "percentile")]
        rule: String,
    },
    /// Train qft-lion, fp-lion and fp-adam from one config and compare.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Distribution statistics of a tensor.
    Stats {
        /// Checkpoint path or synthetic:<normal|heavy>-<rows>x<cols>[-s<seed>].
        #[arg(long)]
        tensor: String,
        #[arg(long, default_value_t = 1)]
        layer: usize,
        /// Outliers are counted beyond this many standard deviations.
        #[arg(long, default_value_t = 3.0)]
        k: f64,
    },
}

fn parse_rule(s: &str) -> Result<ThresholdRule> {
    match s {
        "percentile" => Ok(ThresholdRule::Percentile),
        "range-fraction" => Ok(ThresholdRule::RangeFraction),
        _ => bail!("unknown threshold rule '{s}', expected percentile or range-fraction"),
    }
}

fn profile(
    params: u64,
    method: &str,
    cfg: ProfileConfig,
    units: Units,
    csv: bool,
) -> Result<String> {
    let methods = if method == "all" {
        Method::ALL.to_vec()
    } else {
        vec![method.parse::<Method>()?]
    };
    let profiles = methods
        .into_iter()
        .map(|m| analytic_profile(&ProfileConfig { param_count: params, ..cfg.clone() }, m))
        .collect::<qft::Result<Vec<_>>>()?;
    let mut out = String::new();
    if csv {
        out.push_str(MemoryProfile::CSV_HEADER);
        out.push('\n');
        for p in &profiles {
            out.push_str(&p.csv_rows());
        }
    } else {
        for (i, p) in profiles.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&p.report(units));
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let out = train(&cfg).context("training failed")?;
            println!("optimizer={}", out.optimizer.name());
            println!("steps={}", out.metrics.len());
            println!("initial_loss={:.6e}", out.initial_loss);
            println!("final_loss={:.6e}", out.final_loss);
            println!("state_bytes={}", out.profile.model_state_bytes());
            if let Some(dir) = &cfg.output_dir {
                println!("output_dir={}", dir.display());
            }
        }
        Command::Profile {
            params,
            method,
            outlier_fraction,
            unquantized_fraction,
            channel_len,
            units,
            csv,
        } => {
            let cfg = ProfileConfig {
                outlier_fraction,
                unquantized_fraction,
                channel_len,
                ..ProfileConfig::default()
            };
            print!("{}", profile(params, &method, cfg, units.parse()?, csv)?);
        }
        Command::Sweep {
            weights,
            fractions,
            layer,
            bit_width,
            rule,
        } => {
            let w = load_tensor(&weights, layer)?;
            let rows = threshold_sweep(&w, &fractions, parse_rule(&rule)?, bit_width)?;
            print!("{}", sweep_csv(&rows));
        }
        Command::Compare { config } => {
            let cfg = TrainConfig::load(&config)?;
            let cmp = compare_runs(&cfg).context("comparison failed")?;
            print!("{}", cmp.report());
        }
        Command::Stats { tensor, layer, k } => {
            let t = load_tensor(&tensor, layer)?;
            print!("{}", distribution_stats(&t, k)?.report());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
