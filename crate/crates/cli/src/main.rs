//! `intft`: train integer tiny transformers and run the quantization experiments.

mod config;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use intft_core::{map_to_dfp, quant_error_stats, FpTensor, RoundingMode};
use intft_train::experiments::bounds::{verify_mapping_bounds, write_mapping_csv};
use intft_train::experiments::gradvar::{measure_gradient_variance, write_gradvar_csv};
use intft_train::experiments::trajectory::{run_loss_trajectory, write_trajectory_csv};
use intft_train::experiments::{run_activation_sweep, run_bitwidth_sweep, summarize, write_sweep_csv, Meta, SweepRow};
use intft_train::train::MetricsWriter;
use intft_train::{train_checkpointed, DataError, Model, TrainError};
use serde_json::Value;

use config::{parse_override, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Runtime(_) => "runtime",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Data(DataError::Spec(_)) => Self::Config(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "intft", version, about = "Integer (dynamic fixed-point) training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat JSON config; unknown keys are rejected.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a config key (value parsed as JSON, else taken as a string).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bit widths (comma separated); meaning depends on the subcommand.
    #[arg(long, global = true, value_delimiter = ',')]
    bits: Vec<u32>,

    /// Activation bit widths (comma separated).
    #[arg(long = "act-bits", global = true, value_delimiter = ',')]
    act_bits: Vec<u32>,

    /// Monte-Carlo size: elements per cell for verify-bounds, trials for verify-gradvar.
    #[arg(long, global = true)]
    trials: Option<usize>,

    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Clone, PartialEq)]
enum Command {
    /// Train one model; writes metrics.csv and checkpoint.bin.
    Train,
    /// Bit-width grid with tied widths plus FP32 baseline; writes sweep.csv.
    Sweep,
    /// Activation width grid at fixed weight/gradient width; writes activation_sweep.csv.
    ActSweep,
    /// Mapping error bound check; writes variance_report.csv.
    VerifyBounds,
    /// Weight-gradient variance inequality check; writes gradvar_report.csv.
    VerifyGradvar,
    /// Paired FP32 / b16 / b8+a12 loss traces; writes trajectory.csv.
    Trajectory,
    /// Map a tensor file (JSON array or whitespace/comma separated numbers) and print error stats.
    QuantizeCheck { path: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Sweep => "sweep",
            Self::ActSweep => "act-sweep",
            Self::VerifyBounds => "verify-bounds",
            Self::VerifyGradvar => "verify-gradvar",
            Self::Trajectory => "trajectory",
            Self::QuantizeCheck { .. } => "quantize-check",
        }
    }
}

fn single(flag: &str, values: &[u32]) -> Result<Value, CliError> {
    match values {
        [v] => Ok(Value::from(*v)),
        _ => Err(CliError::Config(format!("--{flag} takes one value here"))),
    }
}

/// Translates the typed flags into config keys for the given subcommand.
fn flag_overrides(cli: &Cli) -> Result<Vec<(String, Value)>, CliError> {
    use Command::*;
    let mut out = Vec::new();
    if let Some(seed) = cli.seed {
        out.push(("seed".into(), Value::from(seed)));
    }
    let unused = |flag: &str| CliError::Config(format!("--{flag} is not used by {}", cli.command.name()));
    if !cli.bits.is_empty() {
        let (key, value) = match cli.command {
            Train | QuantizeCheck { .. } => ("bits", single("bits", &cli.bits)?),
            ActSweep => ("act_sweep_weight_bits", single("bits", &cli.bits)?),
            Sweep => ("sweep_bits", Value::from(cli.bits.clone())),
            VerifyBounds => ("bound_bits", Value::from(cli.bits.clone())),
            VerifyGradvar => ("gradvar_bits", Value::from(cli.bits.clone())),
            Trajectory => return Err(unused("bits")),
        };
        out.push((key.into(), value));
    }
    if !cli.act_bits.is_empty() {
        let (key, value) = match cli.command {
            Train => ("act_bits", single("act-bits", &cli.act_bits)?),
            Sweep => ("sweep_act_bits", Value::from(cli.act_bits.clone())),
            ActSweep => ("act_sweep_bits", Value::from(cli.act_bits.clone())),
            _ => return Err(unused("act-bits")),
        };
        out.push((key.into(), value));
    }
    if let Some(trials) = cli.trials {
        let key = match cli.command {
            VerifyBounds => "bound_elements",
            VerifyGradvar => "gradvar_trials",
            _ => return Err(unused("trials")),
        };
        out.push((key.into(), Value::from(trials)));
    }
    Ok(out)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(dir.join(name), text + "\n")?;
    Ok(())
}

/// Saves the offending sample of a bound violation next to the report.
fn record_violation(out: &Path, err: TrainError) -> CliError {
    if let TrainError::BoundViolation { context, sample } = &err {
        let sample: Value = serde_json::from_str(sample).unwrap_or(Value::String(sample.clone()));
        let body = serde_json::json!({ "context": context, "sample": sample });
        if let Err(e) = write_json(out, "violation.json", &body) {
            return e;
        }
        return CliError::Runtime(format!("{context}; sample written to {}", out.join("violation.json").display()));
    }
    err.into()
}

fn print_groups(rows: &[SweepRow]) {
    for g in summarize(rows) {
        println!("b={} b_act={} mean={:.3} std={:.3} n={}", g.b, g.b_act, g.mean, g.std, g.metrics.len());
    }
}

fn read_tensor(path: &Path) -> Result<FpTensor, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read tensor {}: {e}", path.display())))?;
    let values: Vec<f32> = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(_) => text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f32>().map_err(|e| CliError::Config(format!("bad number `{s}` in {}: {e}", path.display()))))
            .collect::<Result<_, _>>()?,
    };
    if values.is_empty() {
        return Err(CliError::Config(format!("tensor file {} is empty", path.display())));
    }
    Ok(FpTensor::vector(values))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    overrides.extend(flag_overrides(cli)?);
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;

    if let Command::QuantizeCheck { path } = &cli.command {
        if cfg.bits == 0 {
            return Err(CliError::Config("quantize-check needs bits > 0".into()));
        }
        let f = read_tensor(path)?;
        let q = map_to_dfp(&f, cfg.bits, RoundingMode::Nearest).map_err(|e| CliError::Runtime(e.to_string()))?;
        let s = quant_error_stats(&f, &q).map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("bits {}", cfg.bits);
        println!("elements {}", f.len());
        println!("e_scale {}", q.scale());
        println!("step {}", s.step);
        println!("max_abs_err {}", s.max_abs_err);
        println!("mean_err {}", s.mean_err);
        println!("var_err {}", s.var_err);
        return Ok(());
    }

    let out = &cli.out;
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", out.display())))?;
    let seeds = match cli.command {
        Command::Sweep | Command::ActSweep => cfg.seeds.clone(),
        _ => vec![cfg.seed],
    };
    write_json(out, "config.json", &cfg)?;
    write_json(out, "meta.json", &Meta::new(cli.command.name(), &cfg, seeds))?;

    match &cli.command {
        Command::Train => {
            let base = cfg.base();
            let data = base.load_data()?;
            write_json(out, "vocab.json", &data.summary)?;
            log::info!("{} train / {} eval examples, {} classes", data.train.len(), data.eval.len(), data.classes);
            let mut model = Model::build(cfg.model(), cfg.precision(), cfg.seed)?;
            let mut metrics = MetricsWriter::new(create(out, "metrics.csv")?)?;
            let result = train_checkpointed(&mut model, &data, &base.train, |r| {
                log::info!("step {} loss {:.5} eval {:.2}", r.step, r.loss, r.eval_metric);
                metrics.append(r)
            });
            match result {
                Ok((m, ckpt)) => {
                    ckpt.save(&out.join("checkpoint.bin"))?;
                    println!("final_loss {:.6}", m.final_loss);
                    println!("final_metric {:.4}", m.final_metric);
                }
                Err(TrainError::NonFiniteLoss { step, last_good }) => {
                    let path = out.join("last_good.bin");
                    last_good.save(&path)?;
                    return Err(CliError::Runtime(format!(
                        "non-finite loss at step {step}; last good state written to {}",
                        path.display()
                    )));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Sweep | Command::ActSweep => {
            let (rows, name) = if cli.command == Command::Sweep {
                (run_bitwidth_sweep(&cfg.sweep())?, "sweep.csv")
            } else {
                (run_activation_sweep(&cfg.act_sweep())?, "activation_sweep.csv")
            };
            write_sweep_csv(&rows, create(out, name)?)?;
            print_groups(&rows);
        }
        Command::VerifyBounds => {
            let rows = verify_mapping_bounds(&cfg.mapping_bounds()).map_err(|e| record_violation(out, e))?;
            write_mapping_csv(&rows, create(out, "variance_report.csv")?)?;
            let count: u64 = rows.iter().map(|r| r.count).sum();
            println!("elements {count} violations 0 rows {}", rows.len());
        }
        Command::VerifyGradvar => {
            let mut rows = Vec::new();
            let mut violation = None;
            for &b in &cfg.gradvar_bits {
                let (row, err) = measure_gradient_variance(&cfg.gradvar(b))?;
                println!("b={} violations {} max_ratio {:.4} inflation {:.3e}", row.b, row.violations, row.max_ratio, row.inflation);
                rows.push(row);
                violation = violation.or(err);
            }
            write_gradvar_csv(&rows, create(out, "gradvar_report.csv")?)?;
            if let Some(e) = violation {
                return Err(record_violation(out, e));
            }
        }
        Command::Trajectory => {
            let rows = run_loss_trajectory(&cfg.base(), cfg.seed)?;
            write_trajectory_csv(&rows, create(out, "trajectory.csv")?)?;
            if let Some(last) = rows.last() {
                println!("step {} fp32 {:.5} b16 {:.5} b8_a12 {:.5}", last.step, last.fp32, last.b16, last.b8_a12);
            }
        }
        Command::QuantizeCheck { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
