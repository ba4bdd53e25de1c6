//! Desk-scale experiments: bit-width sweeps, loss trajectories, and Monte-Carlo
//! checks of the mapping and gradient-variance bounds.

pub mod bounds;
pub mod gradvar;
pub mod stats;
pub mod trajectory;

use std::io::{Read, Write};

use intft_core::layers::QuantConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_dataset, Dataset, DatasetSource, DatasetSpec, SyntheticTask};
use crate::error::{Result, TrainError};
use crate::model::{Model, Precision, TinyTransformerConfig};
use crate::train::{train, RunMetrics, TrainConfig};

/// Everything a single training run needs apart from its precision and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentBase {
    pub model: TinyTransformerConfig,
    pub train: TrainConfig,
    pub data: DatasetSpec,
}

impl Default for ExperimentBase {
    fn default() -> Self {
        Self {
            model: TinyTransformerConfig {
                vocab: 32,
                hidden: 8,
                layers: 1,
                heads: 1,
                max_len: 16,
                classes: 2,
                ..TinyTransformerConfig::default()
            },
            train: TrainConfig {
                steps: 800,
                ..TrainConfig::default()
            },
            data: DatasetSpec {
                source: DatasetSource::Synthetic {
                    seed: 11,
                    size: 10_000,
                    vocab: 32,
                    seq_len: 16,
                    task: SyntheticTask::WeightedSum,
                    zipf: 0.0,
                },
                train_fraction: 0.8,
                eval_fraction: 0.2,
                split_seed: 11,
            },
        }
    }
}

impl ExperimentBase {
    pub fn load_data(&self) -> Result<Dataset> {
        let data = load_dataset(&self.data)?;
        if data.vocab > self.model.vocab || data.seq_len > self.model.max_len || data.classes > self.model.classes {
            return Err(TrainError::Config(format!(
                "dataset (vocab {}, seq_len {}, classes {}) does not fit the model",
                data.vocab, data.seq_len, data.classes
            )));
        }
        Ok(data)
    }
}

/// Widths of one run; `Fp32` is the floating-point baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RunPrecision {
    Fp32,
    Int { b: u32, b_act: u32 },
}

impl RunPrecision {
    pub fn precision(&self, seed: u64) -> Precision {
        match *self {
            Self::Fp32 => Precision::Fp32,
            Self::Int { b, b_act } => Precision::Integer(QuantConfig::uniform(b, seed).with_activation_bits(b_act)),
        }
    }

    /// CSV key: FP32 rows are tagged `b = 0, b_act = 0`.
    pub fn key(&self) -> (u32, u32) {
        match *self {
            Self::Fp32 => (0, 0),
            Self::Int { b, b_act } => (b, b_act),
        }
    }
}

/// Trains one model from `seed` (initialization, rounding streams and batch order).
pub fn run_one(base: &ExperimentBase, data: &Dataset, precision: RunPrecision, seed: u64) -> Result<RunMetrics> {
    let mut model = Model::build(base.model, precision.precision(seed), seed)?;
    let cfg = TrainConfig { seed, ..base.train };
    train(&mut model, data, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentBase,
    /// Weight and gradient widths.
    pub bits: Vec<u32>,
    /// Activation widths; `None` ties them to `bits`.
    pub act_bits: Option<Vec<u32>>,
    pub seeds: Vec<u64>,
    pub include_fp32: bool,
}

impl SweepSpec {
    pub fn grid(&self) -> Result<Vec<RunPrecision>> {
        if self.seeds.is_empty() {
            return Err(TrainError::Config("sweep needs at least one seed".into()));
        }
        let mut grid: Vec<RunPrecision> = match &self.act_bits {
            None => self.bits.iter().map(|&b| RunPrecision::Int { b, b_act: b }).collect(),
            Some(acts) => self
                .bits
                .iter()
                .flat_map(|&b| acts.iter().map(move |&b_act| RunPrecision::Int { b, b_act }))
                .collect(),
        };
        if self.include_fp32 {
            grid.push(RunPrecision::Fp32);
        }
        if grid.is_empty() {
            return Err(TrainError::Config("sweep grid is empty".into()));
        }
        for p in &grid {
            if let RunPrecision::Int { b, b_act } = *p {
                QuantConfig::uniform(b, 0).with_activation_bits(b_act).validate()?;
            }
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub b: u32,
    pub b_act: u32,
    pub seed: u64,
    pub final_loss: f64,
    pub final_metric: f64,
}

pub const SWEEP_HEADER: [&str; 5] = ["b", "b_act", "seed", "final_loss", "final_metric"];

/// Trains every (grid point, seed) pair in parallel; rows come back sorted by
/// `(b, b_act, seed)` whatever the completion order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    let grid = spec.grid()?;
    let data = spec.base.load_data()?;
    let jobs: Vec<(RunPrecision, u64)> = grid
        .iter()
        .flat_map(|&p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|&(p, seed)| {
            let (b, b_act) = p.key();
            let m = run_one(&spec.base, &data, p, seed).map_err(|e| TrainError::Grid {
                context: format!("b={b} b_act={b_act} seed={seed}"),
                source: Box::new(e),
            })?;
            Ok(SweepRow {
                b,
                b_act,
                seed,
                final_loss: m.final_loss,
                final_metric: m.final_metric,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by_key(|r| (r.b, r.b_act, r.seed));
    Ok(rows)
}

/// Tied weight/gradient/activation widths plus FP32 baseline rows.
pub fn run_bitwidth_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    run_sweep(spec)
}

/// Fixed weight/gradient width, varying activation width.
pub fn run_activation_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.bits.len() != 1 || spec.act_bits.as_ref().is_none_or(|a| a.is_empty()) {
        return Err(TrainError::Config(
            "activation sweep needs exactly one weight width and a non-empty act_bits list".into(),
        ));
    }
    run_sweep(spec)
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(SWEEP_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_csv(r: impl Read) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != SWEEP_HEADER {
        return Err(TrainError::Config(format!("unexpected sweep header {header:?}")));
    }
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub b: u32,
    pub b_act: u32,
    pub metrics: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Per-(b, b_act) seed statistics, sorted by key.
pub fn summarize(rows: &[SweepRow]) -> Vec<GroupSummary> {
    let mut groups: std::collections::BTreeMap<(u32, u32), Vec<f64>> = Default::default();
    for r in rows {
        groups.entry((r.b, r.b_act)).or_default().push(r.final_metric);
    }
    groups
        .into_iter()
        .map(|((b, b_act), metrics)| GroupSummary {
            b,
            b_act,
            mean: stats::mean(&metrics),
            std: stats::std_dev(&metrics),
            metrics,
        })
        .collect()
}

/// Provenance written next to every experiment output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: serde_json::Value,
}

impl Meta {
    pub fn new(command: &str, config: &impl Serialize, seeds: Vec<u64>) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(&config),
            seeds,
            config,
        }
    }

    pub fn write(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| TrainError::Io(e.into()))
    }
}

/// SHA-256 of the compact JSON form (object keys are sorted by serde_json).
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_base() -> ExperimentBase {
        let mut base = ExperimentBase::default();
        base.train.steps = 20;
        base.train.log_interval = 10;
        if let DatasetSource::Synthetic { size, .. } = &mut base.data.source {
            *size = 200;
        }
        base
    }

    #[test]
    fn sweep_rows_sorted_and_round_trip() {
        let spec = SweepSpec {
            base: tiny_base(),
            bits: vec![12, 8],
            act_bits: None,
            seeds: vec![1, 0],
            include_fp32: true,
        };
        let rows = run_bitwidth_sweep(&spec).unwrap();
        let keys: Vec<(u32, u32, u64)> = rows.iter().map(|r| (r.b, r.b_act, r.seed)).collect();
        assert_eq!(keys, vec![(0, 0, 0), (0, 0, 1), (8, 8, 0), (8, 8, 1), (12, 12, 0), (12, 12, 1)]);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"b,b_act,seed,final_loss,final_metric\n"));
        assert_eq!(read_sweep_csv(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn single_seed_activation_grid_is_well_formed() {
        let spec = SweepSpec {
            base: tiny_base(),
            bits: vec![8],
            act_bits: Some(vec![8, 12]),
            seeds: vec![3],
            include_fp32: false,
        };
        let rows = run_activation_sweep(&spec).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.b == 8 && r.seed == 3));
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        assert!(summary.iter().all(|g| g.std == 0.0));
    }

    #[test]
    fn bad_grids_rejected() {
        let mut spec = SweepSpec {
            base: tiny_base(),
            bits: vec![],
            act_bits: None,
            seeds: vec![0],
            include_fp32: false,
        };
        assert!(matches!(run_sweep(&spec), Err(TrainError::Config(_))));
        spec.bits = vec![8];
        spec.seeds.clear();
        assert!(run_sweep(&spec).is_err());
        spec.seeds = vec![0];
        spec.bits = vec![40];
        assert!(run_sweep(&spec).is_err());
        spec.bits = vec![8, 10];
        spec.act_bits = Some(vec![8]);
        assert!(run_activation_sweep(&spec).is_err());
    }

    #[test]
    fn training_failures_carry_grid_point() {
        let mut base = tiny_base();
        base.train.lr = 1e30;
        base.train.optimizer = crate::optim::OptimizerKind::Sgd;
        let spec = SweepSpec {
            base,
            bits: vec![8],
            act_bits: None,
            seeds: vec![5],
            include_fp32: false,
        };
        match run_sweep(&spec) {
            Err(TrainError::Grid { context, .. }) => assert_eq!(context, "b=8 b_act=8 seed=5"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn meta_hash_is_stable() {
        let a = Meta::new("sweep", &tiny_base(), vec![0]);
        let b = Meta::new("sweep", &tiny_base(), vec![0]);
        assert_eq!(a.config_hash, b.config_hash);
        assert_eq!(a.config_hash.len(), 64);
        let mut other = tiny_base();
        other.train.lr = 1e-3;
        assert_ne!(Meta::new("sweep", &other, vec![0]).config_hash, a.config_hash);
        // sha256("{}")
        assert_eq!(
            config_hash(&serde_json::json!({})),
            "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
        );
    }
}
