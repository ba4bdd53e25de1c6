//! Deterministic training loop.

use std::io::{Read, Write};
use std::time::Instant;

use intft_core::{FpTensor, StreamKey};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Batch, Dataset, Example};
use crate::error::{Result, TrainError};
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerKind};

/// Stream id for the per-epoch batch shuffle.
const SHUFFLE_STREAM: u64 = u64::MAX;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            steps: 400,
            optimizer: OptimizerKind::adamw(),
            seed: 0,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) && self.lr != 0.0 {
            return Err(TrainError::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if self.batch_size == 0 || self.steps == 0 || self.log_interval == 0 {
            return Err(TrainError::Config("batch_size, steps and log_interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Mean training loss over the steps since the previous record.
    pub loss: f64,
    /// Held-out accuracy in percent.
    pub eval_metric: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<LogRecord>,
    pub step_losses: Vec<f64>,
    pub best_metric: f64,
    pub final_loss: f64,
    pub final_metric: f64,
}

impl RunMetrics {
    /// Everything except wall-clock times.
    pub fn same_results(&self, other: &Self) -> bool {
        let strip = |m: &Self| {
            let mut m = m.clone();
            m.records.iter_mut().for_each(|r| r.wall_ms = 0);
            m
        };
        strip(self) == strip(other)
    }
}

/// Cycles through the training split, reshuffling every epoch.
struct Batcher<'a> {
    data: &'a [Example],
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl<'a> Batcher<'a> {
    fn new(data: &'a [Example], seed: u64) -> Self {
        let mut b = Self {
            data,
            order: (0..data.len()).collect(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order.sort_unstable();
        let key = StreamKey::new(self.seed, SHUFFLE_STREAM, self.epoch);
        self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(key.id()));
    }

    fn next(&mut self, size: usize, seq_len: usize) -> Batch {
        let mut picked = Vec::with_capacity(size);
        while picked.len() < size {
            if self.cursor == self.order.len() {
                self.cursor = 0;
                self.epoch += 1;
                self.shuffle();
            }
            picked.push(&self.data[self.order[self.cursor]]);
            self.cursor += 1;
        }
        Batch::new(&picked, seq_len)
    }
}

/// Accuracy in percent over `examples`.
pub fn evaluate(model: &mut Model, examples: &[Example], seq_len: usize, step: u64) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        correct += model.evaluate(&Batch::new(&refs, seq_len), step)?.1;
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

pub fn snapshot(model: &Model, optimizer: &Optimizer, step: u64, config_json: &str, epoch: u64) -> Checkpoint {
    let (m, v) = optimizer.moments();
    Checkpoint {
        config_json: config_json.to_string(),
        step,
        tensors: model
            .parameter_names()
            .into_iter()
            .zip(model.parameters().into_iter().cloned())
            .collect(),
        optimizer_step: optimizer.steps_taken(),
        first_moments: m.to_vec(),
        second_moments: v.to_vec(),
        rng_counters: vec![("shuffle_epoch".into(), epoch)],
    }
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<RunMetrics> {
    train_with(model, data, cfg, |_| Ok(()))
}

/// Runs `cfg.steps` optimizer steps; `on_log` sees every record as it is made.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    on_log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<RunMetrics> {
    train_checkpointed(model, data, cfg, on_log).map(|(m, _)| m)
}

/// [`train_with`], also returning a checkpoint of the final state.
pub fn train_checkpointed(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<(RunMetrics, Checkpoint)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(crate::error::DataError::Empty.into());
    }
    let config_json = serde_json::to_string(cfg).expect("config serializes");
    let names = model.parameter_names();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut batcher = Batcher::new(&data.train, cfg.seed);
    let start = Instant::now();

    let mut records = Vec::new();
    let mut step_losses = Vec::with_capacity(cfg.steps as usize);
    let mut interval = (0f64, 0u64);
    let mut last_good: Option<Checkpoint> = None;

    for step in 1..=cfg.steps {
        let batch = batcher.next(cfg.batch_size, data.seq_len);
        let result = model.loss_and_grads(&batch, step);
        let non_finite = match &result {
            Ok((loss, _)) => !loss.is_finite(),
            Err(TrainError::Numeric(intft_core::Error::NonFinite { .. })) => true,
            Err(_) => false,
        };
        if non_finite {
            let last_good = last_good.unwrap_or_else(|| snapshot(model, &optimizer, step - 1, &config_json, batcher.epoch));
            return Err(TrainError::NonFiniteLoss {
                step,
                last_good: Box::new(last_good),
            });
        }
        let (loss, grads) = result?;
        last_good = Some(snapshot(model, &optimizer, step - 1, &config_json, batcher.epoch));
        {
            let mut params = model.parameters_mut();
            optimizer.step(&mut params, &grads, &names, step)?;
        }
        step_losses.push(loss);
        interval.0 += loss;
        interval.1 += 1;

        if step % cfg.log_interval == 0 || step == cfg.steps {
            let record = LogRecord {
                step,
                loss: interval.0 / interval.1 as f64,
                eval_metric: evaluate(model, &data.eval, data.seq_len, step)?,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            interval = (0.0, 0);
            on_log(&record)?;
            records.push(record);
        }
    }

    let last = records.last().expect("at least one record");
    let ckpt = snapshot(model, &optimizer, cfg.steps, &config_json, batcher.epoch);
    let metrics = RunMetrics {
        best_metric: records.iter().map(|r| r.eval_metric).fold(f64::NEG_INFINITY, f64::max),
        final_loss: last.loss,
        final_metric: last.eval_metric,
        records,
        step_losses,
    };
    Ok((metrics, ckpt))
}

/// Restores master weights and optimizer state from a checkpoint.
pub fn restore(model: &mut Model, optimizer: &mut Optimizer, ckpt: &Checkpoint) -> Result<()> {
    let values: Vec<FpTensor> = ckpt.tensors.iter().map(|(_, t)| t.clone()).collect();
    model.load_parameters(&values)?;
    optimizer.restore(
        ckpt.optimizer_step,
        ckpt.first_moments.clone(),
        ckpt.second_moments.clone(),
    );
    Ok(())
}

pub const METRICS_HEADER: [&str; 4] = ["step", "loss", "eval_metric", "wall_ms"];

/// Appends metrics rows to a CSV file, writing the header first.
pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record(METRICS_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, r: &LogRecord) -> Result<()> {
        self.inner.serialize(r)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(r: impl Read) -> Result<Vec<LogRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(TrainError::Config(format!("unexpected metrics header {header:?}")));
    }
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}
