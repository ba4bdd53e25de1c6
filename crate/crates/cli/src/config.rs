//! Flat JSON run configuration with strict key checking.

use std::path::{Path, PathBuf};

use intft_core::dfp::check_bits;
use intft_core::layers::{QuantConfig, RoundingPolicy};
use intft_train::experiments::bounds::MappingBoundSpec;
use intft_train::experiments::gradvar::GradVarSpec;
use intft_train::experiments::{ExperimentBase, SweepSpec};
use intft_train::{DatasetSource, DatasetSpec, OptimizerKind, Precision, SyntheticTask, TinyTransformerConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adamw,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Tsv,
}

/// Every knob of every subcommand. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub classes: usize,
    pub dropout: f32,
    pub init_std: f32,
    pub ln_epsilon: f64,

    /// Width for `train` and `quantize-check`; 0 trains in FP32.
    pub bits: u32,
    /// Activation width for `train`; defaults to `bits`.
    pub act_bits: Option<u32>,
    pub forward_rounding: RoundingPolicy,
    pub backward_rounding: RoundingPolicy,
    pub chain_integer: bool,

    pub optimizer: OptimizerName,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub log_interval: u64,
    /// Top-level seed for `train`, `trajectory` and the verifiers.
    pub seed: u64,

    pub dataset: DatasetKind,
    pub data_seed: u64,
    pub data_size: usize,
    pub task: SyntheticTask,
    pub zipf: f64,
    pub tsv_path: Option<PathBuf>,
    pub text_column: String,
    pub label_column: String,
    pub train_fraction: f64,
    pub eval_fraction: f64,
    pub split_seed: u64,

    pub sweep_bits: Vec<u32>,
    /// Untied activation widths for `sweep`; `null` ties them to `sweep_bits`.
    pub sweep_act_bits: Option<Vec<u32>>,
    pub act_sweep_weight_bits: u32,
    pub act_sweep_bits: Vec<u32>,
    pub seeds: Vec<u64>,
    pub include_fp32: bool,

    pub bound_bits: Vec<u32>,
    pub bound_elements: usize,
    pub bound_tensor_len: usize,
    pub bound_scale_span: i32,
    pub gradvar_bits: Vec<u32>,
    pub gradvar_trials: usize,
    pub gradvar_n: usize,
    pub gradvar_in: usize,
    pub gradvar_out: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = ExperimentBase::default();
        let m = base.model;
        let t = base.train;
        let DatasetSource::Synthetic { seed, size, task, zipf, .. } = base.data.source else {
            unreachable!("default dataset is synthetic")
        };
        let bounds = MappingBoundSpec::default();
        let gv = GradVarSpec::layer(8, 10_000, 0);
        Self {
            vocab: m.vocab,
            hidden: m.hidden,
            layers: m.layers,
            heads: m.heads,
            max_len: m.max_len,
            classes: m.classes,
            dropout: m.dropout,
            init_std: m.init_std,
            ln_epsilon: m.ln_epsilon,
            bits: 8,
            act_bits: None,
            forward_rounding: RoundingPolicy::Nearest,
            backward_rounding: RoundingPolicy::Stochastic,
            chain_integer: false,
            optimizer: OptimizerName::Adamw,
            lr: t.lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            batch_size: t.batch_size,
            steps: t.steps,
            log_interval: t.log_interval,
            seed: t.seed,
            dataset: DatasetKind::Synthetic,
            data_seed: seed,
            data_size: size,
            task,
            zipf,
            tsv_path: None,
            text_column: "text".into(),
            label_column: "label".into(),
            train_fraction: base.data.train_fraction,
            eval_fraction: base.data.eval_fraction,
            split_seed: base.data.split_seed,
            sweep_bits: vec![8, 10, 12, 16],
            sweep_act_bits: None,
            act_sweep_weight_bits: 8,
            act_sweep_bits: vec![8, 10, 12, 14, 16],
            seeds: vec![0, 1, 2, 3, 4],
            include_fp32: true,
            bound_bits: bounds.bits,
            bound_elements: bounds.elements,
            bound_tensor_len: bounds.tensor_len,
            bound_scale_span: bounds.scale_span,
            gradvar_bits: vec![8, 12],
            gradvar_trials: gv.trials,
            gradvar_n: gv.n,
            gradvar_in: gv.d_in,
            gradvar_out: gv.d_out,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parses `key=value`; the value is read as JSON when it parses, else as a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{s}` is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(config_err(format!("override `{s}` has an empty key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

impl RunConfig {
    /// Defaults, then the config file, then overrides in order.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, CliError> {
        let Value::Object(mut merged) = serde_json::to_value(Self::default()).expect("defaults serialize") else {
            unreachable!()
        };
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
            let file: Map<String, Value> = serde_json::from_str(&text)
                .map_err(|e| config_err(format!("config {} is not a JSON object: {e}", path.display())))?;
            merged.extend(file);
        }
        for (k, v) in overrides {
            merged.insert(k.clone(), v.clone());
        }
        let cfg: Self = serde_json::from_value(Value::Object(merged)).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate().map_err(|e| config_err(e.to_string()))?;
        self.train_config().validate().map_err(|e| config_err(e.to_string()))?;
        if self.bits != 0 {
            self.quant(self.seed).validate().map_err(|e| config_err(e.to_string()))?;
        } else if self.act_bits.is_some() {
            return Err(config_err("act_bits requires integer training (bits > 0)"));
        }
        let widths = self
            .sweep_bits
            .iter()
            .chain(self.sweep_act_bits.iter().flatten())
            .chain(&self.act_sweep_bits)
            .chain(&self.bound_bits)
            .chain(&self.gradvar_bits)
            .chain(std::iter::once(&self.act_sweep_weight_bits));
        for &b in widths {
            check_bits(b).map_err(|e| config_err(e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds must not be empty"));
        }
        let fractions = self.train_fraction + self.eval_fraction;
        if (fractions - 1.0).abs() > 1e-9 || self.train_fraction <= 0.0 || self.eval_fraction < 0.0 {
            return Err(config_err(format!(
                "train_fraction + eval_fraction must be 1 (got {fractions})"
            )));
        }
        if self.dataset == DatasetKind::Tsv {
            match &self.tsv_path {
                None => return Err(config_err("dataset=tsv needs tsv_path")),
                Some(p) if !p.is_file() => return Err(config_err(format!("tsv_path {} does not exist", p.display()))),
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn model(&self) -> TinyTransformerConfig {
        TinyTransformerConfig {
            vocab: self.vocab,
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            max_len: self.max_len,
            classes: self.classes,
            dropout: self.dropout,
            init_std: self.init_std,
            ln_epsilon: self.ln_epsilon,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            optimizer: match self.optimizer {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adamw => OptimizerKind::AdamW {
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: self.adam_eps,
                    weight_decay: self.weight_decay,
                },
            },
            seed: self.seed,
            log_interval: self.log_interval,
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        let source = match self.dataset {
            DatasetKind::Synthetic => DatasetSource::Synthetic {
                seed: self.data_seed,
                size: self.data_size,
                vocab: self.vocab,
                seq_len: self.max_len,
                task: self.task,
                zipf: self.zipf,
            },
            DatasetKind::Tsv => DatasetSource::Tsv {
                path: self.tsv_path.clone().unwrap_or_default(),
                text_column: self.text_column.clone(),
                label_column: self.label_column.clone(),
                vocab: self.vocab,
                seq_len: self.max_len,
            },
        };
        DatasetSpec {
            source,
            train_fraction: self.train_fraction,
            eval_fraction: self.eval_fraction,
            split_seed: self.split_seed,
        }
    }

    pub fn base(&self) -> ExperimentBase {
        ExperimentBase {
            model: self.model(),
            train: self.train_config(),
            data: self.dataset(),
        }
    }

    fn quant(&self, seed: u64) -> QuantConfig {
        QuantConfig {
            b_weights: self.bits,
            b_activations: self.act_bits.unwrap_or(self.bits),
            b_gradients: self.bits,
            forward_rounding: self.forward_rounding,
            backward_rounding: self.backward_rounding,
            seed,
            chain_integer: self.chain_integer,
        }
    }

    pub fn precision(&self) -> Precision {
        if self.bits == 0 {
            Precision::Fp32
        } else {
            Precision::Integer(self.quant(self.seed))
        }
    }

    pub fn sweep(&self) -> SweepSpec {
        SweepSpec {
            base: self.base(),
            bits: self.sweep_bits.clone(),
            act_bits: self.sweep_act_bits.clone(),
            seeds: self.seeds.clone(),
            include_fp32: self.include_fp32,
        }
    }

    pub fn act_sweep(&self) -> SweepSpec {
        SweepSpec {
            base: self.base(),
            bits: vec![self.act_sweep_weight_bits],
            act_bits: Some(self.act_sweep_bits.clone()),
            seeds: self.seeds.clone(),
            include_fp32: false,
        }
    }

    pub fn mapping_bounds(&self) -> MappingBoundSpec {
        MappingBoundSpec {
            bits: self.bound_bits.clone(),
            elements: self.bound_elements,
            tensor_len: self.bound_tensor_len,
            scale_span: self.bound_scale_span,
            seed: self.seed,
            ..MappingBoundSpec::default()
        }
    }

    pub fn gradvar(&self, bits: u32) -> GradVarSpec {
        GradVarSpec {
            n: self.gradvar_n,
            d_in: self.gradvar_in,
            d_out: self.gradvar_out,
            bits,
            trials: self.gradvar_trials,
            seed: self.seed,
        }
    }
}
