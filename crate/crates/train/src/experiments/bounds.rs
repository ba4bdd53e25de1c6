//! Monte-Carlo checks of the mapping error bounds: `|δ| ≤ Δ`, `var(δ) ≤ Δ²`
//! with `Δ = 2^(e_scale − b + 2)`, and unbiasedness of stochastic rounding.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use intft_core::dfp::{check_bits, max_magnitude, pow2};
use intft_core::{map_to_dfp, FpTensor, RoundingMode, StreamKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    Uniform,
    Normal,
    /// Student-t with 3 degrees of freedom.
    StudentT3,
}

impl InputDistribution {
    pub const ALL: [Self; 3] = [Self::Uniform, Self::Normal, Self::StudentT3];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Normal => "normal",
            Self::StudentT3 => "student_t3",
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::Uniform => rng.gen_range(-1.0..1.0),
            Self::Normal => Normal::new(0.0, 1.0).unwrap().sample(rng),
            Self::StudentT3 => StudentT::new(3.0).unwrap().sample(rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Nearest,
    Stochastic,
}

impl Rounding {
    pub const ALL: [Self; 2] = [Self::Nearest, Self::Stochastic];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingBoundSpec {
    pub bits: Vec<u32>,
    pub distributions: Vec<InputDistribution>,
    pub modes: Vec<Rounding>,
    /// Elements sampled per (b, distribution, mode) cell.
    pub elements: usize,
    pub tensor_len: usize,
    /// Tensors are multiplied by `2^k`, `k` uniform in `-scale_span..=scale_span`.
    pub scale_span: i32,
    pub seed: u64,
}

impl Default for MappingBoundSpec {
    fn default() -> Self {
        Self {
            bits: vec![4, 8, 12, 16, 24],
            distributions: InputDistribution::ALL.to_vec(),
            modes: Rounding::ALL.to_vec(),
            elements: 1_000_000,
            tensor_len: 1024,
            scale_span: 12,
            seed: 0,
        }
    }
}

/// Error statistics for one (b, distribution, mode, e_scale) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingBoundRow {
    pub b: u32,
    pub distribution: InputDistribution,
    pub mode: Rounding,
    pub e_scale: i32,
    pub tensors: u64,
    pub count: u64,
    pub saturated: u64,
    pub max_abs_err: f64,
    pub var_err: f64,
    pub delta_bound: f64,
    pub var_bound: f64,
}

pub const MAPPING_HEADER: [&str; 11] = [
    "b",
    "distribution",
    "mode",
    "e_scale",
    "tensors",
    "count",
    "saturated",
    "max_abs_err",
    "var_err",
    "delta_bound",
    "var_bound",
];

/// Running statistics of `δ/Δ`; `Δ` is constant within a group so the
/// normalization is exact.
#[derive(Default)]
struct Group {
    tensors: u64,
    count: u64,
    saturated: u64,
    max: f64,
    mean: f64,
    m2: f64,
}

impl Group {
    fn push(&mut self, d: f64) {
        self.count += 1;
        self.max = self.max.max(d.abs());
        let delta = d - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (d - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

#[derive(Serialize)]
struct MappingSample<'a> {
    b: u32,
    mode: Rounding,
    stream: Option<u64>,
    max_abs_err: f64,
    var_err: f64,
    delta_bound: f64,
    values: &'a [f32],
}

/// Per-tensor check with zero tolerance; returns the normalized errors and
/// the saturation count.
fn check_tensor(f: &FpTensor, b: u32, mode: RoundingMode, label: Rounding) -> Result<(i32, Vec<f64>, u64)> {
    let q = map_to_dfp(f, b, mode)?;
    let step = q.step();
    let limit = max_magnitude(b) as i32;
    let mut saturated = 0;
    let norm: Vec<f64> = f
        .values()
        .iter()
        .zip(q.values())
        .map(|(&x, &v)| {
            let d = v as f64 * step - x as f64;
            if v.abs() == limit && d != 0.0 {
                saturated += 1;
            }
            d / step
        })
        .collect();
    let n = norm.len().max(1) as f64;
    let mean = norm.iter().sum::<f64>() / n;
    let var = norm.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let max = norm.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    // Normalized bounds: |δ/Δ| ≤ 1, var(δ/Δ) ≤ 1.
    if max > 1.0 || var > 1.0 {
        let sample = MappingSample {
            b,
            mode: label,
            stream: match mode {
                RoundingMode::Nearest => None,
                RoundingMode::Stochastic(id) => Some(id),
            },
            max_abs_err: max * step,
            var_err: var * step * step,
            delta_bound: step,
            values: f.values(),
        };
        return Err(TrainError::BoundViolation {
            context: format!("mapping b={b} mode={label:?} e_scale={}", q.scale()),
            sample: serde_json::to_string(&sample).expect("sample serializes"),
        });
    }
    Ok((q.scale(), norm, saturated))
}

fn run_cell(
    spec: &MappingBoundSpec,
    cell: u64,
    b: u32,
    dist: InputDistribution,
    label: Rounding,
) -> Result<Vec<MappingBoundRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(StreamKey::new(spec.seed, cell, 0).id());
    let tensors = spec.elements.div_ceil(spec.tensor_len);
    let mut groups: BTreeMap<i32, Group> = BTreeMap::new();
    for t in 0..tensors {
        let k = rng.gen_range(-spec.scale_span..=spec.scale_span);
        let scale = pow2(k);
        let f = FpTensor::from_fn(&[spec.tensor_len], |_| (dist.sample(&mut rng) * scale) as f32);
        let mode = match label {
            Rounding::Nearest => RoundingMode::Nearest,
            Rounding::Stochastic => StreamKey::new(spec.seed, (1 << 32) | cell, t as u64).stochastic(),
        };
        let (e_scale, norm, saturated) = check_tensor(&f, b, mode, label)?;
        let g = groups.entry(e_scale).or_default();
        g.tensors += 1;
        g.saturated += saturated;
        for d in norm {
            g.push(d);
        }
    }
    let rows = groups
        .into_iter()
        .map(|(e_scale, g)| {
            let step = pow2(e_scale - b as i32 + 2);
            MappingBoundRow {
                b,
                distribution: dist,
                mode: label,
                e_scale,
                tensors: g.tensors,
                count: g.count,
                saturated: g.saturated,
                max_abs_err: g.max * step,
                var_err: g.variance() * step * step,
                delta_bound: step,
                var_bound: step * step,
            }
        })
        .collect::<Vec<_>>();
    for r in &rows {
        if r.max_abs_err > r.delta_bound || r.var_err > r.var_bound {
            return Err(TrainError::BoundViolation {
                context: format!("pooled mapping b={b} {dist:?} {label:?} e_scale={}", r.e_scale),
                sample: serde_json::to_string(r).expect("row serializes"),
            });
        }
    }
    Ok(rows)
}

/// Samples every (b, distribution, mode) cell and checks each tensor and each
/// pooled e_scale group. Any violation is an error carrying the sample.
pub fn verify_mapping_bounds(spec: &MappingBoundSpec) -> Result<Vec<MappingBoundRow>> {
    if spec.bits.is_empty() || spec.distributions.is_empty() || spec.modes.is_empty() {
        return Err(TrainError::Config("mapping bound grid is empty".into()));
    }
    if spec.elements == 0 || spec.tensor_len == 0 {
        return Err(TrainError::Config("elements and tensor_len must be positive".into()));
    }
    for &b in &spec.bits {
        check_bits(b)?;
    }
    let mut cells = Vec::new();
    for &b in &spec.bits {
        for &d in &spec.distributions {
            for &m in &spec.modes {
                cells.push((b, d, m));
            }
        }
    }
    let mut rows: Vec<MappingBoundRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(b, d, m))| run_cell(spec, i as u64, b, d, m))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    rows.sort_by_key(|r| (r.b, r.distribution, r.mode, r.e_scale));
    Ok(rows)
}

pub fn write_mapping_csv(rows: &[MappingBoundRow], w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(MAPPING_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_mapping_csv(r: impl Read) -> Result<Vec<MappingBoundRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != MAPPING_HEADER {
        return Err(TrainError::Config(format!("unexpected variance report header {header:?}")));
    }
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Stochastic-rounding bias of one fixed tensor over many streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasRow {
    pub tensor: usize,
    pub step: f64,
    /// Elements that cannot reach the clamp and so enter the mean.
    pub elements: usize,
    pub streams: usize,
    pub mean_err: f64,
    /// `4 · (Δ/2) / √streams`.
    pub bound: f64,
}

impl UnbiasRow {
    pub fn passes(&self) -> bool {
        self.mean_err.abs() <= self.bound
    }
}

/// Maps each of `tensors` fixed normal tensors under `streams` independent
/// stochastic streams and reports the mean error. Elements with
/// `|x/Δ| > 2^(b−1) − 1` can round onto the clamp and are left out.
pub fn stochastic_bias(bits: u32, tensors: usize, tensor_len: usize, streams: usize, seed: u64) -> Result<Vec<UnbiasRow>> {
    check_bits(bits)?;
    if tensors == 0 || tensor_len == 0 || streams == 0 {
        return Err(TrainError::Config("tensors, tensor_len and streams must be positive".into()));
    }
    (0..tensors)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(StreamKey::new(seed, t as u64, 0).id());
            let f = FpTensor::from_fn(&[tensor_len], |_| InputDistribution::Normal.sample(&mut rng) as f32);
            let probe = map_to_dfp(&f, bits, RoundingMode::Nearest)?;
            let step = probe.step();
            let limit = max_magnitude(bits) as f64;
            let keep: Vec<usize> = (0..tensor_len)
                .filter(|&i| (f.values()[i] as f64 / step).abs() <= limit)
                .collect();
            let mut sum = 0.0;
            for s in 0..streams {
                let mode = StreamKey::new(seed, (1 << 32) | t as u64, s as u64).stochastic();
                let q = map_to_dfp(&f, bits, mode)?;
                sum += keep
                    .iter()
                    .map(|&i| q.values()[i] as f64 * step - f.values()[i] as f64)
                    .sum::<f64>();
            }
            Ok(UnbiasRow {
                tensor: t,
                step,
                elements: keep.len(),
                streams,
                mean_err: sum / (streams * keep.len().max(1)) as f64,
                bound: 4.0 * (step / 2.0) / (streams as f64).sqrt(),
            })
        })
        .collect()
}
