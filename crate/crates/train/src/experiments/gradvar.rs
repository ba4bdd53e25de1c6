//! Monte-Carlo check of the weight-gradient variance inequality
//!
//! `V{ĉ_ij} ≤ V{c_ij} + σ²_G‖X_:i‖² + σ²_X‖G_:j‖² + N·σ²_X·σ²_G`
//!
//! for `C = XᵀG` with fixed `X [N×in]`, `G [N×out]` and independent
//! stochastic-rounding streams per trial, so `V{c_ij} = 0` and every term on
//! the right is measured.

use std::io::{Read, Write};

use intft_core::kernels::int_matmul_grad_w;
use intft_core::{map_to_dfp, FpTensor, StreamKey};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradVarSpec {
    /// Reduction length (batch rows).
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub bits: u32,
    pub trials: usize,
    pub seed: u64,
}

impl GradVarSpec {
    pub fn layer(bits: u32, trials: usize, seed: u64) -> Self {
        Self {
            n: 64,
            d_in: 64,
            d_out: 64,
            bits,
            trials,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradVarRow {
    pub b: u32,
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub trials: usize,
    /// Largest per-element variance of the mapping error of X (resp. G).
    pub sigma2_x: f64,
    pub sigma2_g: f64,
    /// Bound terms averaged over elements: σ²_G·‖X_:i‖², σ²_X·‖G_:j‖², N·σ²_X·σ²_G.
    pub term_gx: f64,
    pub term_xg: f64,
    pub term_n: f64,
    pub max_var: f64,
    pub mean_var: f64,
    /// Largest measured/bound ratio over elements.
    pub max_ratio: f64,
    /// Smallest `bound − measured` over elements.
    pub min_slack: f64,
    /// Variance of the exact `c_ij` over elements.
    pub signal_var: f64,
    /// `mean_var / signal_var`.
    pub inflation: f64,
    pub violations: usize,
}

pub const GRADVAR_HEADER: [&str; 17] = [
    "b",
    "n",
    "d_in",
    "d_out",
    "trials",
    "sigma2_x",
    "sigma2_g",
    "term_gx",
    "term_xg",
    "term_n",
    "max_var",
    "mean_var",
    "max_ratio",
    "min_slack",
    "signal_var",
    "inflation",
    "violations",
];

/// Per-element Welford accumulator over trials.
struct Welford {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    fn push(&mut self, xs: impl Iterator<Item = f64>) {
        self.count += 1;
        let c = self.count as f64;
        for ((x, m), s) in xs.zip(&mut self.mean).zip(&mut self.m2) {
            let d = x - *m;
            *m += d / c;
            *s += d * (x - *m);
        }
    }

    /// Population variances (the Monte-Carlo estimate of each element's variance).
    fn variances(&self) -> Vec<f64> {
        let c = self.count.max(1) as f64;
        self.m2.iter().map(|s| s / c).collect()
    }
}

/// Bound for element `(i, j)` of `XᵀG`.
pub fn element_bound(sigma2_x: f64, sigma2_g: f64, x_col_norm2: f64, g_col_norm2: f64, n: usize) -> f64 {
    sigma2_g * x_col_norm2 + sigma2_x * g_col_norm2 + n as f64 * sigma2_x * sigma2_g
}

fn column_norms2(t: &FpTensor) -> Vec<f64> {
    let cols = t.last_dim();
    let mut out = vec![0.0; cols];
    for r in 0..t.rows() {
        for (o, &v) in out.iter_mut().zip(t.row(r)) {
            *o += (v as f64).powi(2);
        }
    }
    out
}

#[derive(Serialize)]
struct Counterexample<'a> {
    b: u32,
    i: usize,
    j: usize,
    measured: f64,
    bound: f64,
    sigma2_x: f64,
    sigma2_g: f64,
    trials: usize,
    seed: u64,
    x: &'a [f32],
    g: &'a [f32],
}

/// Runs the Monte-Carlo experiment; any element whose measured variance
/// exceeds its bound is an error carrying the full input.
pub fn verify_gradient_variance(spec: &GradVarSpec) -> Result<GradVarRow> {
    let row = measure_gradient_variance(spec)?;
    if let Some(err) = row.1 {
        return Err(err);
    }
    Ok(row.0)
}

/// Like [`verify_gradient_variance`] but returns the row even when elements
/// violate the bound, alongside the first violation.
pub fn measure_gradient_variance(spec: &GradVarSpec) -> Result<(GradVarRow, Option<TrainError>)> {
    let GradVarSpec { n, d_in, d_out, bits, trials, seed } = *spec;
    if n == 0 || d_in == 0 || d_out == 0 || trials < 2 {
        return Err(TrainError::Config("dims must be positive and trials >= 2".into()));
    }
    intft_core::dfp::check_bits(bits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(StreamKey::new(seed, u64::MAX, 0).id());
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let x = FpTensor::from_fn(&[n, d_in], |_| normal.sample(&mut rng));
    let g = FpTensor::from_fn(&[n, d_out], |_| normal.sample(&mut rng));

    // Exact C in f64 from the FP32 inputs.
    let mut c = vec![0.0f64; d_in * d_out];
    for r in 0..n {
        let (xr, gr) = (x.row(r), g.row(r));
        for i in 0..d_in {
            for j in 0..d_out {
                c[i * d_out + j] += xr[i] as f64 * gr[j] as f64;
            }
        }
    }

    let mut dx = Welford::new(x.len());
    let mut dg = Welford::new(g.len());
    let mut ch = Welford::new(c.len());
    for t in 0..trials as u64 {
        let xq = map_to_dfp(&x, bits, StreamKey::new(seed, 0, t).stochastic())?;
        let gq = map_to_dfp(&g, bits, StreamKey::new(seed, 1, t).stochastic())?;
        let (sx, sg) = (xq.step(), gq.step());
        dx.push(xq.values().iter().zip(x.values()).map(|(&q, &v)| q as f64 * sx - v as f64));
        dg.push(gq.values().iter().zip(g.values()).map(|(&q, &v)| q as f64 * sg - v as f64));
        ch.push(int_matmul_grad_w(&xq, &gq)?.to_f64().into_iter());
    }

    let sigma2_x = dx.variances().into_iter().fold(0.0, f64::max);
    let sigma2_g = dg.variances().into_iter().fold(0.0, f64::max);
    let xn = column_norms2(&x);
    let gn = column_norms2(&g);
    let vars = ch.variances();

    let mut max_ratio = 0.0f64;
    let mut min_slack = f64::INFINITY;
    let mut violations = 0;
    let mut first = None;
    for i in 0..d_in {
        for j in 0..d_out {
            let measured = vars[i * d_out + j];
            let bound = element_bound(sigma2_x, sigma2_g, xn[i], gn[j], n);
            if bound > 0.0 {
                max_ratio = max_ratio.max(measured / bound);
            }
            min_slack = min_slack.min(bound - measured);
            if measured > bound {
                violations += 1;
                if first.is_none() {
                    let ce = Counterexample {
                        b: bits,
                        i,
                        j,
                        measured,
                        bound,
                        sigma2_x,
                        sigma2_g,
                        trials,
                        seed,
                        x: x.values(),
                        g: g.values(),
                    };
                    first = Some(TrainError::BoundViolation {
                        context: format!("gradient variance b={bits} element ({i}, {j})"),
                        sample: serde_json::to_string(&ce).expect("counterexample serializes"),
                    });
                }
            }
        }
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let c_mean = mean(&c);
    let signal_var = c.iter().map(|v| (v - c_mean).powi(2)).sum::<f64>() / c.len() as f64;
    let mean_var = mean(&vars);
    let row = GradVarRow {
        b: bits,
        n,
        d_in,
        d_out,
        trials,
        sigma2_x,
        sigma2_g,
        term_gx: sigma2_g * mean(&xn),
        term_xg: sigma2_x * mean(&gn),
        term_n: n as f64 * sigma2_x * sigma2_g,
        max_var: vars.iter().copied().fold(0.0, f64::max),
        mean_var,
        max_ratio,
        min_slack,
        signal_var,
        inflation: mean_var / signal_var,
        violations,
    };
    Ok((row, first))
}

pub fn write_gradvar_csv(rows: &[GradVarRow], w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(GRADVAR_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_gradvar_csv(r: impl Read) -> Result<Vec<GradVarRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != GRADVAR_HEADER {
        return Err(TrainError::Config(format!("unexpected gradient variance header {header:?}")));
    }
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}
