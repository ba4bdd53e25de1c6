//! Paired loss traces: FP32, 16-bit integer and 8-bit integer with 12-bit
//! activations, trained from the same seed on the same batches.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{run_one, ExperimentBase, RunPrecision};
use crate::error::{Result, TrainError};

pub const TRAJECTORY_HEADER: [&str; 4] = ["step", "fp32", "b16", "b8_a12"];

pub const TRAJECTORY_RUNS: [RunPrecision; 3] = [
    RunPrecision::Fp32,
    RunPrecision::Int { b: 16, b_act: 16 },
    RunPrecision::Int { b: 8, b_act: 12 },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: u64,
    pub fp32: f64,
    pub b16: f64,
    pub b8_a12: f64,
}

/// Per-step training losses of the three runs.
pub fn run_loss_trajectory(base: &ExperimentBase, seed: u64) -> Result<Vec<TrajectoryRow>> {
    let data = base.load_data()?;
    let traces = TRAJECTORY_RUNS
        .iter()
        .map(|&p| run_one(base, &data, p, seed).map(|m| m.step_losses))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..traces[0].len())
        .map(|i| TrajectoryRow {
            step: i as u64 + 1,
            fp32: traces[0][i],
            b16: traces[1][i],
            b8_a12: traces[2][i],
        })
        .collect())
}

/// Interval means at every multiple of `interval` and at the last step, the
/// same aggregation the training log uses.
pub fn logged(rows: &[TrajectoryRow], interval: u64) -> Vec<TrajectoryRow> {
    let mut out = Vec::new();
    let mut acc = (0.0, 0.0, 0.0, 0u64);
    for (i, r) in rows.iter().enumerate() {
        acc = (acc.0 + r.fp32, acc.1 + r.b16, acc.2 + r.b8_a12, acc.3 + 1);
        if r.step % interval == 0 || i + 1 == rows.len() {
            let n = acc.3 as f64;
            out.push(TrajectoryRow {
                step: r.step,
                fp32: acc.0 / n,
                b16: acc.1 / n,
                b8_a12: acc.2 / n,
            });
            acc = (0.0, 0.0, 0.0, 0);
        }
    }
    out
}

pub fn write_trajectory_csv(rows: &[TrajectoryRow], w: impl Write) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(TRAJECTORY_HEADER)?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(r: impl Read) -> Result<Vec<TrajectoryRow>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    if header != TRAJECTORY_HEADER {
        return Err(TrainError::Config(format!("unexpected trajectory header {header:?}")));
    }
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSource;

    fn base() -> ExperimentBase {
        let mut base = ExperimentBase::default();
        base.train.steps = 30;
        base.train.log_interval = 10;
        if let DatasetSource::Synthetic { size, .. } = &mut base.data.source {
            *size = 300;
        }
        base
    }

    #[test]
    fn traces_are_aligned_and_deterministic() {
        let a = run_loss_trajectory(&base(), 2).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=30).collect::<Vec<_>>());
        let b = run_loss_trajectory(&base(), 2).unwrap();
        assert_eq!(a, b);
        // Same initial parameters and batch: step-1 losses agree closely.
        assert!((a[0].b16 - a[0].fp32).abs() / a[0].fp32 < 1e-2);
    }

    #[test]
    fn logged_means() {
        let rows: Vec<TrajectoryRow> = (1..=5)
            .map(|s| TrajectoryRow {
                step: s,
                fp32: s as f64,
                b16: 2.0 * s as f64,
                b8_a12: 0.0,
            })
            .collect();
        let l = logged(&rows, 2);
        assert_eq!(l.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 5]);
        assert_eq!(l[0].fp32, 1.5);
        assert_eq!(l[1].b16, 7.0);
        assert_eq!(l[2].fp32, 5.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![TrajectoryRow {
            step: 1,
            fp32: 0.693_147_180_559_945_3,
            b16: 0.1,
            b8_a12: 1e-300,
        }];
        let mut buf = Vec::new();
        write_trajectory_csv(&rows, &mut buf).unwrap();
        assert!(buf.starts_with(b"step,fp32,b16,b8_a12\n"));
        assert_eq!(read_trajectory_csv(buf.as_slice()).unwrap(), rows);
        assert!(read_trajectory_csv(&b"step,a,b,c\n"[..]).is_err());
    }
}
