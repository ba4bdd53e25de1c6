//! Versioned little-endian checkpoint container.
//!
//! Layout: magic, format version, JSON config blob, step, named FP32 master
//! tensors, optimizer step and moments, named RNG counters. Strings and
//! tensors are length-prefixed.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use intft_core::FpTensor;

use crate::error::{Result, TrainError};

const MAGIC: &[u8; 8] = b"INTFTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub step: u64,
    pub tensors: Vec<(String, FpTensor)>,
    pub optimizer_step: u64,
    pub first_moments: Vec<Vec<f32>>,
    pub second_moments: Vec<Vec<f32>>,
    pub rng_counters: Vec<(String, u64)>,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into()))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_len(r: &mut impl Read) -> Result<usize> {
    let n = r.read_u64::<LittleEndian>()?;
    // guards against reading garbage as a huge allocation
    if n > 1 << 32 {
        return Err(bad(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let mut buf = vec![0u8; read_len(r)?];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| bad(e.to_string()))
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for x in v {
        w.write_f32::<LittleEndian>(*x)?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read) -> Result<Vec<f32>> {
    let mut v = vec![0f32; read_len(r)?];
    r.read_f32_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        write_str(w, &self.config_json)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u64::<LittleEndian>(self.tensors.len() as u64)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_u64::<LittleEndian>(t.shape().len() as u64)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            write_f32s(w, t.values())?;
        }
        w.write_u64::<LittleEndian>(self.optimizer_step)?;
        for moments in [&self.first_moments, &self.second_moments] {
            w.write_u64::<LittleEndian>(moments.len() as u64)?;
            for m in moments {
                write_f32s(w, m)?;
            }
        }
        w.write_u64::<LittleEndian>(self.rng_counters.len() as u64)?;
        for (name, c) in &self.rng_counters {
            write_str(w, name)?;
            w.write_u64::<LittleEndian>(*c)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config_json = read_str(r)?;
        let step = r.read_u64::<LittleEndian>()?;
        let count = read_len(r)?;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(r)?;
            let rank = read_len(r)?;
            let shape = (0..rank).map(|_| read_len(r)).collect::<Result<Vec<_>>>()?;
            let values = read_f32s(r)?;
            tensors.push((name, FpTensor::new(values, shape)?));
        }
        let optimizer_step = r.read_u64::<LittleEndian>()?;
        let mut moments = [Vec::new(), Vec::new()];
        for m in &mut moments {
            let n = read_len(r)?;
            for _ in 0..n {
                m.push(read_f32s(r)?);
            }
        }
        let [first_moments, second_moments] = moments;
        let n = read_len(r)?;
        let mut rng_counters = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(r)?;
            rng_counters.push((name, r.read_u64::<LittleEndian>()?));
        }
        Ok(Self {
            config_json,
            step,
            tensors,
            optimizer_step,
            first_moments,
            second_moments,
            rng_counters,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
