//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! b"S2SQCKPT"  u32 version  u64 header_len  header (JSON)
//! per parameter: value, adam m, adam v as rows*cols f64 each
//! ```
//!
//! The header carries the run and model configs, counters, RNG state and
//! the name and shape of each parameter blob in storage order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{Matrix, RngState};

const MAGIC: &[u8; 8] = b"S2SQCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    model: ModelConfig,
    epoch: usize,
    step: u64,
    opt_step: u64,
    rng: RngState,
    best_score_bits: u64,
    best_epoch: usize,
    blobs: Vec<BlobInfo>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: ModelConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub best_score: f64,
    pub best_epoch: usize,
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
    pub opt_step: u64,
    pub opt_m: Vec<Matrix>,
    pub opt_v: Vec<Matrix>,
}

fn write_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_matrix(buf: &[u8], pos: &mut usize, rows: usize, cols: usize) -> Result<Matrix> {
    let need = rows * cols * 8;
    let bytes = buf
        .get(*pos..*pos + need)
        .ok_or_else(|| Error::Checkpoint("truncated parameter data".into()))?;
    *pos += need;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.values.len();
        if self.names.len() != n || self.opt_m.len() != n || self.opt_v.len() != n {
            return Err(Error::Checkpoint("parameter, name and optimizer lists differ in length".into()));
        }
        let header = Header {
            config: self.config.clone(),
            model: self.model.clone(),
            epoch: self.epoch,
            step: self.step,
            opt_step: self.opt_step,
            rng: self.rng,
            best_score_bits: self.best_score.to_bits(),
            best_epoch: self.best_epoch,
            blobs: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, v)| BlobInfo { name: name.clone(), rows: v.rows(), cols: v.cols() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for i in 0..n {
            write_matrix(&mut out, &self.values[i]);
            write_matrix(&mut out, &self.opt_m[i]);
            write_matrix(&mut out, &self.opt_v[i]);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 20 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(buf[12..20].try_into().expect("8 bytes")) as usize;
        let header_bytes = buf
            .get(20..20 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let h: Header = serde_json::from_slice(header_bytes)?;
        let mut pos = 20 + len;
        let mut ckpt = Self {
            config: h.config,
            model: h.model,
            epoch: h.epoch,
            step: h.step,
            rng: h.rng,
            best_score: f64::from_bits(h.best_score_bits),
            best_epoch: h.best_epoch,
            names: Vec::new(),
            values: Vec::new(),
            opt_step: h.opt_step,
            opt_m: Vec::new(),
            opt_v: Vec::new(),
        };
        for b in h.blobs {
            ckpt.values.push(read_matrix(buf, &mut pos, b.rows, b.cols)?);
            ckpt.opt_m.push(read_matrix(buf, &mut pos, b.rows, b.cols)?);
            ckpt.opt_v.push(read_matrix(buf, &mut pos, b.rows, b.cols)?);
            ckpt.names.push(b.name);
        }
        if pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - pos)));
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file so an interrupted save never
    /// clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
