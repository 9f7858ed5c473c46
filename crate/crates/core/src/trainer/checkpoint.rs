//! Binary checkpoints: parameters, optimizer moments and run metadata.
//!
//! Layout: 8-byte magic, u32 version, u64 header length, JSON header,
//! little-endian f64 blocks (value, first moment, second moment per
//! parameter, in header order), then a SHA-256 of all preceding bytes.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainConfig, Trainer};
use crate::flow::{FlowConfig, LengthPrior};
use crate::model::{Model, ModelConfig};
use crate::nn::Adam;

const MAGIC: &[u8; 8] = b"CQFLOWCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error("checksum mismatch")]
    Checksum,
    #[error("checkpoint does not match model: {0}")]
    Incompatible(String),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Run metadata stored in the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub flow: FlowConfig,
    pub prior: LengthPrior,
    pub seed: u64,
    pub step: u64,
    pub adam_step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Checkpoint,
    params: Vec<Entry>,
}

fn push_block(out: &mut Vec<u8>, a: &Array2<f64>) {
    for x in a.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(trainer: &Trainer, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let store = &trainer.model.params;
    let params = store
        .ids()
        .map(|id| {
            let (rows, cols) = store.value(id).dim();
            Entry { name: store.name(id).to_string(), rows, cols }
        })
        .collect();
    let header = Header {
        meta: Checkpoint {
            model: trainer.model.config.clone(),
            train: trainer.config.clone(),
            flow: trainer.flow.clone(),
            prior: trainer.model.prior,
            seed: trainer.seed,
            step: trainer.step,
            adam_step: trainer.adam.step,
        },
        params,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(json.len() + 24 * store.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        push_block(&mut out, store.value(id));
        push_block(&mut out, &trainer.adam.m[id.index()]);
        push_block(&mut out, &trainer.adam.v[id.index()]);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| CheckpointError::Corrupt {
            offset: self.pos,
            reason: format!("truncated {what}"),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn block(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>, CheckpointError> {
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or(CheckpointError::Corrupt {
            offset: self.pos,
            reason: "block size overflows".into(),
        })?;
        let raw = self.take(n, "parameter block")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Array2::from_shape_vec((rows, cols), data).expect("sized above"))
    }
}

/// Restores a trainer exactly as it was saved.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes: &bytes, pos: MAGIC.len() };
    let found = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found, expected: FORMAT_VERSION });
    }
    if bytes.len() < r.pos + 32 {
        return Err(CheckpointError::Corrupt { offset: r.pos, reason: "missing checksum".into() });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Checksum);
    }
    r.bytes = body;
    let json_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes")) as usize;
    let json_at = r.pos;
    let header: Header = serde_json::from_slice(r.take(json_len, "header")?)
        .map_err(|e| CheckpointError::Corrupt { offset: json_at, reason: e.to_string() })?;
    let meta = header.meta;

    let model = Model::new(meta.model.clone(), meta.prior, 0).map_err(CheckpointError::Incompatible)?;
    let mut trainer = Trainer::new(model, meta.train, meta.flow, meta.seed);
    trainer.step = meta.step;
    if header.params.len() != trainer.model.params.len() {
        return Err(CheckpointError::Incompatible(format!(
            "{} parameters stored, model has {}",
            header.params.len(),
            trainer.model.params.len()
        )));
    }
    let mut adam = Adam::new(&trainer.model.params, trainer.config.learning_rate);
    adam.step = meta.adam_step;
    for e in &header.params {
        let id = trainer.model.params.id(&e.name).ok_or_else(|| CheckpointError::Incompatible(format!("unknown parameter {}", e.name)))?;
        if trainer.model.params.value(id).dim() != (e.rows, e.cols) {
            return Err(CheckpointError::Incompatible(format!("shape of {}", e.name)));
        }
        *trainer.model.params.value_mut(id) = r.block(e.rows, e.cols)?;
        adam.m[id.index()] = r.block(e.rows, e.cols)?;
        adam.v[id.index()] = r.block(e.rows, e.cols)?;
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt { offset: r.pos, reason: "trailing bytes".into() });
    }
    trainer.adam = adam;
    Ok(trainer)
}
