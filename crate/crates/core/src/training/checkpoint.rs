//! Versioned binary checkpoints: magic bytes, format version, header length, a JSON
//! header and raw little-endian f64 tensor payloads in header order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerConfig};
use super::TrainProgress;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"DLDSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotHeader {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    config: OptimizerConfig,
    update_count: u64,
    slots: Vec<SlotHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab: Vocabulary,
    params: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    progress: TrainProgress,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub optimizer: Option<Optimizer>,
    pub progress: TrainProgress,
}

impl Checkpoint {
    /// Model built from the stored config.
    pub fn model(&self) -> Result<Model> {
        Model::with_params(self.config.clone(), self.params.clone())
    }

    /// Model built against an expected config; tensors that disagree are named.
    pub fn model_for(&self, config: &ModelConfig) -> Result<Model> {
        Model::with_params(config.clone(), self.params.clone())
    }
}

fn entries<'a>(names: impl Iterator<Item = &'a str>, tensors: &[Tensor]) -> Vec<TensorEntry> {
    names
        .zip(tensors)
        .map(|(n, t)| TensorEntry {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    vocab: &Vocabulary,
    optimizer: Option<&Optimizer>,
    progress: &TrainProgress,
) -> Result<()> {
    let names = || model.params.iter().map(|(n, _)| n);
    let header = Header {
        model: model.config.clone(),
        vocab: vocab.clone(),
        params: entries(names(), model.params.tensors()),
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config(),
            update_count: o.update_count(),
            slots: o
                .slots()
                .into_iter()
                .map(|(slot, ts)| SlotHeader {
                    name: slot.to_string(),
                    tensors: entries(names(), ts),
                })
                .collect(),
        }),
        progress: progress.clone(),
    };
    let json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let mut write_tensors = |ts: &[Tensor]| -> std::io::Result<()> {
            for t in ts {
                for x in t.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            Ok(())
        };
        write_tensors(model.params.tensors())?;
        if let Some(o) = optimizer {
            for (_, ts) in o.slots() {
                write_tensors(ts)?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Payload<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Payload<'_> {
    fn tensor(&mut self, e: &TensorEntry) -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let end = self.pos + n * 8;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!("payload truncated inside tensor {}", e.name)));
        }
        let data = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        self.pos = end;
        Tensor::new(e.shape.clone(), data).map_err(|_| Error::Checkpoint(format!("bad shape for tensor {}", e.name)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header truncated"))?;
    let header: Header =
        serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

    let mut payload = Payload {
        bytes: &bytes[header_end..],
        pos: 0,
    };
    let mut params = ParamStore::new();
    for e in &header.params {
        let t = payload.tensor(e)?;
        params.add(e.name.clone(), t);
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut o = Optimizer::new(&oh.config, header.model.d_model, &params);
            o.set_update_count(oh.update_count);
            let mut slots = o.slots_mut();
            if slots.len() != oh.slots.len() {
                return Err(bad("optimizer slot count does not match its kind"));
            }
            for ((name, dst), sh) in slots.iter_mut().zip(&oh.slots) {
                if *name != sh.name || sh.tensors.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("optimizer slot {} does not match", sh.name)));
                }
                for (d, e) in dst.iter_mut().zip(&sh.tensors) {
                    let t = payload.tensor(e)?;
                    if t.shape() != d.shape() {
                        return Err(Error::CheckpointShape {
                            name: format!("{}/{}", sh.name, e.name),
                            found: t.shape().to_vec(),
                            expected: d.shape().to_vec(),
                        });
                    }
                    *d = t;
                }
            }
            drop(slots);
            Some(o)
        }
    };
    if payload.pos != payload.bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            payload.bytes.len() - payload.pos
        )));
    }
    Ok(Checkpoint {
        config: header.model,
        vocab: header.vocab,
        params,
        optimizer,
        progress: header.progress,
    })
}
