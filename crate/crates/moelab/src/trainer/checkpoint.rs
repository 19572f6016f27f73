//! Versioned binary checkpoints.
//!
//! Layout: magic `MOEL`, version u32 LE, header length u64 LE, JSON
//! header, then the payload: every tensor named in the header's offset
//! table, concatenated in order, little-endian. Element width follows the
//! model precision (f32 for training runs, f64 for the 64-bit test mode),
//! so save→load round trips are bit-exact in both modes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, MoeModel, ParamStore};
use crate::numerics::{Precision, Tensor};

use super::optim::{AdamHyper, OptimState};
use super::{Result, TrainError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MOEL";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in elements.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    hyper: AdamHyper,
    optim_step: u64,
    schedule_step: u64,
    data_cursor: u64,
    tokens_seen: u64,
    tensors: Vec<TensorEntry>,
}

/// A loaded training snapshot.
pub struct Checkpoint {
    pub model: MoeModel,
    pub optim: OptimState,
    pub schedule_step: u64,
    pub data_cursor: u64,
    pub tokens_seen: u64,
}

impl Checkpoint {
    /// Check this checkpoint's parameters against a different model
    /// config; fails naming the first offending tensor.
    pub fn validate_against(&self, config: &ModelConfig) -> Result<()> {
        let skeleton = MoeModel::init(config.clone(), 0).map_err(TrainError::Model)?;
        for (name, expected) in skeleton.params.iter() {
            match self.model.params.get(name) {
                Some(stored) if stored.shape() == expected.shape() => {}
                Some(stored) => {
                    return Err(TrainError::ShapeMismatch {
                        name: name.to_string(),
                        stored: stored.shape().to_vec(),
                        expected: expected.shape().to_vec(),
                    })
                }
                None => {
                    return Err(TrainError::ShapeMismatch {
                        name: name.to_string(),
                        stored: vec![],
                        expected: expected.shape().to_vec(),
                    })
                }
            }
        }
        Ok(())
    }
}

fn elem_width(p: Precision) -> usize {
    match p {
        Precision::F32 => 4,
        Precision::F64 => 8,
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &MoeModel,
    optim: &OptimState,
    schedule_step: u64,
    data_cursor: u64,
    tokens_seen: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    let mut order: Vec<&Tensor> = Vec::new();
    let mut register = |name: String, t: &Tensor, offset: &mut u64| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: *offset,
            len: t.len() as u64,
        });
        *offset += t.len() as u64;
    };
    for (name, t) in model.params.iter() {
        register(format!("param:{name}"), t, &mut offset);
        order.push(t);
    }
    for (i, (name, _)) in model.params.iter().enumerate() {
        register(format!("adam_m:{name}"), &optim.first_moment[i], &mut offset);
        order.push(&optim.first_moment[i]);
    }
    for (i, (name, _)) in model.params.iter().enumerate() {
        register(format!("adam_v:{name}"), &optim.second_moment[i], &mut offset);
        order.push(&optim.second_moment[i]);
    }

    let header = Header {
        config: model.config.clone(),
        hyper: optim.hyper,
        optim_step: optim.step,
        schedule_step,
        data_cursor,
        tokens_seen,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| TrainError::CorruptHeader(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    match model.config.precision {
        Precision::F32 => {
            for t in &order {
                for &x in t.data() {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
        Precision::F64 => {
            for t in &order {
                for &x in t.data() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| TrainError::CorruptHeader("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(TrainError::CorruptHeader(format!(
            "bad magic {magic:02x?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| TrainError::CorruptHeader("missing version".into()))?;
    let version = u32::from_le_bytes(buf4);
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            got: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)
        .map_err(|_| TrainError::CorruptHeader("missing header length".into()))?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| TrainError::CorruptHeader("header shorter than declared".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| TrainError::CorruptHeader(e.to_string()))?;

    let width = elem_width(header.config.precision);
    let total_elems: u64 = header.tensors.iter().map(|t| t.len).sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = total_elems * width as u64;
    if (payload.len() as u64) < expected {
        return Err(TrainError::TruncatedPayload {
            expected,
            got: payload.len() as u64,
        });
    }

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let start = entry.offset as usize * width;
        let mut data = Vec::with_capacity(entry.len as usize);
        for i in 0..entry.len as usize {
            let at = start + i * width;
            let x = match header.config.precision {
                Precision::F32 => {
                    f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()) as f64
                }
                Precision::F64 => f64::from_le_bytes(payload[at..at + 8].try_into().unwrap()),
            };
            data.push(x);
        }
        Tensor::new(entry.shape.clone(), data)
            .map_err(|_| TrainError::CorruptHeader(format!("tensor {} shape/len", entry.name)))
    };

    // Rebuild a model skeleton to validate shapes against.
    let skeleton = MoeModel::init(header.config.clone(), 0)
        .map_err(TrainError::Model)?;

    let mut params = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for entry in &header.tensors {
        let (kind, name) = entry
            .name
            .split_once(':')
            .ok_or_else(|| TrainError::CorruptHeader(format!("tensor name {}", entry.name)))?;
        if kind == "param" {
            let expected_shape = skeleton
                .params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| TrainError::ShapeMismatch {
                    name: name.to_string(),
                    stored: entry.shape.clone(),
                    expected: vec![],
                })?;
            if expected_shape != entry.shape {
                return Err(TrainError::ShapeMismatch {
                    name: name.to_string(),
                    stored: entry.shape.clone(),
                    expected: expected_shape,
                });
            }
        }
        let tensor = read_tensor(entry)?;
        match kind {
            "param" => params.insert(name, tensor),
            "adam_m" => first.push(tensor),
            "adam_v" => second.push(tensor),
            other => {
                return Err(TrainError::CorruptHeader(format!("tensor kind {other}")));
            }
        }
    }
    if params.len() != skeleton.params.len() {
        return Err(TrainError::CorruptHeader(format!(
            "checkpoint has {} parameters, model needs {}",
            params.len(),
            skeleton.params.len()
        )));
    }

    Ok(Checkpoint {
        model: MoeModel {
            config: header.config,
            params,
        },
        optim: OptimState {
            hyper: header.hyper,
            step: header.optim_step,
            first_moment: first,
            second_moment: second,
        },
        schedule_step: header.schedule_step,
        data_cursor: header.data_cursor,
        tokens_seen: header.tokens_seen,
    })
}
