//! Versioned binary checkpoints.
//!
//! Layout: magic `FSCN`, u32 version, u64 JSON length, the JSON metadata
//! (model config, train config, step, optimizer step), then raw
//! little-endian f32 blobs in parameter declaration order: all parameters,
//! all first moments, all second moments. The training seed inside the
//! metadata is the complete RNG state: every random stream is derived from
//! (seed, epoch, index), never from evolving state.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FscnError, Result};
use crate::model::{build_model, FscnModel, ModelConfig};
use crate::train::{OptimState, TrainConfig};

const MAGIC: &[u8; 4] = b"FSCN";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    opt_t: u64,
}

/// Full training state: configs, parameters, optimizer moments, step.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub step: u64,
    pub opt_t: u64,
    pub params: Vec<Vec<f32>>,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn capture(
        model: &FscnModel<f32>,
        opt: &OptimState<f32>,
        train_config: &TrainConfig,
        step: u64,
    ) -> Self {
        Checkpoint {
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            step,
            opt_t: opt.t,
            params: model
                .params()
                .entries()
                .iter()
                .map(|e| e.tensor.data().to_vec())
                .collect(),
            m: opt.m.clone(),
            v: opt.v.clone(),
        }
    }

    /// Rebuild the model and optimizer state this checkpoint describes.
    pub fn restore(&self) -> Result<(FscnModel<f32>, OptimState<f32>)> {
        let mut model: FscnModel<f32> =
            build_model(&self.model_config, self.train_config.seed)?;
        if model.params().len() != self.params.len() {
            return Err(FscnError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                model.params().len(),
                self.params.len()
            )));
        }
        for (entry, blob) in model.params_mut().entries_mut().iter_mut().zip(&self.params) {
            if entry.tensor.numel() != blob.len() {
                return Err(FscnError::Checkpoint(format!(
                    "size mismatch for '{}': expected {}, got {}",
                    entry.name,
                    entry.tensor.numel(),
                    blob.len()
                )));
            }
            entry.tensor.data_mut().copy_from_slice(blob);
        }
        let mut opt = OptimState::new(model.params(), &self.train_config);
        opt.t = self.opt_t;
        opt.m = self.m.clone();
        opt.v = self.v.clone();
        Ok((model, opt))
    }
}

fn blob_bytes(blobs: &[Vec<f32>]) -> Vec<u8> {
    let total: usize = blobs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(total * 4);
    for blob in blobs {
        for v in blob {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = CheckpointMeta {
        model: ckpt.model_config.clone(),
        train: ckpt.train_config.clone(),
        step: ckpt.step,
        opt_t: ckpt.opt_t,
    };
    let json = serde_json::to_vec(&meta)
        .map_err(|e| FscnError::Checkpoint(format!("metadata encoding: {e}")))?;
    let mut file = std::fs::File::create(path).map_err(|e| FscnError::io(path, e))?;
    let mut write = |bytes: &[u8]| file.write_all(bytes).map_err(|e| FscnError::io(path, e));
    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    write(&(json.len() as u64).to_le_bytes())?;
    write(&json)?;
    write(&blob_bytes(&ckpt.params))?;
    write(&blob_bytes(&ckpt.m))?;
    write(&blob_bytes(&ckpt.v))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::fs::File::open(path).map_err(|e| FscnError::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| FscnError::io(path, e))?;

    let fail = |msg: &str| FscnError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 {
        return Err(fail("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(fail(&format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + json_len {
        return Err(fail("truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| fail(&format!("metadata decoding: {e}")))?;

    // Parameter shapes come from rebuilding the model structure.
    let skeleton: FscnModel<f32> = build_model(&meta.model, meta.train.seed)?;
    let sizes: Vec<usize> = skeleton
        .params()
        .entries()
        .iter()
        .map(|e| e.tensor.numel())
        .collect();
    let scalars: usize = sizes.iter().sum();
    let expected = 16 + json_len + 3 * scalars * 4;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "truncated or oversized payload: {} bytes, expected {expected}",
            bytes.len()
        )));
    }

    let mut offset = 16 + json_len;
    let read_blobs = |offset: &mut usize| -> Vec<Vec<f32>> {
        sizes
            .iter()
            .map(|&len| {
                let blob: Vec<f32> = bytes[*offset..*offset + len * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                *offset += len * 4;
                blob
            })
            .collect()
    };
    let params = read_blobs(&mut offset);
    let m = read_blobs(&mut offset);
    let v = read_blobs(&mut offset);

    Ok(Checkpoint {
        model_config: meta.model,
        train_config: meta.train,
        step: meta.step,
        opt_t: meta.opt_t,
        params,
        m,
        v,
    })
}
