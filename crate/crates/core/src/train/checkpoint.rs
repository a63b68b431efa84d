//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic            8 bytes   "SKIPGATE"
//! format version   u32       currently 1
//! stage            u8        1 or 2
//! config blob      u32 len + JSON (model/train/ccl configs, proj_dim)
//! rng seed         u64
//! rng word pos     u128      ChaCha stream offset
//! param count      u32
//!   per parameter: u16 name len + UTF-8 name, u8 ndim, u32 dims...,
//!                  f64 data (row-major)
//! optimizer flag   u8        0 = absent, 1 = present
//!   if present:    u64 step, u32 entries, per entry: name, u64 len,
//!                  f64 m..., f64 v...
//! ```
//!
//! Round-trips are bit-exact: floats are stored as raw IEEE-754 bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::contrastive::CclConfig;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::train::adamw::{Moments, OptimizerState};
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"SKIPGATE";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigBlob {
    model: ModelConfig,
    train: TrainConfig,
    ccl: CclConfig,
    proj_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub ccl_config: CclConfig,
    pub proj_dim: usize,
    pub stage: u8,
    pub seed: u64,
    pub rng_word_pos: u128,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(
        params: &ModelParams,
        train_config: &TrainConfig,
        ccl_config: &CclConfig,
        stage: u8,
        seed: u64,
        rng_word_pos: u128,
        optimizer: Option<OptimizerState>,
    ) -> Self {
        Checkpoint {
            model_config: params.config.clone(),
            train_config: train_config.clone(),
            ccl_config: ccl_config.clone(),
            proj_dim: params.proj_dim,
            stage,
            seed,
            rng_word_pos,
            params: params
                .named_params()
                .into_iter()
                .map(|(n, v)| (n, v.shape(), v.to_vec()))
                .collect(),
            optimizer,
        }
    }

    /// Materialize model parameters from the stored tensors. Every expected
    /// parameter must be present with the right shape.
    pub fn build_params(&self) -> Result<ModelParams> {
        let model = ModelParams::init(&self.model_config, self.proj_dim, self.seed)
            .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
        let stored: BTreeMap<&str, (&Vec<usize>, &Vec<f64>)> = self
            .params
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s, d)))
            .collect();
        for (name, v) in model.named_params() {
            let (shape, data) = stored.get(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter {name}"))
            })?;
            if **shape != v.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {shape:?}, expected {:?}",
                    v.shape()
                )));
            }
            v.set_data(data);
        }
        if stored.len() != model.named_params().len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                stored.len(),
                model.named_params().len()
            )));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    buf.write_u8(ckpt.stage)?;
    let blob = serde_json::to_vec(&ConfigBlob {
        model: ckpt.model_config.clone(),
        train: ckpt.train_config.clone(),
        ccl: ckpt.ccl_config.clone(),
        proj_dim: ckpt.proj_dim,
    })
    .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    buf.write_u32::<LittleEndian>(blob.len() as u32)?;
    buf.write_all(&blob)?;
    buf.write_u64::<LittleEndian>(ckpt.seed)?;
    buf.write_u128::<LittleEndian>(ckpt.rng_word_pos)?;
    buf.write_u32::<LittleEndian>(ckpt.params.len() as u32)?;
    for (name, shape, data) in &ckpt.params {
        write_name(&mut buf, name)?;
        buf.write_u8(shape.len() as u8)?;
        for &d in shape {
            buf.write_u32::<LittleEndian>(d as u32)?;
        }
        for &x in data {
            buf.write_f64::<LittleEndian>(x)?;
        }
    }
    match &ckpt.optimizer {
        None => buf.write_u8(0)?,
        Some(state) => {
            buf.write_u8(1)?;
            buf.write_u64::<LittleEndian>(state.step)?;
            buf.write_u32::<LittleEndian>(state.moments.len() as u32)?;
            for (name, mom) in &state.moments {
                write_name(&mut buf, name)?;
                buf.write_u64::<LittleEndian>(mom.m.len() as u64)?;
                for &x in &mom.m {
                    buf.write_f64::<LittleEndian>(x)?;
                }
                for &x in &mom.v {
                    buf.write_f64::<LittleEndian>(x)?;
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn write_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    buf.write_u16::<LittleEndian>(bytes.len() as u16)?;
    buf.write_all(bytes)?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u16::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Checkpoint(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short for header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let stage = r.read_u8()?;
    let blob_len = r.read_u32::<LittleEndian>()? as usize;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)?;
    let cfg: ConfigBlob = serde_json::from_slice(&blob)
        .map_err(|e| Error::Checkpoint(format!("config blob unreadable: {e}")))?;
    let seed = r.read_u64::<LittleEndian>()?;
    let rng_word_pos = r.read_u128::<LittleEndian>()?;
    let n_params = r.read_u32::<LittleEndian>()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = read_name(&mut r)?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        params.push((name, shape, data));
    }
    let optimizer = match r.read_u8()? {
        0 => None,
        1 => {
            let step = r.read_u64::<LittleEndian>()?;
            let count = r.read_u32::<LittleEndian>()? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..count {
                let name = read_name(&mut r)?;
                let len = r.read_u64::<LittleEndian>()? as usize;
                let mut m = Vec::with_capacity(len);
                for _ in 0..len {
                    m.push(r.read_f64::<LittleEndian>()?);
                }
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    v.push(r.read_f64::<LittleEndian>()?);
                }
                moments.insert(name, Moments { m, v });
            }
            Some(OptimizerState { step, moments })
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "invalid optimizer flag {other}"
            )))
        }
    };
    Ok(Checkpoint {
        model_config: cfg.model,
        train_config: cfg.train,
        ccl_config: cfg.ccl,
        proj_dim: cfg.proj_dim,
        stage,
        seed,
        rng_word_pos,
        params,
        optimizer,
    })
}
