//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MCLR" | u16 version=1 | u32 tensor count
//! per tensor: u16 name len | name UTF-8 | u8 dtype (0 = f32) | u8 rank
//!             | rank x u64 extents | row-major f32 payload
//! trailing u32 CRC32 over the tensor region (everything between the
//! tensor count and the checksum)
//! ```
//!
//! Parameters are stored at f32 precision in name order, together with two
//! reserved tensors: `meta.config` (architecture fields) and `meta.train`
//! (bookkeeping). Saving is canonical, so save -> load -> save reproduces
//! the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::losses::SupconDenominator;
use crate::model::{param_shapes, ModelConfig, ModelError, ModelState};
use crate::papda::AttnScale;
use crate::params::{ParamMap, Value};

pub const MAGIC: &[u8; 4] = b"MCLR";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic {found:?}, expected {expected:?}", expected = String::from_utf8_lossy(MAGIC))]
    BadMagic { found: String },
    #[error("unsupported checkpoint version {found}, expected {VERSION}")]
    BadVersion { found: u16 },
    #[error("unsupported tensor dtype {0}")]
    BadDtype(u8),
    #[error("truncated checkpoint while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("bad metadata: {0}")]
    BadMeta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type RawTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn encode(tensors: &RawTensors) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, (shape, data)) in tensors {
        body.extend_from_slice(&(name.len() as u16).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(0u8); // dtype f32
        body.push(shape.len() as u8);
        for &e in shape {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in data {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 14);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<RawTensors, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version });
    }
    let count = r.u32("tensor count")?;
    let body_start = r.pos;
    let mut tensors = RawTensors::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8_lossy(r.take(name_len, "name")?).into_owned();
        let dtype = r.take(1, "dtype")?[0];
        if dtype != 0 {
            return Err(CheckpointError::BadDtype(dtype));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, (shape, data));
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[body_start..body_end]);
    if stored != computed {
        return Err(CheckpointError::BadCrc { stored, computed });
    }
    Ok(tensors)
}

fn config_meta(c: &ModelConfig) -> Vec<f32> {
    vec![
        c.image_extent as f32,
        c.patch as f32,
        c.embed_dim as f32,
        c.heads as f32,
        c.mixer_layers as f32,
        c.backbone_divisor as f32,
        c.encode_dim as f32,
        c.projection_dim as f32,
        c.dropout as f32,
        c.tau as f32,
        c.alpha as f32,
        c.use_ssrb as u8 as f32,
        c.use_papda as u8 as f32,
        c.use_scloss as u8 as f32,
        matches!(c.attention_scale, AttnScale::SqrtModel) as u8 as f32,
        matches!(c.supcon_denominator, SupconDenominator::All) as u8 as f32,
        c.pool_blocks as u8 as f32,
    ]
}

fn config_from_meta(meta: &[f32]) -> Result<ModelConfig, CheckpointError> {
    if meta.len() != 17 {
        return Err(CheckpointError::BadMeta(format!(
            "meta.config has {} fields, expected 17",
            meta.len()
        )));
    }
    Ok(ModelConfig {
        image_extent: meta[0] as usize,
        patch: meta[1] as usize,
        embed_dim: meta[2] as usize,
        heads: meta[3] as usize,
        mixer_layers: meta[4] as usize,
        backbone_divisor: meta[5] as usize,
        encode_dim: meta[6] as usize,
        projection_dim: meta[7] as usize,
        dropout: meta[8] as f64,
        tau: meta[9] as f64,
        alpha: meta[10] as f64,
        use_ssrb: meta[11] != 0.0,
        use_papda: meta[12] != 0.0,
        use_scloss: meta[13] != 0.0,
        attention_scale: if meta[14] != 0.0 {
            AttnScale::SqrtModel
        } else {
            AttnScale::SqrtHead
        },
        supcon_denominator: if meta[15] != 0.0 {
            SupconDenominator::All
        } else {
            SupconDenominator::Negatives
        },
        pool_blocks: meta[16] != 0.0,
    })
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut tensors = RawTensors::new();
    for (name, v) in &state.params {
        let data: Vec<f32> = v.data.iter().map(|&x| x as f32).collect();
        tensors.insert(name.clone(), (v.shape.clone(), data));
    }
    tensors.insert(
        "meta.config".into(),
        (vec![17], config_meta(&state.config)),
    );
    tensors.insert(
        "meta.train".into(),
        (
            vec![4],
            vec![
                state.epoch as f32,
                state.best_val_loss as f32,
                state.best_val_acc as f32,
                state.lr as f32,
            ],
        ),
    );
    fs::write(path, encode(&tensors)).map_err(CheckpointError::Io)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState, ModelError> {
    let bytes = fs::read(path).map_err(CheckpointError::Io)?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<ModelState, ModelError> {
    let mut tensors = decode(bytes)?;

    let (shape, meta) = tensors
        .remove("meta.config")
        .ok_or_else(|| CheckpointError::MissingTensor("meta.config".into()))?;
    if shape != [17] {
        return Err(CheckpointError::BadMeta(format!("meta.config shape {shape:?}")).into());
    }
    let config = config_from_meta(&meta)?;
    config.validate()?;

    let (shape, train_meta) = tensors
        .remove("meta.train")
        .ok_or_else(|| CheckpointError::MissingTensor("meta.train".into()))?;
    if shape != [4] {
        return Err(CheckpointError::BadMeta(format!("meta.train shape {shape:?}")).into());
    }

    let expected: BTreeMap<String, Vec<usize>> = param_shapes(&config).into_iter().collect();
    let mut params = ParamMap::new();
    for (name, (shape, data)) in tensors {
        let Some(want) = expected.get(&name) else {
            return Err(CheckpointError::UnknownTensor(name).into());
        };
        if want != &shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: want.clone(),
                found: shape,
            }
            .into());
        }
        let data: Vec<f64> = data.iter().map(|&x| x as f64).collect();
        params.insert(name, Value::new(&shape, data));
    }
    for name in expected.keys() {
        if !params.contains_key(name) {
            return Err(CheckpointError::MissingTensor(name.clone()).into());
        }
    }

    Ok(ModelState {
        config,
        params,
        epoch: train_meta[0] as usize,
        best_val_loss: train_meta[1] as f64,
        best_val_acc: train_meta[2] as f64,
        lr: train_meta[3] as f64,
    })
}
