//! `DBPCKPT1` checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "DBPCKPT1"
//! version    u8
//! fused      u8       1 = decorrelation matrices folded into the weights
//! epoch      u64
//! config     u32 length + UTF-8 config text
//! adam_step  u64      u64::MAX when no optimizer state is stored
//! tensors    u32 count, then per tensor:
//!              u16 name length + UTF-8 name
//!              u8 dtype (0 = f32, 1 = f64)
//!              u8 rank, rank x u64 dims
//!              values
//! ```
//!
//! Tensor names are `param.<path>`, `decorr.<site>`, `adam.m.<path>` and
//! `adam.v.<path>`. Random streams are derived from the seed and the epoch, so
//! the seed in the config text and the epoch fully determine them.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::decorr::DecorrelationMatrix;
use crate::error::{DbpError, Result};
use crate::mae::{MaeConfig, MaeModel};
use crate::nn::Parameters;
use crate::optim::{AdamWState, Moments};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DBPCKPT1";
pub const CHECKPOINT_VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const NO_OPTIMIZER: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A model snapshot with the run state needed to interpret it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub model: MaeModel,
    /// Absent in fused checkpoints: the moments belong to the unfused weights.
    pub optimizer: Option<AdamWState>,
}

impl Checkpoint {
    /// True when the model carries no decorrelation matrix.
    pub fn is_fused(&self) -> bool {
        self.model.decorrelated_sites().is_empty()
    }
}

fn mismatch(msg: impl Into<String>) -> DbpError {
    DbpError::CheckpointMismatch(msg.into())
}

/// Writes `model` with its run state. With `fuse`, every decorrelation matrix
/// is folded into its weight and neither matrices nor optimizer moments are stored.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    epoch: usize,
    model: &MaeModel,
    optimizer: Option<&AdamWState>,
    fuse: bool,
) -> Result<()> {
    let mut model = model.clone();
    if fuse {
        model.fuse()?;
    }
    let optimizer = if fuse { None } else { optimizer };

    let mut tensors = Vec::new();
    for p in model.params() {
        tensors.push(Tensor {
            name: format!("param.{}", p.name),
            shape: p.shape.clone(),
            data: p.value.to_vec(),
        });
    }
    for (site, linear) in model.linears() {
        if let Some(r) = linear.decorr() {
            tensors.push(Tensor {
                name: format!("decorr.{site}"),
                shape: vec![r.dim(), r.dim()],
                data: r.values().iter().copied().collect(),
            });
        }
    }
    if let Some(opt) = optimizer {
        for (tag, pick) in [("m", true), ("v", false)] {
            for mo in &opt.moments {
                let data = if pick { mo.m.clone() } else { mo.v.clone() };
                tensors.push(Tensor {
                    name: format!("adam.{tag}.{}", mo.name),
                    shape: vec![data.len()],
                    data,
                });
            }
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.push(u8::from(fuse));
    buf.extend_from_slice(&(epoch as u64).to_le_bytes());
    let text = config.to_text();
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&optimizer.map_or(NO_OPTIMIZER, |o| o.step).to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.push(DTYPE_F64);
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            DbpError::LengthMismatch {
                expected: (self.at + n) as u64,
                found: self.bytes.len() as u64,
            },
        )?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| mismatch("string field is not valid UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let name_len = self.u16()? as usize;
        let name = self.string(name_len)?;
        let dtype = self.u8()?;
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match dtype {
            DTYPE_F32 => self
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DTYPE_F64 => self
                .take(8 * n)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(DbpError::DtypeMismatch(other)),
        };
        Ok(Tensor { name, shape, data })
    }
}

/// Reads a checkpoint and rebuilds the model described by its config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(DbpError::BadMagic {
            path: path.to_path_buf(),
            expected: "DBPCKPT1",
        });
    }
    let mut r = Reader { bytes: &bytes, at: 8 };
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(DbpError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let fused = r.u8()? != 0;
    let epoch = r.u64()? as usize;
    let text_len = r.u32()? as usize;
    let config = TrainConfig::from_text(&r.string(text_len)?)
        .map_err(|e| e.annotate("checkpoint config"))?;
    let adam_step = r.u64()?;
    let count = r.u32()? as usize;
    let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    if r.at != bytes.len() {
        return Err(DbpError::LengthMismatch {
            expected: r.at as u64,
            found: bytes.len() as u64,
        });
    }

    let mut model = MaeModel::new(config.mae.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut by_name: std::collections::HashMap<&str, &Tensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();

    for p in model.params() {
        let key = format!("param.{}", p.name);
        let t = by_name
            .remove(key.as_str())
            .ok_or_else(|| mismatch(format!("missing tensor `{key}`")))?;
        if t.shape != p.shape {
            return Err(mismatch(format!(
                "tensor `{key}` has shape {:?}, model expects {:?}",
                t.shape, p.shape
            )));
        }
        p.value.copy_from_slice(&t.data);
    }

    for (site, linear) in model.linears_mut() {
        let key = format!("decorr.{site}");
        if let Some(t) = by_name.remove(key.as_str()) {
            if fused {
                return Err(mismatch(format!("fused checkpoint contains `{key}`")));
            }
            let &[rows, cols] = t.shape.as_slice() else {
                return Err(mismatch(format!("tensor `{key}` is not a matrix")));
            };
            let values = Array2::from_shape_vec((rows, cols), t.data.clone())
                .map_err(|e| mismatch(format!("tensor `{key}`: {e}")))?;
            linear.set_decorrelation(DecorrelationMatrix::from_values(site, values)?)?;
        }
    }

    let optimizer = if adam_step == NO_OPTIMIZER {
        None
    } else {
        let mut moments = Vec::new();
        for t in &tensors {
            let Some(name) = t.name.strip_prefix("adam.m.") else {
                continue;
            };
            let v = by_name
                .remove(format!("adam.v.{name}").as_str())
                .ok_or_else(|| mismatch(format!("missing second moment for `{name}`")))?;
            by_name.remove(t.name.as_str());
            moments.push(Moments {
                name: name.to_string(),
                m: t.data.clone(),
                v: v.data.clone(),
            });
        }
        Some(AdamWState {
            config: config.adamw,
            step: adam_step,
            moments,
        })
    };

    if let Some(extra) = by_name.keys().next() {
        return Err(mismatch(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        config,
        epoch,
        model,
        optimizer,
    })
}

/// Loads a checkpoint and checks that its architecture equals `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &MaeConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config.mae != expected {
        return Err(mismatch(format!(
            "checkpoint architecture {:?} differs from expected {:?}",
            ckpt.config.mae, expected
        )));
    }
    Ok(ckpt)
}

/// Rewrites a checkpoint with every decorrelation matrix folded into its weight.
pub fn fuse_checkpoint(input: impl AsRef<Path>, output: impl AsRef<Path>) -> Result<()> {
    let ckpt = load_checkpoint(input)?;
    save_checkpoint(output, &ckpt.config, ckpt.epoch, &ckpt.model, None, true)
}
