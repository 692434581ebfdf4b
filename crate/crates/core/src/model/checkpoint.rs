//! Binary checkpoint layout (all little-endian):
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 8      | magic `MTREGCKP`                          |
//! | 4      | format version, u32 (= 1)                 |
//! | 8      | model layout hash, u64                    |
//! | 8      | parameter count `n`, u64                  |
//! | 4n     | parameters θ, f32                         |
//! | 4n     | Adam first moments, f32                   |
//! | 4n     | Adam second moments, f32                  |
//! | 8      | optimizer step counter, u64               |
//! | 1      | teacher flag (0 or 1)                     |
//! | 4n     | teacher parameters θ′, f32, if flag = 1   |

use std::io::{Read, Write};
use std::path::Path;

use super::{AdamState, ModelConfig, ModelParameters};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MTREGCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layout_hash: u64,
    pub params: ModelParameters,
    pub adam: AdamState,
    pub teacher: Option<ModelParameters>,
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig, params: ModelParameters, adam: AdamState, teacher: Option<ModelParameters>) -> Self {
        Self {
            layout_hash: cfg.layout_hash(),
            params,
            adam,
            teacher,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.params.len();
        let mut out = Vec::with_capacity(37 + 16 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.layout_hash.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for block in [self.params.values(), &self.adam.m, &self.adam.v] {
            put_f32(&mut out, block);
        }
        out.extend_from_slice(&self.adam.step.to_le_bytes());
        match &self.teacher {
            Some(t) => {
                out.push(1);
                put_f32(&mut out, t.values());
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let layout_hash = u64::from_le_bytes(take(&mut r)?);
        let n = u64::from_le_bytes(take(&mut r)?) as usize;
        if r.len() < n.saturating_mul(12) {
            return Err(bad("truncated body"));
        }
        let params = get_f32(&mut r, n)?;
        let m = get_f32(&mut r, n)?;
        let v = get_f32(&mut r, n)?;
        let step = u64::from_le_bytes(take(&mut r)?);
        let [flag] = take::<1>(&mut r)?;
        let teacher = match flag {
            0 => None,
            1 => Some(ModelParameters::new(get_f32(&mut r, n)?)?),
            _ => return Err(bad("bad teacher flag")),
        };
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            layout_hash,
            params: ModelParameters::new(params)?,
            adam: AdamState { m, v, step },
            teacher,
        })
    }

    /// Fails unless the checkpoint was written for `cfg`'s layout.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layout_hash != cfg.layout_hash() {
            return Err(Error::Checkpoint("layout hash does not match the model config".into()));
        }
        Ok(())
    }
}

fn put_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))?;
    Ok(b)
}

fn get_f32(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f32::from_le_bytes(take(r)?) as f64)).collect()
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
