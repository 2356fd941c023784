//! Binary checkpoint container.
//!
//! All integers are little-endian `u32`, all reals little-endian `f64`.
//!
//! ```text
//! magic            8 bytes  "BINCKPT\0"
//! version          u32      1
//! feature_dim      u32
//! n_vars           u32
//! per variable     name (u32 length + UTF-8), kind u8, n_parents u32, parents u32 each
//! per subnetwork   activation u8, n_layers u32,
//!                  per layer: inputs u32, outputs u32,
//!                  W_m, W_s raw (inputs*outputs f64 each), b_m, b_s raw (outputs f64 each)
//! standardizer     u8 flag; if 1: four f64 arrays (u32 length each) x_mean, x_std, v_mean, v_std
//! metadata         u32 count, then key/value string pairs
//! checksum         first 8 bytes of SHA-256 over everything above
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{BinModel, ModelError, VariableKind, VariableSpec};
use crate::data::Standardizer;
use crate::npn::{Activation, NpnLinearLayer, NpnSubnetwork};

pub const MAGIC: &[u8; 8] = b"BINCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic header)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("invalid model in checkpoint: {0}")]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A model plus the preprocessing and provenance needed to use it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: BinModel,
    pub standardizer: Option<Standardizer>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: BinModel) -> Self {
        Self {
            model,
            standardizer: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        let m = &self.model;
        put_u32(&mut w, m.feature_dim() as u32);
        put_u32(&mut w, m.num_vars() as u32);
        for v in m.variables() {
            put_str(&mut w, &v.name);
            w.push(v.kind.code());
            put_u32(&mut w, v.parents.len() as u32);
            for &p in &v.parents {
                put_u32(&mut w, p as u32);
            }
        }
        for s in m.subnets() {
            w.push(s.hidden_activation().code());
            put_u32(&mut w, s.layers().len() as u32);
            for l in s.layers() {
                put_u32(&mut w, l.inputs as u32);
                put_u32(&mut w, l.outputs as u32);
                for arr in [&l.weight_mean, &l.weight_var_raw, &l.bias_mean, &l.bias_var_raw] {
                    put_f64s(&mut w, arr);
                }
            }
        }
        match &self.standardizer {
            None => w.push(0),
            Some(st) => {
                w.push(1);
                for arr in [&st.x_mean, &st.x_std, &st.v_mean, &st.v_std] {
                    put_u32(&mut w, arr.len() as u32);
                    put_f64s(&mut w, arr);
                }
            }
        }
        put_u32(&mut w, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut w, k);
            put_str(&mut w, v);
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest[..8]);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 4 + 8 {
            return Err(CheckpointError::Truncated);
        }
        let (body, sum) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if Sha256::digest(body)[..8] != *sum {
            return Err(CheckpointError::Checksum);
        }
        let feature_dim = r.usize()?;
        let n_vars = r.usize()?;
        let mut variables = Vec::with_capacity(n_vars.min(1 << 16));
        for _ in 0..n_vars {
            let name = r.string()?;
            let kind = VariableKind::from_code(r.u8()?)
                .ok_or_else(|| CheckpointError::Corrupt("unknown variable kind".into()))?;
            let n_parents = r.usize()?;
            let parents = (0..n_parents).map(|_| r.usize()).collect::<Result<_, _>>()?;
            variables.push(VariableSpec { name, kind, parents });
        }
        let mut subnets = Vec::with_capacity(n_vars.min(1 << 16));
        for _ in 0..n_vars {
            let activation = Activation::from_code(r.u8()?)
                .ok_or_else(|| CheckpointError::Corrupt("unknown activation".into()))?;
            let n_layers = r.usize()?;
            let mut layers = Vec::with_capacity(n_layers.min(1 << 8));
            for _ in 0..n_layers {
                let inputs = r.usize()?;
                let outputs = r.usize()?;
                let nw = inputs
                    .checked_mul(outputs)
                    .ok_or_else(|| CheckpointError::Corrupt("layer size overflow".into()))?;
                layers.push(NpnLinearLayer {
                    inputs,
                    outputs,
                    weight_mean: r.f64s(nw)?,
                    weight_var_raw: r.f64s(nw)?,
                    bias_mean: r.f64s(outputs)?,
                    bias_var_raw: r.f64s(outputs)?,
                });
            }
            subnets.push(NpnSubnetwork::from_layers(layers, activation).map_err(ModelError::from)?);
        }
        let model = BinModel::from_parts(feature_dim, variables, subnets)?;
        let standardizer = match r.u8()? {
            0 => None,
            1 => {
                let mut arr = || -> Result<Vec<f64>, CheckpointError> {
                    let n = r.usize()?;
                    r.f64s(n)
                };
                Some(Standardizer {
                    x_mean: arr()?,
                    x_std: arr()?,
                    v_mean: arr()?,
                    v_std: arr()?,
                })
            }
            _ => return Err(CheckpointError::Corrupt("bad standardizer flag".into())),
        };
        let mut metadata = BTreeMap::new();
        for _ in 0..r.usize()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            model,
            standardizer,
            metadata,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed write never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
        tmp_name.push(".partial");
        let tmp = path.with_file_name(tmp_name);
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        Ok(result?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_checkpoint(model: &BinModel, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BinModel, CheckpointError> {
    Ok(Checkpoint::load(path)?.model)
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("invalid UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
