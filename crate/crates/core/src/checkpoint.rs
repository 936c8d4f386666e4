//! Self-describing binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "ARGUSCK1"
//! version    u32       currently 1
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u32       number of tensors
//! count x {
//!   name_len u16, name (UTF-8)
//!   ndim     u8,  dims: ndim x u64
//!   data     prod(dims) x f32
//! }
//! ```
//!
//! Parameters are stored as `param/<name>`, Adam moments as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{ArgusError, Result};
use crate::optim::{Adam, AdamConfig};
use crate::sampling::CountMinSketch;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ARGUSCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub architecture_digest: String,
    pub config_digest: String,
    pub seed: u64,
    /// Optimizer steps taken in the stage that wrote the checkpoint.
    pub step: u64,
    pub skipped_steps: u64,
    pub adam: AdamConfig,
    pub sketch: Option<CountMinSketch>,
    /// The resolved run config that produced the checkpoint.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> ArgusError {
    ArgusError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, store: &ParamStore<f32>, adam: Option<&Adam<f32>>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            store.iter().map(|(_, p)| (format!("param/{}", p.name), p.value.clone())).collect();
        if let Some(a) = adam {
            for (i, (_, p)) in store.iter().enumerate() {
                tensors.push((format!("adam.m/{}", p.name), a.m[i].clone()));
                tensors.push((format!("adam.v/{}", p.name), a.v[i].clone()));
            }
        }
        Self { meta, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored parameters into `store`; every parameter must be
    /// present with a matching shape.
    pub fn load_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.tensor(&format!("param/{name}")).ok_or_else(|| bad(format!("missing parameter {name}")))?;
            if t.shape() != store.value(id).shape() {
                return Err(bad(format!(
                    "parameter {name}: stored {:?}, expected {:?}",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    /// Rebuilds optimizer state if moments were saved.
    pub fn adam(&self, store: &ParamStore<f32>) -> Result<Option<Adam<f32>>> {
        let mut adam = Adam::new(self.meta.adam.clone(), store);
        for (i, (_, p)) in store.iter().enumerate() {
            match (self.tensor(&format!("adam.m/{}", p.name)), self.tensor(&format!("adam.v/{}", p.name))) {
                (Some(m), Some(v)) => {
                    adam.m[i] = m.clone();
                    adam.v[i] = v.clone();
                }
                _ => return Ok(None),
            }
        }
        adam.step = self.meta.step;
        adam.skipped = self.meta.skipped_steps;
        Ok(Some(adam))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        fn exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
            Ok(b)
        }
        if &exact::<8>(r)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(exact(r)?);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(exact(r)?) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|e| bad(format!("truncated metadata: {e}")))?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let count = u32::from_le_bytes(exact(r)?) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(exact(r)?) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = exact::<1>(r)?[0] as usize;
            let dims: Vec<usize> =
                (0..ndim).map(|_| exact(r).map(|b| u64::from_le_bytes(b) as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|e| bad(format!("truncated tensor {name}: {e}")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((name, Tensor::new(&dims, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| ArgusError::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| ArgusError::io(path, e))?;
        w.flush().map_err(|e| ArgusError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| ArgusError::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
