//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//! `"EDKT"`, `version: u32`, then until EOF one record per tensor:
//! `name_len: u32`, `name` (UTF-8), `shape: [u32; 4]`, `f32` payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::layers::StateDict;
use crate::nn::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"EDKT";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_module(module: &mut dyn StateDict) -> Self {
        let mut records = Vec::new();
        module.visit_state("", &mut |name, shape, data| {
            records.push((name.to_string(), Tensor::new(shape, data.to_vec()).expect("module state shape")));
        });
        Self { records }
    }

    /// Copies every record into the matching module state. Missing or extra
    /// names and shape disagreements are errors.
    pub fn load_into(&self, module: &mut dyn StateDict) -> Result<()> {
        let mut by_name: BTreeMap<&str, &Tensor> = self.records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut err = None;
        module.visit_state("", &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => err = Some(Error::Checkpoint(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape => {
                    err = Some(Error::Checkpoint(format!("`{name}`: shape {:?} vs expected {shape:?}", t.shape())))
                }
                Some(t) => data.copy_from_slice(t.data()),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, t) in &self.records {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            for d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut records = Vec::new();
        while !r.is_empty() {
            let len = read_u32(&mut r)? as usize;
            if r.len() < len {
                return Err(Error::Checkpoint("truncated name".into()));
            }
            let name = std::str::from_utf8(&r[..len])
                .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
                .to_string();
            r = &r[len..];
            let mut shape: Shape = [0; 4];
            for d in &mut shape {
                *d = read_u32(&mut r)? as usize;
            }
            let count: usize = shape.iter().product();
            if r.len() < count * 4 {
                return Err(Error::Checkpoint(format!("truncated payload for `{name}`")));
            }
            let data = r[..count * 4].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            r = &r[count * 4..];
            records.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Checkpoint("truncated record".into()))?;
    Ok(u32::from_le_bytes(b))
}
