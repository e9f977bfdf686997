//! Named-parameter archives. Layout (little-endian):
//!
//! ```text
//! "TSCK1" | u32 header_len | TOML header (sections and their specs)
//! | u32 tensor_count | { u16 name_len | name | u32 len | len f64 } ...
//! ```
//!
//! Tensor names are `<section>/<parameter>`; buffers (batch-norm running
//! statistics) are stored the same way.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Classifier, ClassifierSpec, Encoder, EncoderSpec, Module, Recovery, RecoverySpec};
use crate::error::{Result, TemsrError};

const MAGIC: &[u8; 5] = b"TSCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NetSpec {
    Encoder(EncoderSpec),
    Classifier(ClassifierSpec),
    Recovery(RecoverySpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    spec: NetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    section: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    sections: Vec<Section>,
    tensors: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    fn add<M: Module>(&mut self, name: &str, spec: NetSpec, module: &M) {
        self.sections.retain(|s| s.name != name);
        self.sections.push(Section {
            name: name.to_string(),
            spec,
        });
        let mut store = |key: &str, data: &[f64]| {
            self.tensors.insert(format!("{name}/{key}"), data.to_vec());
        };
        module.visit_params(&mut store);
        module.visit_buffers(&mut store);
    }

    pub fn add_encoder(&mut self, name: &str, enc: &Encoder) {
        self.add(name, NetSpec::Encoder(enc.spec.clone()), enc);
    }

    pub fn add_classifier(&mut self, name: &str, clf: &Classifier) {
        self.add(name, NetSpec::Classifier(clf.spec.clone()), clf);
    }

    pub fn add_recovery(&mut self, name: &str, rec: &Recovery) {
        self.add(name, NetSpec::Recovery(rec.spec.clone()), rec);
    }

    pub fn spec(&self, name: &str) -> Option<&NetSpec> {
        self.sections.iter().find(|s| s.name == name).map(|s| &s.spec)
    }

    fn fill<M: Module>(&self, name: &str, module: &mut M) -> Result<()> {
        let mut missing = None;
        let mut load = |key: &str, dst: &mut [f64]| match self.tensors.get(&format!("{name}/{key}")) {
            Some(src) if src.len() == dst.len() => dst.copy_from_slice(src),
            _ => {
                missing.get_or_insert_with(|| format!("{name}/{key}"));
            }
        };
        module.visit_params_mut(&mut load);
        module.visit_buffers_mut(&mut load);
        match missing {
            Some(key) => Err(TemsrError::Format(format!("tensor {key} missing or mis-sized"))),
            None => Ok(()),
        }
    }

    pub fn encoder(&self, name: &str) -> Result<Encoder> {
        match self.spec(name) {
            Some(NetSpec::Encoder(spec)) => {
                let mut enc = Encoder::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0));
                self.fill(name, &mut enc)?;
                Ok(enc)
            }
            _ => Err(TemsrError::Format(format!("no encoder section named {name}"))),
        }
    }

    pub fn classifier(&self, name: &str) -> Result<Classifier> {
        match self.spec(name) {
            Some(NetSpec::Classifier(spec)) => {
                let mut clf = Classifier::zeros(spec.clone());
                self.fill(name, &mut clf)?;
                Ok(clf)
            }
            _ => Err(TemsrError::Format(format!("no classifier section named {name}"))),
        }
    }

    pub fn recovery(&self, name: &str) -> Result<Recovery> {
        match self.spec(name) {
            Some(NetSpec::Recovery(spec)) => {
                let mut rec = Recovery::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0));
                self.fill(name, &mut rec)?;
                Ok(rec)
            }
            _ => Err(TemsrError::Format(format!("no recovery section named {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&Header {
            section: self.sections.clone(),
        })
        .map_err(|e| TemsrError::Format(e.to_string()))?;
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(header.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, data) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| TemsrError::Format(format!("checkpoint: {what}"));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5).ok_or_else(|| bad("truncated magic"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let hlen = r.u32().ok_or_else(|| bad("truncated header length"))? as usize;
        let header = std::str::from_utf8(r.take(hlen).ok_or_else(|| bad("truncated header"))?)
            .map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(header).map_err(|e| bad(&e.to_string()))?;
        let count = r.u32().ok_or_else(|| bad("truncated tensor count"))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16().ok_or_else(|| bad("truncated name"))? as usize;
            let name = std::str::from_utf8(r.take(nlen).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let len = r.u32().ok_or_else(|| bad("truncated length"))? as usize;
            let raw = r.take(len * 8).ok_or_else(|| bad("truncated tensor"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, data);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            sections: header.section,
            tensors,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(TemsrError::State(format!("checkpoint {} not found", path.display())));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}
