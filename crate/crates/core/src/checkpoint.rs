//! Versioned binary checkpoint container.
//!
//! Layout, little-endian: magic `DTCK`, format version `u32`, entry count
//! `u32`, then per entry a `u16` key length, the key, a kind byte and a
//! `u64` payload length followed by the payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::pipeline::{Model, SegModel, TrainState};

const MAGIC: &[u8; 4] = b"DTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Floats(Vec<f64>),
    Count(u64),
    Text(String),
}

impl Entry {
    fn kind(&self) -> u8 {
        match self {
            Entry::Floats(_) => 0,
            Entry::Count(_) => 1,
            Entry::Text(_) => 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: BTreeMap<String, Entry>,
}

impl Container {
    pub fn insert(&mut self, key: &str, entry: Entry) {
        self.entries.insert(key.to_string(), entry);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (k, e) in &self.entries {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.push(e.kind());
            let payload: Vec<u8> = match e {
                Entry::Floats(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                Entry::Count(n) => n.to_le_bytes().to_vec(),
                Entry::Text(s) => s.as_bytes().to_vec(),
            };
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let klen = u16::from_le_bytes(r.array()?) as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec())
                .map_err(|_| Error::Checkpoint("key is not UTF-8".into()))?;
            let kind = r.take(1)?[0];
            let len = u64::from_le_bytes(r.array()?) as usize;
            let payload = r.take(len)?;
            let entry = match kind {
                0 if len.is_multiple_of(8) => Entry::Floats(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 if len == 8 => Entry::Count(u64::from_le_bytes(payload.try_into().expect("8 bytes"))),
                2 => Entry::Text(
                    String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::Checkpoint(format!("entry `{key}` is not UTF-8")))?,
                ),
                _ => return Err(Error::Checkpoint(format!("entry `{key}` is malformed"))),
            };
            entries.insert(key, entry);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last entry".into()));
        }
        Ok(Self { entries })
    }

    fn floats(&self, key: &str) -> Result<&[f64]> {
        match self.entries.get(key) {
            Some(Entry::Floats(v)) => Ok(v),
            _ => Err(Error::Checkpoint(format!("missing float entry `{key}`"))),
        }
    }

    fn count(&self, key: &str) -> Result<u64> {
        match self.entries.get(key) {
            Some(Entry::Count(n)) => Ok(*n),
            _ => Err(Error::Checkpoint(format!("missing count entry `{key}`"))),
        }
    }

    fn text(&self, key: &str) -> Result<&str> {
        match self.entries.get(key) {
            Some(Entry::Text(s)) => Ok(s),
            _ => Err(Error::Checkpoint(format!("missing text entry `{key}`"))),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

fn params_flat<M: Module>(m: &M) -> Vec<f64> {
    m.params().concat()
}

fn load_params<M: Module>(m: &mut M, flat: &[f64], key: &str) -> Result<()> {
    let expected = m.num_params();
    if flat.len() != expected {
        return Err(Error::Checkpoint(format!(
            "entry `{key}` has {} values, expected {expected}",
            flat.len()
        )));
    }
    let mut off = 0;
    for s in m.params_mut() {
        let n = s.len();
        s.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}

pub fn to_container(state: &TrainState) -> Container {
    let m = &state.model;
    let mut c = Container::default();
    c.insert("backbone", Entry::Floats(m.backbone.to_flat()));
    c.insert("class_head", Entry::Floats(m.class_head.to_flat()));
    c.insert("seg_teacher", Entry::Floats(m.seg_teacher.to_flat()));
    c.insert("student", Entry::Floats(m.student.to_flat()));
    c.insert("optimizer", Entry::Floats(params_flat(&state.velocity)));
    c.insert("iter", Entry::Count(state.iter));
    c.insert("config_hash", Entry::Text(state.config.hash()));
    c.insert("config", Entry::Text(state.config.to_text()));
    c
}

pub fn from_container(c: &Container) -> Result<TrainState> {
    let config = RunConfig::from_text(c.text("config")?)?;
    let hash = c.text("config_hash")?;
    if config.hash() != hash {
        return Err(Error::Checkpoint("config snapshot does not match its hash".into()));
    }
    let mut model = Model::new(&config);
    let wrap = |key: &str, e: Error| Error::Checkpoint(format!("entry `{key}`: {e}"));
    model.backbone.load_flat(c.floats("backbone")?).map_err(|e| wrap("backbone", e))?;
    model.class_head.load_flat(c.floats("class_head")?).map_err(|e| wrap("class_head", e))?;
    model.seg_teacher.load_flat(c.floats("seg_teacher")?).map_err(|e| wrap("seg_teacher", e))?;
    model.student.load_flat(c.floats("student")?).map_err(|e| wrap("student", e))?;
    let mut velocity = model.zeros_like();
    load_params(&mut velocity, c.floats("optimizer")?, "optimizer")?;
    Ok(TrainState {
        model,
        velocity,
        iter: c.count("iter")?,
        config,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, to_container(state).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_container(&Container::from_bytes(&bytes)?)
}

/// Stage-two network: keys `backbone`, `head`, `config`, `config_hash`.
pub fn seg_model_container(model: &SegModel, config: &RunConfig) -> Container {
    let mut c = Container::default();
    c.insert("backbone", Entry::Floats(model.backbone.to_flat()));
    c.insert("head", Entry::Floats(model.head.to_flat()));
    c.insert("config_hash", Entry::Text(config.hash()));
    c.insert("config", Entry::Text(config.to_text()));
    c
}

pub fn seg_model_from_container(c: &Container) -> Result<(SegModel, RunConfig)> {
    let config = RunConfig::from_text(c.text("config")?)?;
    if config.hash() != c.text("config_hash")? {
        return Err(Error::Checkpoint("config snapshot does not match its hash".into()));
    }
    let mut model = SegModel::init(&config, 0);
    let wrap = |key: &str, e: Error| Error::Checkpoint(format!("entry `{key}`: {e}"));
    model.backbone.load_flat(c.floats("backbone")?).map_err(|e| wrap("backbone", e))?;
    model.head.load_flat(c.floats("head")?).map_err(|e| wrap("head", e))?;
    Ok((model, config))
}

/// What a checkpoint file holds.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // built once per load
pub enum Saved {
    Stage1(Box<TrainState>),
    Stage2(Box<SegModel>, RunConfig),
}

pub fn save_seg_model(model: &SegModel, config: &RunConfig, path: &Path) -> Result<()> {
    std::fs::write(path, seg_model_container(model, config).to_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads either kind of checkpoint.
pub fn load_any(path: &Path) -> Result<Saved> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = Container::from_bytes(&bytes)?;
    if c.entries.contains_key("head") {
        let (m, cfg) = seg_model_from_container(&c)?;
        Ok(Saved::Stage2(Box::new(m), cfg))
    } else {
        Ok(Saved::Stage1(Box::new(from_container(&c)?)))
    }
}
