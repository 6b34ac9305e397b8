//! Binary checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CPNT" | version | meta_len | meta (sorted key=value lines, UTF-8)
//!        | count | count x (name_len | name | rank | dims... | f32 data...)
//! ```
//!
//! Tensors are stored in lexicographic name order, so a load followed by a
//! save reproduces the same bytes. Optimizer moments, when present, are
//! stored as tensors under the `adam.m/` and `adam.v/` prefixes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{CpnetModel, ModelConfig};
use crate::nn::Module;
use crate::tensor::Tensor;

use super::adam::AdamState;

pub const MAGIC: &[u8; 4] = b"CPNT";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &CpnetModel, adam: Option<&AdamState>, extra: &BTreeMap<String, String>) -> Self {
        let c = &model.config;
        let mut metadata = extra.clone();
        metadata.insert("base_width".into(), c.base_width.to_string());
        metadata.insert("dropout_rate".into(), c.dropout_rate.to_string());
        metadata.insert("seed".into(), c.seed.to_string());
        metadata.insert("summation_shortcuts".into(), c.summation_shortcuts.to_string());
        metadata.insert("model_step".into(), model.step.to_string());
        let mut tensors: BTreeMap<String, Tensor> = model
            .parameters()
            .into_iter()
            .map(|(n, p)| (n, p.value.clone()))
            .chain(model.buffers().into_iter().map(|(n, t)| (n, t.clone())))
            .collect();
        if let Some(a) = adam {
            metadata.insert("adam.lr".into(), a.lr.to_string());
            metadata.insert("adam.beta1".into(), a.beta1.to_string());
            metadata.insert("adam.beta2".into(), a.beta2.to_string());
            metadata.insert("adam.eps".into(), a.eps.to_string());
            metadata.insert("adam.t".into(), a.t.to_string());
            for (n, m) in &a.m {
                tensors.insert(format!("{ADAM_M}{n}"), m.clone());
            }
            for (n, v) in &a.v {
                tensors.insert(format!("{ADAM_V}{n}"), v.clone());
            }
        }
        Self { metadata, tensors }
    }

    fn meta<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad metadata value {key}={raw}")))
    }

    pub fn config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            base_width: self.meta("base_width")?,
            dropout_rate: self.meta("dropout_rate")?,
            seed: self.meta("seed")?,
            summation_shortcuts: self.meta("summation_shortcuts")?,
        })
    }

    /// Builds a model with the stored configuration.
    pub fn model(&self) -> Result<CpnetModel> {
        self.model_as(&self.config()?)
    }

    /// Builds a model with `config` and fills it from the stored tensors.
    /// Fails on the first (lexicographic) tensor whose name or shape does
    /// not match.
    pub fn model_as(&self, config: &ModelConfig) -> Result<CpnetModel> {
        let mut model = CpnetModel::build(config)?;
        let expected: BTreeMap<String, Vec<usize>> = model
            .parameters()
            .into_iter()
            .map(|(n, p)| (n, p.value.shape().to_vec()))
            .chain(model.buffers().into_iter().map(|(n, t)| (n, t.shape().to_vec())))
            .collect();
        let stored = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V));
        let mut names: Vec<&String> = expected.keys().collect();
        names.extend(stored.clone().map(|(n, _)| n));
        names.sort();
        names.dedup();
        for name in names {
            match (expected.get(name), self.tensors.get(name)) {
                (Some(want), Some(have)) if want.as_slice() == have.shape() => {}
                (Some(want), Some(have)) => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for `{name}`: checkpoint {:?}, model expects {want:?}",
                        have.shape()
                    )))
                }
                (Some(_), None) => {
                    return Err(Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))
                }
                (None, _) => {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint tensor `{name}` is not part of the model"
                    )))
                }
            }
        }
        for (name, p) in model.parameters_mut() {
            p.value = self.tensors[&name].clone();
        }
        for (name, t) in model.buffers_mut() {
            *t = self.tensors[&name].clone();
        }
        if let Some(step) = self.metadata.get("model_step") {
            model.step = step
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad model_step {step}")))?;
        }
        Ok(model)
    }

    pub fn adam(&self) -> Result<Option<AdamState>> {
        if !self.metadata.contains_key("adam.t") {
            return Ok(None);
        }
        let mut a = AdamState::new(self.meta("adam.lr")?);
        a.beta1 = self.meta("adam.beta1")?;
        a.beta2 = self.meta("adam.beta2")?;
        a.eps = self.meta("adam.eps")?;
        a.t = self.meta("adam.t")?;
        for (n, t) in &self.tensors {
            if let Some(p) = n.strip_prefix(ADAM_M) {
                a.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = n.strip_prefix(ADAM_V) {
                a.v.insert(p.to_string(), t.clone());
            }
        }
        Ok(Some(a))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry `{k}` is not representable")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(truncated)?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &CpnetModel,
    adam: Option<&AdamState>,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    Checkpoint::from_model(model, adam, extra).write(path)
}

/// Loads a model using the configuration stored in the file.
pub fn load_checkpoint(path: &Path) -> Result<CpnetModel> {
    Checkpoint::read(path)?.model()
}
