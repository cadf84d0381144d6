//! `hfl-ckpt-1`: tag line, little-endian `u64` header length, JSON header,
//! then every parameter as little-endian `f64` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::tensor::Tensor;

use super::RunConfig;

pub const TAG: &str = "hfl-ckpt-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub manifest: Vec<ManifestEntry>,
    pub config: RunConfig,
    pub epoch: usize,
    pub dev_metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, config: RunConfig, epoch: usize, dev_metrics: Option<MetricsReport>) -> Self {
        let manifest = model.store.iter().map(|(name, t)| ManifestEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect();
        Self { header: CheckpointHeader { format: TAG.into(), manifest, config, epoch, dev_metrics }, model }
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(TAG.as_bytes())?;
        out.write_all(b"\n")?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        let mut payload = Vec::with_capacity(self.model.store.scalar_count() * 8);
        for (_, t) in self.model.store.iter() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.write_all(&payload)?;
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let tag_len = TAG.len() + 1;
        if bytes.len() < tag_len + 8 || &bytes[..TAG.len()] != TAG.as_bytes() || bytes[TAG.len()] != b'\n' {
            return Err(bad(format!("missing `{TAG}` tag")));
        }
        let header_len = u64::from_le_bytes(bytes[tag_len..tag_len + 8].try_into().expect("8 bytes")) as usize;
        let body = &bytes[tag_len + 8..];
        if body.len() < header_len {
            return Err(bad("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &body[header_len..];
        let expected: usize = header.manifest.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
        if payload.len() != expected {
            return Err(bad(format!("payload holds {} bytes, manifest needs {expected}", payload.len())));
        }
        let mut model = Model::new(header.config.model.clone(), header.config.seed)?;
        if model.store.len() != header.manifest.len() {
            return Err(bad(format!("manifest lists {} tensors, configured model has {}", header.manifest.len(), model.store.len())));
        }
        let mut offset = 0;
        for entry in &header.manifest {
            let id = model.store.id(&entry.name).ok_or_else(|| bad(format!("unknown parameter `{}`", entry.name)))?;
            if model.store.get(id).shape() != entry.shape.as_slice() {
                return Err(bad(format!("parameter `{}` has shape {:?}, model expects {:?}", entry.name, entry.shape, model.store.get(id).shape())));
            }
            let n: usize = entry.shape.iter().product();
            let data = payload[offset..offset + n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            offset += n * 8;
            model.store.set(id, Tensor::new(entry.shape.clone(), data)?)?;
        }
        Ok(Self { header, model })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
