//! Single-file model snapshots.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MAKGCNCK"
//! u32 manifest length, manifest JSON (UTF-8)
//! u32 blob count
//! per blob: u32 name length, name, u8 dtype tag, u8 rank, rank x u64 dims, payload
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Element};
use crate::train::Metrics;

const MAGIC: &[u8; 8] = b"MAKGCNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub dtype: DType,
    pub epoch: usize,
    pub val_loss: f64,
    pub metrics: Option<Metrics>,
    /// Caller-supplied context such as the data pipeline and its source.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Blob {
    fn from_values<T: Element>(name: String, shape: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::DTYPE.size_of());
        values.iter().for_each(|v| v.write_le(&mut bytes));
        Blob {
            name,
            dtype: T::DTYPE,
            shape: shape.to_vec(),
            bytes,
        }
    }

    fn values<T: Element>(&self) -> Vec<T> {
        self.bytes.chunks_exact(T::DTYPE.size_of()).map(T::read_le).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blobs: Vec<Blob>,
}

fn running_names(layer: &str) -> (String, String) {
    (format!("{layer}.running_mean"), format!("{layer}.running_var"))
}

impl Checkpoint {
    /// Snapshot of every parameter and running statistic of `model`.
    pub fn capture<T: Element>(model: &Model<T>, epoch: usize, val_loss: f64, metrics: Option<Metrics>, extra: serde_json::Value) -> Self {
        let mut blobs: Vec<Blob> = model
            .parameters()
            .iter()
            .map(|p| Blob::from_values(p.name().to_string(), p.shape(), p.data()))
            .collect();
        for (layer, stats) in model.buffers() {
            let (m, v) = running_names(layer);
            let c = stats.channels();
            blobs.push(Blob::from_values(m, &[c], &stats.mean()));
            blobs.push(Blob::from_values(v, &[c], &stats.var()));
        }
        Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                dtype: T::DTYPE,
                epoch,
                val_loss,
                metrics,
                extra,
            },
            blobs,
        }
    }

    /// Copies the snapshot into `model`. Every name, dtype and shape is
    /// checked before anything is written, so a rejected load leaves the
    /// model untouched.
    pub fn restore<T: Element>(&self, model: &mut Model<T>) -> Result<()> {
        if self.manifest.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} values, model uses {}",
                self.manifest.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let by_name: HashMap<&str, &Blob> = self.blobs.iter().map(|b| (b.name.as_str(), b)).collect();
        if by_name.len() != self.blobs.len() {
            return Err(Error::Checkpoint("duplicate blob names".into()));
        }
        let mut expected: Vec<(String, Vec<usize>)> =
            model.parameters().iter().map(|p| (p.name().to_string(), p.shape().to_vec())).collect();
        for (layer, stats) in model.buffers() {
            let (m, v) = running_names(layer);
            expected.push((m, vec![stats.channels()]));
            expected.push((v, vec![stats.channels()]));
        }
        for (name, shape) in &expected {
            let blob = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing blob `{name}`")))?;
            if &blob.shape != shape || blob.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "blob `{name}` is {} {:?}, model expects {} {shape:?}",
                    blob.dtype.name(),
                    blob.shape,
                    T::DTYPE.name()
                )));
            }
        }
        if expected.len() != self.blobs.len() {
            let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<&str> = self.blobs.iter().map(|b| b.name.as_str()).filter(|n| !known.contains(n)).collect();
            return Err(Error::Checkpoint(format!("unexpected blobs {extra:?}")));
        }

        for p in model.parameters_mut() {
            let values = by_name[p.name()].values::<T>();
            p.data_mut().copy_from_slice(&values);
            p.momentum = None;
        }
        for (layer, stats) in model.buffers() {
            let (m, v) = running_names(layer);
            stats.set(by_name[m.as_str()].values(), by_name[v.as_str()].values());
        }
        Ok(())
    }

    /// Builds a fresh model from the stored configuration and loads the
    /// snapshot into it.
    pub fn to_model<T: Element>(&self) -> Result<Model<T>> {
        let mut model = Model::build(&self.manifest.model, 0)?;
        self.restore(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for b in &self.blobs {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.dtype.tag());
            out.push(u8::try_from(b.shape.len()).map_err(|_| Error::Checkpoint("rank above 255".into()))?);
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&b.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = r.u32()? as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
        }
        let count = r.u32()? as usize;
        let mut blobs = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("blob name is not UTF-8".into()))?;
            let dtype = DType::from_tag(r.take(1)?[0])
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag in `{name}`")))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let size = shape
                .iter()
                .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("blob `{name}` is too large")))?;
            blobs.push(Blob {
                name,
                dtype,
                shape,
                bytes: r.take(size)?.to_vec(),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last blob".into()));
        }
        Ok(Checkpoint { manifest, blobs })
    }

    /// Writes atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
