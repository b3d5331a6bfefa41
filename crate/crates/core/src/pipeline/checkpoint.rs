//! `ssv2a-ckpt/1` container: a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::manifold::{ManifoldArch, ManifoldModel};
use crate::nn::ParamSet;
use crate::remixer::{RemixerArch, RemixerModel};
use crate::temporal::{TaArch, TaModel};

pub const CHECKPOINT_FORMAT: &str = "ssv2a-ckpt/1";
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Manifold,
    Remixer,
    Ta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    kind: ModelKind,
    arch: Value,
    tensors: Vec<TensorEntry>,
    config: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub arch: Value,
    /// Echo of the configuration that produced the weights.
    pub config: Value,
    pub params: ParamSet<f32>,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

impl Checkpoint {
    pub fn manifold(model: &ManifoldModel<f32>, config: Value) -> Self {
        Self {
            kind: ModelKind::Manifold,
            arch: serde_json::to_value(&model.arch).expect("arch serializes"),
            config,
            params: model.params.clone(),
        }
    }

    pub fn remixer(model: &RemixerModel<f32>, config: Value) -> Self {
        Self {
            kind: ModelKind::Remixer,
            arch: serde_json::to_value(&model.arch).expect("arch serializes"),
            config,
            params: model.params.clone(),
        }
    }

    pub fn ta(model: &TaModel<f32>, config: Value) -> Self {
        Self {
            kind: ModelKind::Ta,
            arch: serde_json::to_value(&model.arch).expect("arch serializes"),
            config,
            params: model.params.clone(),
        }
    }

    fn expect(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    fn arch<A: serde::de::DeserializeOwned>(&self) -> Result<A> {
        serde_json::from_value(self.arch.clone()).map_err(|e| bad(format!("bad architecture: {e}")))
    }

    pub fn into_manifold(self) -> Result<ManifoldModel<f32>> {
        self.expect(ModelKind::Manifold)?;
        let arch: ManifoldArch = self.arch()?;
        ManifoldModel::from_params(arch, self.params)
    }

    pub fn into_remixer(self) -> Result<RemixerModel<f32>> {
        self.expect(ModelKind::Remixer)?;
        let arch: RemixerArch = self.arch()?;
        RemixerModel::from_params(arch, self.params)
    }

    pub fn into_ta(self) -> Result<TaModel<f32>> {
        self.expect(ModelKind::Ta)?;
        let arch: TaArch = self.arch()?;
        TaModel::from_params(arch, self.params)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: vec![t.nrows(), t.ncols()],
                dtype: "f32".into(),
            })
            .collect();
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            kind: self.kind,
            arch: self.arch.clone(),
            tensors,
            config: self.config.clone(),
        };
        let bytes = serde_json::to_vec(&header)?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&bytes)?;
        for (_, t) in self.params.iter() {
            for &x in t.as_standard_layout().iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER_BYTES {
            return Err(bad(format!("header length {len} is implausible")));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&header).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format `{}`", header.format)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let mut expected = 0usize;
        let mut seen = HashSet::new();
        for t in &header.tensors {
            if t.dtype != "f32" {
                return Err(bad(format!("tensor `{}` has unsupported dtype `{}`", t.name, t.dtype)));
            }
            if t.shape.len() != 2 {
                return Err(bad(format!("tensor `{}` is not two-dimensional", t.name)));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(bad(format!("duplicate tensor `{}`", t.name)));
            }
            expected += t.shape.iter().product::<usize>() * 4;
        }
        if payload.len() != expected {
            return Err(bad(format!("payload has {} bytes, header describes {expected}", payload.len())));
        }
        let mut params = ParamSet::new();
        let mut offset = 0;
        for t in &header.tensors {
            let n = t.shape[0] * t.shape[1];
            let values: Vec<f32> = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            offset += 4 * n;
            params.insert(t.name.clone(), Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("shape checked"));
        }
        Ok(Self {
            kind: header.kind,
            arch: header.arch,
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| bad(format!("cannot open {}: {e}", path.display())))?;
        Self::read(BufReader::new(file))
    }
}
