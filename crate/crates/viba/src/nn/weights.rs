//! `VWTS` weights files.
//!
//! Layout (integers and floats little-endian):
//! magic `VWTS`, version u16 = 1, u32 layer count; per layer: u16 name
//! length + UTF-8 name, u8 tensor count; per tensor: u16 name length + name,
//! u8 rank, u32 per dimension, then the raw f32 data. Round trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{build_model, Model, ModelError, ModelSpec};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"VWTS";
const VERSION: u16 = 1;

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::WeightsFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_weights(model: &Model, path: &Path) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (layer, tensors) in &model.params {
        write_name(&mut out, layer)?;
        out.push(tensors.len() as u8);
        for (name, tensor) in tensors {
            write_name(&mut out, name)?;
            out.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn write_name(out: &mut Vec<u8>, name: &str) -> Result<(), ModelError> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(ModelError::Invalid(format!("name `{name}` too long")));
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn name(&mut self) -> Result<String, ModelError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| format_err(self.path, "non-UTF-8 name"))
    }
}

/// Loads weights for the given spec. Every stored tensor must match the
/// shape the spec implies; mismatches name the offending layer. No partial
/// model is ever produced.
pub fn load_weights(spec: ModelSpec, path: &Path) -> Result<Model, ModelError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(format_err(path, "bad magic (expected VWTS)"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let layer_count = r.u32()? as usize;
    let mut stored: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    for _ in 0..layer_count {
        let layer = r.name()?;
        let tensor_count = r.u8()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..tensor_count {
            let name = r.name()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        stored.insert(layer, tensors);
    }
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after last tensor"));
    }

    // Shape-check against a freshly built skeleton before committing.
    let skeleton = build_model(spec, 0)?;
    for (layer, tensors) in &skeleton.params {
        let loaded = stored
            .get(layer)
            .ok_or_else(|| format_err(path, format!("missing layer `{layer}`")))?;
        for (name, expected) in tensors {
            let got = loaded.get(name).ok_or_else(|| {
                format_err(path, format!("layer `{layer}` missing tensor `{name}`"))
            })?;
            if got.shape() != expected.shape() {
                return Err(format_err(
                    path,
                    format!(
                        "layer `{layer}` tensor `{name}`: shape {:?} does not match spec {:?}",
                        got.shape(),
                        expected.shape()
                    ),
                ));
            }
        }
    }
    if stored.len() != skeleton.params.len() {
        return Err(format_err(path, "extra layers not present in spec"));
    }
    let mut model = skeleton;
    model.params = stored;
    Ok(model)
}
