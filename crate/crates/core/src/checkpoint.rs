//! Binary checkpoint format.
//!
//! ```text
//! "FMEM"                      magic
//! u32 LE                      version
//! u32 LE + bytes              UTF-8 JSON config blob
//! repeated tensor records:
//!   u16 LE + bytes            name
//!   u8                        dtype tag (0 = f32, 1 = f64)
//!   u8                        ndim
//!   ndim × u64 LE             dims
//!   raw LE row-major data
//! ```
//!
//! Consolidator tensors carry a `consolidator/` name prefix. A tensor stored
//! in a different precision than requested is cast on load.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::consolidator::{Consolidator, ConsolidatorConfig};
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FMEM";
pub const VERSION: u32 = 1;

/// The JSON config blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub backbone: BackboneConfig,
    pub consolidator: Option<ConsolidatorConfig>,
}

#[derive(Debug)]
pub struct Checkpoint<T> {
    pub backbone: Backbone<T>,
    pub consolidator: Option<Consolidator<T>>,
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::format("name", format!("`{name}` is too long")))?;
    let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::format("ndim", format!("`{name}` has too many dims")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(ndim);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode<T: Scalar>(backbone: &Backbone<T>, consolidator: Option<&Consolidator<T>>) -> Result<Vec<u8>> {
    let config = CheckpointConfig {
        backbone: backbone.config().clone(),
        consolidator: consolidator.map(|c| c.config().clone()),
    };
    let blob = serde_json::to_vec(&config)?;
    let blob_len = u32::try_from(blob.len()).map_err(|_| Error::format("config", "blob exceeds u32"))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&blob_len.to_le_bytes());
    out.extend_from_slice(&blob);
    for p in backbone.parameters() {
        write_tensor(&mut out, p.name(), p.value())?;
    }
    if let Some(c) = consolidator {
        for p in c.parameters() {
            write_tensor(&mut out, p.name(), p.value())?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(field, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

struct Record<'a> {
    dtype: Dtype,
    dims: Vec<usize>,
    data: &'a [u8],
}

impl Record<'_> {
    fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let width = self.dtype.size_of();
        let values: Vec<T> = match self.dtype {
            Dtype::F32 => self.data.chunks_exact(width).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            Dtype::F64 => self.data.chunks_exact(width).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Tensor::new(self.dims.clone(), values).map_err(|_| Error::format("data", format!("`{name}` holds non-finite values")))
    }
}

fn read_records<'a>(r: &mut Reader<'a>) -> Result<HashMap<String, Record<'a>>> {
    let mut records = HashMap::new();
    while !r.done() {
        let name_len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format("name", "not UTF-8"))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::format("dtype", format!("unknown tag {tag} for `{name}`")))?;
        let ndim = r.u8("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(usize::try_from(r.u64("dims")?).map_err(|_| Error::format("dims", "dimension overflows usize"))?);
        }
        let bytes = dims
            .iter()
            .try_fold(dtype.size_of(), |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format("dims", format!("`{name}` size overflows")))?;
        let data = r.take(bytes, "data")?;
        if records.insert(name.clone(), Record { dtype, dims, data }).is_some() {
            return Err(Error::format("name", format!("duplicate tensor `{name}`")));
        }
    }
    Ok(records)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"FMEM\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}, expected {VERSION}")));
    }
    let blob_len = r.u32("config length")? as usize;
    let config: CheckpointConfig = serde_json::from_slice(r.take(blob_len, "config")?)
        .map_err(|e| Error::format("config", e.to_string()))?;
    let mut records = read_records(&mut r)?;

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let rec = records
            .remove(name)
            .ok_or_else(|| Error::format("name", format!("missing tensor `{name}`")))?;
        if rec.dims.as_slice() != shape {
            return Err(Error::format("dims", format!("`{name}` has shape {:?}, expected {shape:?}", rec.dims)));
        }
        rec.tensor(name)
    };
    let backbone = Backbone::from_named(config.backbone.clone(), &mut take)?;
    let consolidator = match config.consolidator {
        Some(cc) => Some(Consolidator::from_named(&config.backbone, cc, &mut take)?),
        None => None,
    };
    if let Some(extra) = records.keys().min() {
        return Err(Error::format("name", format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint { backbone, consolidator })
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    backbone: &Backbone<T>,
    consolidator: Option<&Consolidator<T>>,
) -> Result<()> {
    std::fs::write(path, encode(backbone, consolidator)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    decode(&std::fs::read(path)?)
}
