//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NRMK1"
//! u32 tensor count
//! per tensor:
//!   u32 name length, name bytes (UTF-8)
//!   u8  dtype tag (0 = f32, 1 = f64)
//!   4 x u32 dims
//!   raw little-endian element data
//! ```
//!
//! Vectors are stored with dims `(len, 1, 1, 1)`. Running statistics are
//! always stored as f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ConvNet;
use crate::tensor::{Precision, Real};

pub const MAGIC: &[u8; 5] = b"NRMK1";

/// One named tensor in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub precision: Precision,
    pub dims: [u32; 4],
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl Entry {
    fn from_values<T: Real>(name: &str, dims: [usize; 4], values: &[T]) -> Result<Self> {
        let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
        for &v in values {
            v.write_le(&mut bytes);
        }
        let dims = dims.map(|d| d as u32);
        Ok(Self {
            name: name.to_string(),
            precision: T::PRECISION,
            dims,
            bytes,
        })
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn values<T: Real>(&self) -> Result<Vec<T>> {
        if self.precision != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "{} stored as {}, expected {}",
                self.name,
                self.precision,
                T::PRECISION
            )));
        }
        Ok(self.bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.precision.dtype_tag());
        for d in e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&e.bytes);
    }
    out
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

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let precision =
            Precision::from_dtype_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let elems = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let width = match precision {
            Precision::Single => 4,
            Precision::Double => 8,
        };
        let data = r.take(elems.checked_mul(width).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        entries.push(Entry {
            name,
            precision,
            dims,
            bytes: data.to_vec(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(entries)
}

/// All trainable tensors followed by BN/BGN running statistics.
pub fn model_entries<T: Real>(model: &ConvNet<T>) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut shapes = Vec::new();
    for b in &model.blocks {
        let w = b.weights.shape().as_array();
        let c = b.spec.out_channels;
        shapes.extend([w, [c, 1, 1, 1], [c, 1, 1, 1], [c, 1, 1, 1]]);
    }
    shapes.push([model.fc_weights.rows(), model.fc_weights.cols(), 1, 1]);
    shapes.push([model.fc_bias.len(), 1, 1, 1]);
    let mut i = 0;
    let mut err = None;
    model.visit_params(|name, values| {
        match Entry::from_values(name, shapes[i], values) {
            Ok(e) => entries.push(e),
            Err(e) => err = Some(e),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    for (i, b) in model.blocks.iter().enumerate() {
        if let Some(r) = &b.norm.running {
            let dims = [r.slots(), 1, 1, 1];
            entries.push(Entry::from_values(&format!("block{i}.norm.running_mean"), dims, &r.means)?);
            entries.push(Entry::from_values(&format!("block{i}.norm.running_var"), dims, &r.vars)?);
        }
    }
    Ok(entries)
}

pub fn save<T: Real>(model: &ConvNet<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(&model_entries(model)?))?;
    Ok(())
}

/// Loads tensors into a model built from the same architecture. Every
/// tensor the model expects must be present with the same dims and dtype.
pub fn load_into<T: Real>(model: &mut ConvNet<T>, path: &Path) -> Result<()> {
    let entries = decode(&fs::read(path)?)?;
    let expected = model_entries(model)?;
    if entries.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors in file, model has {}",
            entries.len(),
            expected.len()
        )));
    }
    for (e, want) in entries.iter().zip(&expected) {
        if e.name != want.name || e.dims != want.dims || e.precision != want.precision {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                e.name, e.dims, want.name, want.dims
            )));
        }
    }
    let mut params = entries.iter();
    let mut err = None;
    model.visit_params_mut(|p| {
        let e = params.next().expect("entry count checked above");
        match e.values::<T>() {
            Ok(v) => p.copy_from_slice(&v),
            Err(x) => err = Some(x),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for b in &mut model.blocks {
        if let Some(r) = &mut b.norm.running {
            r.means = params.next().expect("entry count checked above").values::<f64>()?;
            r.vars = params.next().expect("entry count checked above").values::<f64>()?;
        }
    }
    Ok(())
}
