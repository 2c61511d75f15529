//! Binary model checkpoints.
//!
//! Layout, little-endian throughout: magic `AGRP`, `u32` format version,
//! `u32` tensor count, then per tensor `u32` name length, UTF-8 name, `u32`
//! rank, `rank` × `u64` dims and the `f64` values; finally a `u64` length
//! and a JSON header carrying the training config and model geometry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;
use crate::trainer::TrainConfig;

pub const MAGIC: [u8; 4] = *b"AGRP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub class_count: usize,
    pub input_side: usize,
    pub input_channels: usize,
    pub step: u64,
}

impl CheckpointHeader {
    pub fn of(model: &ModelState) -> Self {
        Self {
            config: model.config.clone(),
            class_count: model.class_count,
            input_side: model.extractor.input_side,
            input_channels: model.extractor.input_channels,
            step: model.step,
        }
    }
}

pub fn encode_checkpoint(model: &ModelState) -> Result<Vec<u8>> {
    let tensors = model.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&CheckpointHeader::of(model))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Malformed(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Malformed("length overflows usize".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::Format {
            expected: u32::from_be_bytes(MAGIC),
            observed: u32::from_be_bytes(magic),
        });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Malformed(format!("unsupported checkpoint version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.len()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Malformed(format!("tensor {name} is larger than the file")))?;
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let json_len = cur.len()?;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(json_len)?)?;
    if cur.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after checkpoint header",
            bytes.len() - cur.pos
        )));
    }
    assemble(header, tensors)
}

/// Builds a model of the header's geometry and fills in the stored tensors,
/// which must match it name for name and shape for shape.
fn assemble(header: CheckpointHeader, tensors: Vec<(String, Tensor)>) -> Result<ModelState> {
    header.config.validate()?;
    let mut model = ModelState::init(
        &header.config,
        header.class_count,
        header.input_side,
        header.input_channels,
        0,
    )?;
    let expected = model.named_tensors();
    if expected.len() != tensors.len() {
        return Err(Error::Consistency(format!(
            "checkpoint holds {} tensors, its config implies {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((want, shape), (got, t)) in expected.iter().map(|(n, t)| (n, t.shape())).zip(&tensors) {
        if want != got || shape != t.shape() {
            return Err(Error::Consistency(format!(
                "checkpoint tensor {got} {:?} where {want} {shape:?} was expected",
                t.shape()
            )));
        }
    }
    let mut it = tensors.into_iter().map(|(_, t)| t);
    for block in &mut model.extractor.blocks {
        block.kernels = it.next().unwrap();
        block.bias = it.next().unwrap();
    }
    model.attention.w = it.next().unwrap().into_data();
    model.attention.b = it.next().unwrap().data()[0];
    model.classifier_weight = it.next().unwrap();
    model.classifier_bias = it.next().unwrap();
    model.step = header.step;
    Ok(model)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelState) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    decode_checkpoint(&fs::read(path)?)
}
