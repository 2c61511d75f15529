//! Dataset directories: `manifest.json` plus one tensor file per split.
//!
//! Tensor files are little-endian: magic `AGTS`, `u32` version, `u32` rank,
//! `rank` × `u64` dims, then `f64` values in row-major order. A split file
//! holds a `[n, side, side, channels]` tensor; `n` may be zero.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledImage, NoisyDataset, SignatureBox, Truth};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: [u8; 4] = *b"AGTS";
const TENSOR_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u32,
    pub given_label: usize,
    pub truth: Truth,
    pub true_label: Option<usize>,
    pub signature_box: Option<SignatureBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSplit {
    pub correct: usize,
    pub cross_category: usize,
    pub cross_domain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub class_count: usize,
    pub noise_level: f64,
    pub image_side: usize,
    pub channels: usize,
    pub noise_split: NoiseSplit,
    pub train: Vec<ImageRecord>,
    pub negatives: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
}

pub fn write_tensor_file(path: impl AsRef<Path>, shape: &[usize], data: &[f64]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::dim(
            "write_tensor_file",
            format!("shape {shape:?} vs {} values", data.len()),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != TENSOR_MAGIC {
        return Err(Error::Format {
            expected: u32::from_be_bytes(TENSOR_MAGIC),
            observed: u32::from_be_bytes(magic),
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TENSOR_VERSION {
        return Err(Error::Malformed(format!("unsupported tensor file version {version}")));
    }
    r.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Malformed(format!("{} trailing bytes in tensor file", rest.len())));
    }
    Ok((shape, data))
}

fn record(img: &LabeledImage) -> ImageRecord {
    ImageRecord {
        id: img.id,
        given_label: img.given_label,
        truth: img.truth,
        true_label: img.true_label,
        signature_box: img.signature_box,
    }
}

fn write_split(dir: &Path, name: &str, images: &[LabeledImage], side: usize, c: usize) -> Result<()> {
    let mut data = Vec::with_capacity(images.len() * side * side * c);
    for img in images {
        data.extend_from_slice(img.pixels.data());
    }
    write_tensor_file(dir.join(format!("{name}.bin")), &[images.len(), side, side, c], &data)
}

fn read_split(dir: &Path, name: &str, records: Vec<ImageRecord>, side: usize, c: usize) -> Result<Vec<LabeledImage>> {
    let (shape, data) = read_tensor_file(dir.join(format!("{name}.bin")))?;
    if shape != [records.len(), side, side, c] {
        return Err(Error::Consistency(format!(
            "{name}.bin has shape {shape:?}, manifest expects [{}, {side}, {side}, {c}]",
            records.len()
        )));
    }
    let per = side * side * c;
    records
        .into_iter()
        .zip(data.chunks_exact(per.max(1)))
        .map(|(r, px)| {
            Ok(LabeledImage {
                id: r.id,
                pixels: Tensor::new(vec![side, side, c], px.to_vec())?,
                given_label: r.given_label,
                truth: r.truth,
                true_label: r.true_label,
                signature_box: r.signature_box,
            })
        })
        .collect()
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &NoisyDataset) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (side, c) = ds.image_dims()?;
    let count = |t| ds.train.iter().filter(|i| i.truth == t).count();
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        class_count: ds.class_count,
        noise_level: ds.noise_level,
        image_side: side,
        channels: c,
        noise_split: NoiseSplit {
            correct: count(Truth::Correct),
            cross_category: count(Truth::CrossCategory),
            cross_domain: count(Truth::CrossDomain),
        },
        train: ds.train.iter().map(record).collect(),
        negatives: ds.negatives.iter().map(record).collect(),
        test: ds.test.iter().map(record).collect(),
    };
    write_split(dir, "train", &ds.train, side, c)?;
    write_split(dir, "negatives", &ds.negatives, side, c)?;
    write_split(dir, "test", &ds.test, side, c)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<NoisyDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::Malformed(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let (side, c) = (manifest.image_side, manifest.channels);
    let ds = NoisyDataset {
        train: read_split(dir, "train", manifest.train, side, c)?,
        negatives: read_split(dir, "negatives", manifest.negatives, side, c)?,
        test: read_split(dir, "test", manifest.test, side, c)?,
        class_count: manifest.class_count,
        noise_level: manifest.noise_level,
    };
    ds.validate()?;
    Ok(ds)
}
