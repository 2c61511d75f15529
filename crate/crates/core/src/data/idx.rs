//! Big-endian IDX files (the MNIST container).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw unsigned-byte image block of an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub bytes: Vec<u8>,
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_be_bytes(b))
}

fn expect_magic(r: &mut impl Read, expected: u32) -> Result<()> {
    let observed = read_u32(r)?;
    if observed != expected {
        return Err(Error::Format { expected, observed });
    }
    Ok(())
}

pub fn read_idx_images(path: impl AsRef<Path>) -> Result<IdxImages> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, IMAGES_MAGIC)?;
    let count = read_u32(&mut r)? as usize;
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let mut bytes = vec![0u8; count * rows * cols];
    r.read_exact(&mut bytes)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        bytes,
    })
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let mut r = BufReader::new(File::open(path)?);
    expect_magic(&mut r, LABELS_MAGIC)?;
    let count = read_u32(&mut r)? as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels)?;
    Ok(labels)
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    if images.bytes.len() != images.count * images.rows * images.cols {
        return Err(Error::Consistency(format!(
            "{} bytes for {} images of {}×{}",
            images.bytes.len(),
            images.count,
            images.rows,
            images.cols
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        w.write_all(&v.to_be_bytes())?;
    }
    w.write_all(&images.bytes)?;
    w.flush()?;
    Ok(())
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

/// Loads an image/label pair as clean single-channel images with pixels in
/// `[0, 1]`. Image ids are the record positions.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.count != labels.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    let per = images.rows * images.cols;
    images
        .bytes
        .chunks_exact(per.max(1))
        .zip(&labels)
        .enumerate()
        .map(|(i, (px, &label))| {
            let pixels = Tensor::new(
                vec![images.rows, images.cols, 1],
                px.iter().map(|&b| f64::from(b) / 255.0).collect(),
            )?;
            Ok(LabeledImage::clean(i as u32, pixels, usize::from(label)))
        })
        .collect()
}
