//! Single-image inference, accuracy, training-set re-ranking, attention
//! heatmaps and the localisation score.

use std::io::Write;

use crate::data::{LabeledImage, SignatureBox, Truth};
use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::model::ModelState;
use crate::tensor::Tensor;

/// Class logits for one image (a group of size one).
pub fn predict(model: &ModelState, image: &Tensor) -> Result<Vec<f64>> {
    let fwd = model.forward_group(&[image])?;
    Ok(model.logits(&fwd.pooled)?.into_data())
}

pub fn accuracy(model: &ModelState, test: &[LabeledImage]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Domain("accuracy of an empty test set".into()));
    }
    let mut hits = 0usize;
    for img in test {
        let truth = img
            .true_label
            .ok_or_else(|| Error::Domain(format!("test image {} has no true label", img.id)))?;
        hits += usize::from(argmax(&predict(model, &img.pixels)?) == truth);
    }
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedImage {
    pub id: u32,
    pub score: f64,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRanking {
    pub class: usize,
    pub ranked: Vec<RankedImage>,
    /// `None` when the class has no correctly labelled image.
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub classes: Vec<ClassRanking>,
    pub mean_average_precision: f64,
    /// Classes left out of the mean because they have no positives.
    pub skipped_classes: usize,
}

/// Sorts by score descending with image id ascending on ties.
pub fn sort_ranking(items: &mut [RankedImage]) {
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
}

/// `(1/P) Σ precision@r` over the ranks `r` of the positives. `None` if
/// there are no positives.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let positives = relevant.iter().filter(|&&r| r).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / positives as f64)
}

/// Ranks precomputed scores per given label. `scores[i]` belongs to
/// `images[i]` and holds that image's logit for its given label.
pub fn rank_scores(images: &[LabeledImage], scores: &[f64], class_count: usize) -> Result<RankingResult> {
    if images.len() != scores.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} scores",
            images.len(),
            scores.len()
        )));
    }
    let mut classes = Vec::with_capacity(class_count);
    for class in 0..class_count {
        let mut ranked: Vec<RankedImage> = images
            .iter()
            .zip(scores)
            .filter(|(img, _)| img.given_label == class)
            .map(|(img, &score)| RankedImage {
                id: img.id,
                score,
                truth: img.truth,
            })
            .collect();
        sort_ranking(&mut ranked);
        let relevant: Vec<bool> = ranked.iter().map(|r| r.truth == Truth::Correct).collect();
        classes.push(ClassRanking {
            class,
            average_precision: average_precision(&relevant),
            ranked,
        });
    }
    let aps: Vec<f64> = classes.iter().filter_map(|c| c.average_precision).collect();
    let skipped_classes = classes.len() - aps.len();
    let mean_average_precision = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    Ok(RankingResult {
        classes,
        mean_average_precision,
        skipped_classes,
    })
}

/// Scores every noisy training image by its logit for its given label and
/// ranks each class; correctly labelled images are the positives.
pub fn rerank(model: &ModelState, train: &[LabeledImage]) -> Result<RankingResult> {
    let mut scores = Vec::with_capacity(train.len());
    for img in train {
        if img.given_label >= model.class_count {
            return Err(Error::Consistency(format!(
                "image {} has label {} but the model has {} classes",
                img.id, img.given_label, model.class_count
            )));
        }
        scores.push(predict(model, &img.pixels)?[img.given_label]);
    }
    rank_scores(train, &scores, model.class_count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub side: usize,
    /// Normalised attention, sums to one.
    pub attention: Vec<f64>,
    /// Min-max rescaled to `[0, 1]`; all zeros when the map is flat.
    pub rescaled: Vec<f64>,
}

impl Heatmap {
    pub fn quantized(&self) -> Vec<u8> {
        self.rescaled
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

fn image_attention(model: &ModelState, image: &Tensor) -> Result<Vec<f64>> {
    if !model.uses_attention() {
        return Err(Error::Capability(format!(
            "variant {} has no attention detector",
            model.config.variant
        )));
    }
    let fwd = model.forward_group(&[image])?;
    let trace = fwd
        .trace
        .ok_or_else(|| Error::State("attention model produced no trace".into()))?;
    Ok(trace.image_attention(0).to_vec())
}

pub fn attention_heatmap(model: &ModelState, image: &Tensor) -> Result<Heatmap> {
    let attention = image_attention(model, image)?;
    let lo = attention.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = attention.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rescaled = if hi > lo {
        attention.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; attention.len()]
    };
    Ok(Heatmap {
        side: model.extractor.feature_side(),
        attention,
        rescaled,
    })
}

/// Binary greymap (`P5`, maxval 255).
pub fn encode_pgm(side: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != side * side {
        return Err(Error::dim("encode_pgm", format!("{} pixels for side {side}", pixels.len())));
    }
    let mut out = Vec::with_capacity(pixels.len() + 16);
    write!(out, "P5\n{side} {side}\n255\n")?;
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Parses a `P5` greymap with maxval 255 into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Malformed(format!("not a binary PGM: {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("bad PGM header field {s}")))
    };
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Malformed(format!("unsupported PGM maxval {max}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h {
        return Err(Error::Malformed(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            w * h
        )));
    }
    Ok((w, h, raster.to_vec()))
}

/// Fraction of cells whose receptive-field centre falls inside `bx`.
pub fn box_cell_mask(model: &ModelState, bx: &SignatureBox) -> Vec<bool> {
    let d = model.extractor.feature_side();
    let inside = |center: f64, start: usize| {
        let lo = start as f64 - 0.5;
        center >= lo && center < lo + bx.size as f64
    };
    let mut mask = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            let (ci, cj) = (model.extractor.cell_center(i), model.extractor.cell_center(j));
            mask.push(inside(ci, bx.row) && inside(cj, bx.col));
        }
    }
    mask
}

/// Attention mass and uniform-baseline mass inside the signature boxes,
/// both averaged over images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Localization {
    pub mean_mass: f64,
    pub uniform_baseline: f64,
}

impl Localization {
    pub fn ratio(&self) -> f64 {
        self.mean_mass / self.uniform_baseline
    }
}

pub fn localization(model: &ModelState, images: &[LabeledImage]) -> Result<Localization> {
    if images.is_empty() {
        return Err(Error::Domain("localisation over an empty image set".into()));
    }
    let mut mass = 0.0;
    let mut baseline = 0.0;
    for img in images {
        let bx = img
            .signature_box
            .ok_or_else(|| Error::Domain(format!("image {} has no signature box", img.id)))?;
        let a = image_attention(model, &img.pixels)?;
        let mask = box_cell_mask(model, &bx);
        mass += a.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum::<f64>();
        baseline += mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    }
    let n = images.len() as f64;
    Ok(Localization {
        mean_mass: mass / n,
        uniform_baseline: baseline / n,
    })
}

/// Mean attention mass inside each image's signature box.
pub fn localization_score(model: &ModelState, images: &[LabeledImage]) -> Result<f64> {
    Ok(localization(model, images)?.mean_mass)
}
