//! Challenge scoring, dice loss and the train/validation split.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::augment::SeededRng;
use crate::error::{Error, Result};
use crate::imagecore::{BinaryMask, ProbabilityMap};

pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.65;

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            expected: a,
            actual: b,
        });
    }
    Ok(())
}

/// Pixel counts `(|A ∩ B|, |A ∪ B|)`.
pub fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(u64, u64)> {
    same_dims(a.dims(), b.dims())?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok((inter, union))
}

/// `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = overlap_counts(a, b)?;
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Applies the challenge penalty: scores below `threshold` become 0.
pub fn apply_threshold(j: f64, threshold: f64) -> f64 {
    if j >= threshold {
        j
    } else {
        0.0
    }
}

pub fn thresholded_jaccard(a: &BinaryMask, b: &BinaryMask, threshold: f64) -> Result<f64> {
    Ok(apply_threshold(jaccard(a, b)?, threshold))
}

/// `(I, P, G)` sums of the dice loss.
fn dice_sums(p: impl Iterator<Item = f64>, g: &BinaryMask) -> (f64, f64, f64) {
    let (mut i, mut ps, mut gs) = (0.0f64, 0.0f64, 0.0f64);
    for (pv, &gv) in p.zip(g.bits()) {
        ps += pv;
        if gv {
            gs += 1.0;
            i += pv;
        }
    }
    (i, ps, gs)
}

fn loss_from_sums((i, ps, gs): (f64, f64, f64)) -> f64 {
    let u = ps + gs - i;
    if u == 0.0 {
        0.0
    } else {
        -i / u
    }
}

/// `L = -I / (P + G - I)` with `I = Σ p·g`, `P = Σ p`, `G = Σ g`.
/// Returns 0 when the denominator vanishes.
pub fn dice_loss(p: &ProbabilityMap, g: &BinaryMask) -> Result<f64> {
    same_dims(p.dims(), g.dims())?;
    Ok(loss_from_sums(dice_sums(p.values().iter().map(|&v| v as f64), g)))
}

/// [`dice_loss`] on row-major double-precision probabilities.
pub fn dice_loss_f64(p: &[f64], g: &BinaryMask) -> Result<f64> {
    if p.len() != g.bits().len() {
        return Err(Error::InvalidArgument(format!(
            "{} probabilities for a {}x{} mask",
            p.len(),
            g.width(),
            g.height()
        )));
    }
    Ok(loss_from_sums(dice_sums(p.iter().copied(), g)))
}

/// Per-pixel `∂L/∂p`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// `∂L/∂p_k = -(g_k·U - I·(1 - g_k)) / U²` with `U = P + G - I`.
pub fn dice_loss_gradient(p: &ProbabilityMap, g: &BinaryMask) -> Result<GradientMap> {
    same_dims(p.dims(), g.dims())?;
    let (i, ps, gs) = dice_sums(p.values().iter().map(|&v| v as f64), g);
    let u = ps + gs - i;
    if u == 0.0 {
        return Err(Error::InvalidArgument(
            "dice loss gradient is undefined when P + G - I = 0".into(),
        ));
    }
    let on = -1.0 / u;
    let off = i / (u * u);
    Ok(GradientMap {
        width: p.width(),
        height: p.height(),
        values: g.bits().iter().map(|&gv| if gv { on } else { off }).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub raw_jaccard: f64,
    pub thresholded_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageFailure {
    pub id: String,
    pub reason: String,
}

/// Per-image and mean scores. Means cover `per_image` only; ids without
/// ground truth and failed images are listed separately.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreReport {
    pub per_image: Vec<ImageScore>,
    pub mean_raw: f64,
    pub mean_thresholded: f64,
    pub n_below_threshold: usize,
    pub threshold: f64,
    /// Pairs where both masks were empty (scored 1.0).
    pub both_empty: Vec<String>,
    pub missing: Vec<String>,
    pub failed: Vec<ImageFailure>,
}

/// One scored pair.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub id: String,
    pub predicted: BinaryMask,
    pub truth: BinaryMask,
}

/// Scores every pair and sorts rows by id.
pub fn aggregate(pairs: &[MaskPair], threshold: f64) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    let mut rows = BTreeMap::new();
    let mut both_empty = Vec::new();
    for pair in pairs {
        let (inter, union) = overlap_counts(&pair.predicted, &pair.truth).map_err(|e| {
            Error::Dataset(format!("{}: {e}", pair.id))
        })?;
        if union == 0 {
            both_empty.push(pair.id.clone());
        }
        let raw = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        rows.insert(pair.id.clone(), raw);
    }
    both_empty.sort();
    Ok(report_from_scores(rows, threshold, both_empty))
}

pub(crate) fn report_from_scores(rows: BTreeMap<String, f64>, threshold: f64, both_empty: Vec<String>) -> ScoreReport {
    let per_image: Vec<ImageScore> = rows
        .into_iter()
        .map(|(id, raw)| ImageScore {
            id,
            raw_jaccard: raw,
            thresholded_jaccard: apply_threshold(raw, threshold),
        })
        .collect();
    let n = per_image.len() as f64;
    let (mean_raw, mean_thresholded) = if per_image.is_empty() {
        (0.0, 0.0)
    } else {
        (
            per_image.iter().map(|s| s.raw_jaccard).sum::<f64>() / n,
            per_image.iter().map(|s| s.thresholded_jaccard).sum::<f64>() / n,
        )
    };
    ScoreReport {
        n_below_threshold: per_image.iter().filter(|s| s.raw_jaccard < threshold).count(),
        per_image,
        mean_raw,
        mean_thresholded,
        threshold,
        both_empty,
        missing: Vec::new(),
        failed: Vec::new(),
    }
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// CSV with columns `id,raw_jaccard,thresholded_jaccard`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.per_image {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

/// Train/validation partition at a 10:1 ratio.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub seed: u64,
    pub ratio: (u32, u32),
}

/// Validation size `round(n / 11)`, at least 1.
pub fn validation_size(n: usize) -> usize {
    ((n as f64 / 11.0).round() as usize).max(1)
}

/// Shuffles `ids` with a seeded stream; the first `round(n / 11)` go to validation.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<SplitAssignment> {
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 ids to split, got {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut SeededRng::new(seed));
    let train_ids = shuffled.split_off(validation_size(ids.len()));
    Ok(SplitAssignment {
        train_ids,
        val_ids: shuffled,
        seed,
        ratio: (10, 1),
    })
}
