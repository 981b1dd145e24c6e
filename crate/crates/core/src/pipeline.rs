//! Detect, crop, normalize, segment with TTA, paste back, binarize.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::augment::{expand_bbox, ExpansionRange, SeededRng};
use crate::backend::{Detection, Detector, Segmenter};
use crate::colorspace::{assemble_channels, ChannelStack};
use crate::ensemble::tta_segment;
use crate::error::{Error, Result};
use crate::imagecore::{
    crop, crop_mask, load_mask, load_rgb, paste_back, resize_bilinear, resize_nearest, save_mask_png,
    BinaryMask, BoundingBox, RasterImage,
};
use crate::metrics::{self, ImageFailure, ScoreReport, DEFAULT_JACCARD_THRESHOLD};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineConfig {
    /// Side of the square segmenter input.
    pub input_size: usize,
    /// Linear scale applied to the detected box about its centre.
    pub inference_expansion: f64,
    pub tta: bool,
    pub binarize_threshold: f32,
    /// Segment the whole image when nothing is detected.
    pub fallback_whole_image: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_size: 512,
            inference_expansion: 1.0,
            tta: true,
            binarize_threshold: 0.5,
            fallback_whole_image: true,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "input_size {} must be at least 32",
                self.input_size
            )));
        }
        if !(self.inference_expansion > 0.0 && self.inference_expansion <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "inference_expansion {} must lie in (0, 2]",
                self.inference_expansion
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "binarize_threshold {} must lie in (0, 1)",
                self.binarize_threshold
            )));
        }
        Ok(())
    }
}

/// Result of [`run_image`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    /// Full-resolution mask.
    pub mask: BinaryMask,
    pub detection: Option<Detection>,
    /// Region that was segmented, `None` when nothing was.
    pub crop_box: Option<BoundingBox>,
    pub warning: Option<String>,
}

pub const NO_LESION_WARNING: &str = "no lesion found";

/// Runs the two-stage pipeline on one full-resolution image.
pub fn run_image(
    img: &RasterImage,
    detector: &mut dyn Detector,
    segmenter: &mut dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let img = img.to_srgb()?;
    let (w, h) = (img.width(), img.height());
    let detection = detector
        .detect(&img)
        .map_err(|e| Error::backend("detection", e))?
        .into_iter()
        .reduce(|best, d| if d.score > best.score { d } else { best });

    let (target, warning) = match detection {
        Some(d) => (d.bbox.scaled(cfg.inference_expansion, cfg.inference_expansion), None),
        None if cfg.fallback_whole_image => (
            BoundingBox::full(w, h),
            Some(format!("{NO_LESION_WARNING}; segmenting the whole image")),
        ),
        None => {
            return Ok(RunOutcome {
                mask: BinaryMask::empty(w, h)?,
                detection: None,
                crop_box: None,
                warning: Some(NO_LESION_WARNING.to_string()),
            })
        }
    };
    let Some(crop_box) = target.clamp(w, h) else {
        return Ok(RunOutcome {
            mask: BinaryMask::empty(w, h)?,
            detection,
            crop_box: None,
            warning: Some(format!("detection {:?} lies outside the image", target)),
        });
    };

    let patch = crop(&img, &crop_box)?;
    let normalized = resize_bilinear(&patch, cfg.input_size, cfg.input_size)?;
    let stack = assemble_channels(&normalized)?;
    let prob = tta_segment(&stack, segmenter, cfg.tta)?;
    let full = paste_back(&prob, &crop_box, w, h)?;
    Ok(RunOutcome {
        mask: full.threshold(cfg.binarize_threshold),
        detection,
        crop_box: Some(crop_box),
        warning,
    })
}

/// Where images, ground truth masks and file names live.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
    pub images_dir: String,
    pub masks_dir: String,
    /// Only image files whose stem starts with this prefix are used.
    pub image_prefix: String,
    pub mask_suffix: String,
    pub extensions: Vec<String>,
}

impl DatasetLayout {
    /// `images/ISIC_<id>.(png|jpg|jpeg)` with `masks/ISIC_<id>_segmentation.png`.
    pub fn isic(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            images_dir: "images".into(),
            masks_dir: "masks".into(),
            image_prefix: "ISIC_".into(),
            mask_suffix: "_segmentation.png".into(),
            extensions: vec!["png".into(), "jpg".into(), "jpeg".into()],
        }
    }

    pub fn images_path(&self) -> PathBuf {
        self.root.join(&self.images_dir)
    }

    pub fn masks_path(&self) -> PathBuf {
        self.root.join(&self.masks_dir)
    }

    pub fn has_truth(&self) -> bool {
        self.masks_path().is_dir()
    }

    pub fn mask_name(&self, id: &str) -> String {
        format!("{id}{}", self.mask_suffix)
    }

    /// Image entries sorted by id, where the id is the file stem (e.g. `ISIC_0000000`).
    pub fn entries(&self) -> Result<Vec<DatasetEntry>> {
        let dir = self.images_path();
        let listing = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = BTreeMap::new();
        for item in listing {
            let path = item.map_err(|e| Error::io(&dir, e))?.path();
            let (Some(stem), Some(ext)) = (
                path.file_stem().and_then(|s| s.to_str()),
                path.extension().and_then(|s| s.to_str()),
            ) else {
                continue;
            };
            if !stem.starts_with(&self.image_prefix)
                || !self.extensions.iter().any(|e| e.eq_ignore_ascii_case(ext))
            {
                continue;
            }
            let mask = self.has_truth().then(|| self.masks_path().join(self.mask_name(stem)));
            if entries.contains_key(stem) {
                return Err(Error::Dataset(format!("duplicate image id {stem}")));
            }
            entries.insert(
                stem.to_string(),
                DatasetEntry {
                    id: stem.to_string(),
                    image: path.clone(),
                    truth: mask,
                },
            );
        }
        if entries.is_empty() {
            return Err(Error::Dataset(format!("empty dataset: no images in {}", dir.display())));
        }
        Ok(entries.into_values().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    /// Expected ground-truth path when the dataset has a masks directory.
    pub truth: Option<PathBuf>,
}

/// Outcome of one image in a batch run.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageStatus {
    Scored { raw_jaccard: f64 },
    Predicted,
    MissingTruth,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub id: String,
    pub status: ImageStatus,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRun {
    /// Present when the dataset has ground truth.
    pub report: Option<ScoreReport>,
    pub images: Vec<ImageResult>,
}

pub type BackendPair = (Box<dyn Detector + Send>, Box<dyn Segmenter + Send>);

fn process_entry(
    entry: &DatasetEntry,
    backends: &mut Result<BackendPair>,
    cfg: &PipelineConfig,
    out_dir: &Path,
    mask_name: &str,
) -> (ImageResult, Option<(bool, f64)>) {
    let result = |status, warning| ImageResult {
        id: entry.id.clone(),
        status,
        warning,
    };
    let (detector, segmenter) = match backends {
        Ok((d, s)) => (d, s),
        Err(e) => return (result(ImageStatus::Failed(format!("backend init: {e}")), None), None),
    };
    let run = load_rgb(&entry.image)
        .and_then(|img| run_image(&img, detector.as_mut(), segmenter.as_mut(), cfg))
        .and_then(|outcome| {
            save_mask_png(&outcome.mask, out_dir.join(mask_name))?;
            Ok(outcome)
        });
    let outcome = match run {
        Ok(o) => o,
        Err(e) => return (result(ImageStatus::Failed(e.to_string()), None), None),
    };
    if let Some(w) = &outcome.warning {
        warn!("{}: {w}", entry.id);
    }
    let Some(truth_path) = &entry.truth else {
        return (result(ImageStatus::Predicted, outcome.warning), None);
    };
    if !truth_path.exists() {
        return (result(ImageStatus::MissingTruth, outcome.warning), None);
    }
    let scored = load_mask(truth_path).and_then(|truth| {
        let (inter, union) = metrics::overlap_counts(&outcome.mask, &truth)?;
        Ok((union == 0, if union == 0 { 1.0 } else { inter as f64 / union as f64 }))
    });
    match scored {
        Ok((both_empty, raw)) => (
            result(ImageStatus::Scored { raw_jaccard: raw }, outcome.warning),
            Some((both_empty, raw)),
        ),
        Err(e) => (
            result(ImageStatus::Failed(format!("ground truth: {e}")), outcome.warning),
            None,
        ),
    }
}

/// Runs every image of `layout` on a pool of `workers` threads, each owning
/// the backends built by `make_backends`. Masks go to
/// `<out_dir>/<id>_segmentation.png`; a failing image is recorded and the
/// batch continues.
pub fn run_dataset(
    layout: &DatasetLayout,
    make_backends: &(dyn Fn() -> Result<BackendPair> + Sync),
    cfg: &PipelineConfig,
    workers: usize,
    out_dir: &Path,
) -> Result<DatasetRun> {
    cfg.validate()?;
    let entries = layout.entries()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    let results: Vec<(ImageResult, Option<(bool, f64)>)> = pool.install(|| {
        entries
            .par_iter()
            .map_init(make_backends, |backends, entry| {
                process_entry(entry, backends, cfg, out_dir, &layout.mask_name(&entry.id))
            })
            .collect()
    });

    let report = layout.has_truth().then(|| {
        let mut rows = BTreeMap::new();
        let mut both_empty = Vec::new();
        let mut missing = Vec::new();
        let mut failed = Vec::new();
        for (res, score) in &results {
            match (&res.status, score) {
                (ImageStatus::Scored { .. }, Some((empty, raw))) => {
                    rows.insert(res.id.clone(), *raw);
                    if *empty {
                        both_empty.push(res.id.clone());
                    }
                }
                (ImageStatus::MissingTruth, _) => missing.push(res.id.clone()),
                (ImageStatus::Failed(reason), _) => failed.push(ImageFailure {
                    id: res.id.clone(),
                    reason: reason.clone(),
                }),
                _ => {}
            }
        }
        let mut report = metrics::report_from_scores(rows, DEFAULT_JACCARD_THRESHOLD, both_empty);
        report.missing = missing;
        report.failed = failed;
        report
    });
    Ok(DatasetRun {
        report,
        images: results.into_iter().map(|(r, _)| r).collect(),
    })
}

/// One segmenter training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub stack: ChannelStack,
    pub mask: BinaryMask,
    pub crop_box: BoundingBox,
}

/// Expands `gt_box` by a random factor per axis, crops image and mask, and
/// resizes them to `input_size` (bilinear / nearest).
pub fn training_crop_sampler(
    img: &RasterImage,
    mask: &BinaryMask,
    gt_box: &BoundingBox,
    range: &ExpansionRange,
    rng: &mut SeededRng,
    input_size: usize,
) -> Result<TrainingSample> {
    if (img.width(), img.height()) != mask.dims() {
        return Err(Error::DimensionMismatch {
            expected: (img.width(), img.height()),
            actual: mask.dims(),
        });
    }
    if gt_box.x0 >= gt_box.x1 || gt_box.y0 >= gt_box.y1 || gt_box.clamp(img.width(), img.height()).is_none() {
        return Err(Error::EmptyBox((gt_box.x0, gt_box.y0, gt_box.x1, gt_box.y1)));
    }
    let crop_box = expand_bbox(gt_box, range, rng, img.width(), img.height());
    let patch = resize_bilinear(&crop(&img.to_srgb()?, &crop_box)?, input_size, input_size)?;
    let patch_mask = resize_nearest(&crop_mask(mask, &crop_box)?, input_size, input_size)?;
    Ok(TrainingSample {
        stack: assemble_channels(&patch)?,
        mask: patch_mask,
        crop_box,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendError, BaselineDetector, BaselineSegmenter};
    use crate::imagecore::{ColorSpace, ProbabilityMap};
    use crate::metrics::thresholded_jaccard;
    use crate::synthetic::EllipseLesion;

    fn lesion() -> EllipseLesion {
        EllipseLesion {
            width: 320,
            height: 240,
            cx: 170.0,
            cy: 110.0,
            major: 140.0,
            minor: 90.0,
            angle_deg: 25.0,
            contrast: 0.45,
            texture: 0.04,
        }
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        for bad in [
            PipelineConfig { input_size: 16, ..Default::default() },
            PipelineConfig { inference_expansion: 0.0, ..Default::default() },
            PipelineConfig { inference_expansion: 2.5, ..Default::default() },
            PipelineConfig { binarize_threshold: 1.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn synthetic_lesion_is_recovered() {
        let (img, truth) = lesion().render(1).unwrap();
        let cfg = PipelineConfig { input_size: 128, ..Default::default() };
        let out = run_image(&img, &mut BaselineDetector::default(), &mut BaselineSegmenter::default(), &cfg).unwrap();
        assert_eq!(out.mask.dims(), truth.dims());
        assert!(out.warning.is_none());
        let j = thresholded_jaccard(&out.mask, &truth, 0.65).unwrap();
        assert!(j >= 0.65, "jaccard {j}");
        let b = out.crop_box.unwrap();
        for y in 0..truth.height() {
            for x in 0..truth.width() {
                if out.mask.get(x, y) {
                    assert!(b.contains(x as i64, y as i64));
                }
            }
        }
    }

    #[test]
    fn constant_image_paths() {
        let img = RasterImage::filled(64, 48, 3, ColorSpace::Srgb, 0.6).unwrap();
        let cfg = PipelineConfig { input_size: 32, ..Default::default() };
        let out = run_image(&img, &mut BaselineDetector::default(), &mut BaselineSegmenter::default(), &cfg).unwrap();
        assert_eq!(out.crop_box, Some(BoundingBox::full(64, 48)));
        assert_eq!(out.mask.count_true(), 0);
        assert!(out.warning.unwrap().contains(NO_LESION_WARNING));

        let strict = PipelineConfig { fallback_whole_image: false, ..cfg };
        let out = run_image(&img, &mut BaselineDetector::default(), &mut BaselineSegmenter::default(), &strict).unwrap();
        assert_eq!(out.crop_box, None);
        assert_eq!(out.warning.as_deref(), Some(NO_LESION_WARNING));
        assert_eq!(out.mask.dims(), (64, 48));
    }

    struct Broken;

    impl Detector for Broken {
        fn detect(&mut self, _: &RasterImage) -> std::result::Result<Vec<Detection>, BackendError> {
            Err(BackendError::Timeout(std::time::Duration::from_secs(1)))
        }
    }

    impl Segmenter for Broken {
        fn segment(&mut self, _: &ChannelStack) -> std::result::Result<ProbabilityMap, BackendError> {
            Err(BackendError::Timeout(std::time::Duration::from_secs(1)))
        }
    }

    #[test]
    fn backend_failures_carry_stage() {
        let (img, _) = lesion().render(1).unwrap();
        let cfg = PipelineConfig { input_size: 32, ..Default::default() };
        let err = run_image(&img, &mut Broken, &mut BaselineSegmenter::default(), &cfg).unwrap_err();
        assert!(matches!(&err, Error::Backend { stage, .. } if stage == "detection"));
        assert_eq!(err.exit_code(), 3);
        let err = run_image(&img, &mut BaselineDetector::default(), &mut Broken, &cfg).unwrap_err();
        assert!(matches!(&err, Error::Backend { stage, .. } if stage == "segmentation"));
    }

    #[test]
    fn training_sampler_shapes() {
        let (img, mask) = lesion().render(2).unwrap();
        let gt = mask.bounding_box().unwrap();
        let unit = ExpansionRange::new(1.0, 1.0).unwrap();
        let s = training_crop_sampler(&img, &mask, &gt, &unit, &mut SeededRng::new(0), 64).unwrap();
        assert_eq!(s.crop_box, gt);
        assert_eq!((s.stack.width(), s.stack.height(), s.stack.channels()), (64, 64, 8));
        assert_eq!(s.mask.dims(), (64, 64));
        let bad = BoundingBox { x0: 5, y0: 5, x1: 5, y1: 9 };
        assert!(training_crop_sampler(&img, &mask, &bad, &unit, &mut SeededRng::new(0), 64).is_err());
    }
}
