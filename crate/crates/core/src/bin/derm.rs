//! `derm` command line: dataset split, preprocessing dumps, pipeline runs,
//! evaluation, augmentation previews and training crop export.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use dermseg::augment::{augment_pair, AugmentSpec, ExpansionRange, SeededRng};
use dermseg::backend::{BackendHandle, TensorFile};
use dermseg::colorspace::{assemble_channels, STACK_SCALING};
use dermseg::imagecore::{load_mask, load_rgb, save_image_png, save_mask_png, save_plane_png};
use dermseg::metrics::{aggregate, split_dataset, MaskPair, DEFAULT_JACCARD_THRESHOLD};
use dermseg::pipeline::{run_dataset, training_crop_sampler, BackendPair, DatasetLayout, ImageStatus, PipelineConfig};
use dermseg::synthetic::EllipseLesion;
use dermseg::Error;

#[derive(Debug, Parser)]
#[command(name = "derm", version, about = "Two-stage lesion segmentation harness")]
struct Cli {
    /// key=value file mirroring the long flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split an id list 10:1 into train.txt and val.txt.
    Split {
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the 8 segmenter input channels of an image as PNGs.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "dump-channels")]
        dump_channels: PathBuf,
    },
    /// Run detection and segmentation over a dataset directory.
    Run {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        detector: Option<String>,
        #[arg(long)]
        segmenter: Option<String>,
        #[arg(long)]
        no_tta: bool,
        #[arg(long)]
        no_fallback: bool,
        #[arg(long)]
        expansion: Option<f64>,
        #[arg(long)]
        threshold: Option<f32>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write augmented copies of an image/mask pair.
    AugmentPreview {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export randomly expanded training crops as DST1 stacks plus mask PNGs.
    SampleCrops {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        range: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        per_image: usize,
        #[arg(long)]
        input_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset of dark ellipses on skin-coloured canvases.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failure with the process exit code attached.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

/// Settings from `--config`.
#[derive(Default)]
struct ConfigFile(HashMap<String, String>);

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('[') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
            let value = value.trim().trim_matches('"');
            map.insert(key.trim().replace('-', "_"), value.to_string());
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        self.0
            .get(key)
            .map(|v| v.parse::<T>().map_err(|_| usage(format!("config: bad value {v:?} for {key}"))))
            .transpose()
    }

    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, Failure> {
        self.pick(flag, key)?
            .ok_or_else(|| usage(format!("--{} is required", key.replace('_', "-"))))
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), Failure> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| data_error(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| data_error(format!("{}: {e}", path.display())))
}

fn cmd_split(ids: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let text = fs::read_to_string(ids).map_err(|e| data_error(format!("{}: {e}", ids.display())))?;
    let ids: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let split = split_dataset(&ids, seed)?;
    create_dir(out)?;
    write_lines(&out.join("train.txt"), &split.train_ids)?;
    write_lines(&out.join("val.txt"), &split.val_ids)?;
    println!("train {} / val {}", split.train_ids.len(), split.val_ids.len());
    Ok(())
}

fn cmd_preprocess(input: &Path, dir: &Path) -> Result<(), Failure> {
    let img = load_rgb(input)?;
    let stack = assemble_channels(&img)?;
    create_dir(dir)?;
    for (c, scaling) in STACK_SCALING.iter().enumerate() {
        let path = dir.join(format!("{c:02}_{}.png", scaling.name));
        save_plane_png(stack.channel(c), stack.width(), stack.height(), &path)?;
    }
    println!("wrote 8 channels to {}", dir.display());
    Ok(())
}

fn make_factory(detector: String, segmenter: String) -> impl Fn() -> dermseg::Result<BackendPair> + Sync {
    move || {
        let mut det = BackendHandle::from_command(&detector).map_err(|e| Error::Backend {
            stage: "detection".into(),
            source: e,
        })?;
        let mut seg = BackendHandle::from_command(&segmenter).map_err(|e| Error::Backend {
            stage: "segmentation".into(),
            source: e,
        })?;
        det.health_check().map_err(|e| Error::Backend {
            stage: "detection".into(),
            source: e,
        })?;
        seg.health_check().map_err(|e| Error::Backend {
            stage: "segmentation".into(),
            source: e,
        })?;
        Ok((Box::new(det) as _, Box::new(seg) as _))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    cfg_file: &ConfigFile,
    dataset: Option<PathBuf>,
    detector: Option<String>,
    segmenter: Option<String>,
    no_tta: bool,
    no_fallback: bool,
    expansion: Option<f64>,
    threshold: Option<f32>,
    seed: Option<u64>,
    input_size: Option<usize>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Failure> {
    let defaults = PipelineConfig::default();
    let cfg = PipelineConfig {
        input_size: cfg_file.pick(input_size, "input_size")?.unwrap_or(defaults.input_size),
        inference_expansion: cfg_file.pick(expansion, "expansion")?.unwrap_or(defaults.inference_expansion),
        tta: if no_tta { false } else { cfg_file.get("tta")?.unwrap_or(defaults.tta) },
        binarize_threshold: cfg_file.pick(threshold, "threshold")?.unwrap_or(defaults.binarize_threshold),
        fallback_whole_image: if no_fallback {
            false
        } else {
            cfg_file.get("fallback")?.unwrap_or(defaults.fallback_whole_image)
        },
        seed: cfg_file.pick(seed, "seed")?.unwrap_or(defaults.seed),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dataset: PathBuf = cfg_file.require(dataset, "dataset")?;
    let out: PathBuf = cfg_file.require(out, "out")?;
    let detector: String = cfg_file.require(detector, "detector")?;
    let segmenter: String = cfg_file.require(segmenter, "segmenter")?;
    let workers = cfg_file
        .pick(workers, "workers")?
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));

    // Fail fast on a bad backend before touching the dataset.
    make_factory(detector.clone(), segmenter.clone())()?;
    let layout = DatasetLayout::isic(&dataset);
    let run = run_dataset(&layout, &make_factory(detector, segmenter), &cfg, workers, &out)?;

    let mut backend_failures = 0;
    for img in &run.images {
        if let ImageStatus::Failed(reason) = &img.status {
            eprintln!("{}: {reason}", img.id);
            backend_failures += reason.contains("backend") as usize;
        }
    }
    match &run.report {
        Some(report) => {
            report.write_json(out.join("report.json"))?;
            report.write_csv_file(out.join("report.csv"))?;
            println!(
                "{} scored, {} missing, {} failed: mean jaccard {:.4}, thresholded {:.4}",
                report.per_image.len(),
                report.missing.len(),
                report.failed.len(),
                report.mean_raw,
                report.mean_thresholded
            );
        }
        None => println!("wrote {} masks to {}", run.images.len(), out.display()),
    }
    if backend_failures == run.images.len() {
        return Err(Failure {
            code: 3,
            message: "every image failed in a backend".into(),
        });
    }
    Ok(())
}

fn cmd_eval(pred: &Path, truth: &Path, report_path: &Path) -> Result<(), Failure> {
    const SUFFIX: &str = "_segmentation.png";
    let listing = fs::read_dir(truth).map_err(|e| data_error(format!("{}: {e}", truth.display())))?;
    let mut names: Vec<String> = listing
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(SUFFIX))
        .collect();
    names.sort();
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for name in names {
        let id = name.trim_end_matches(SUFFIX).to_string();
        let pred_path = pred.join(&name);
        if !pred_path.exists() {
            missing.push(id);
            continue;
        }
        pairs.push(MaskPair {
            id,
            predicted: load_mask(&pred_path)?,
            truth: load_mask(truth.join(&name))?,
        });
    }
    let mut report = aggregate(&pairs, DEFAULT_JACCARD_THRESHOLD)?;
    report.missing = missing;
    report.write_json(report_path)?;
    report.write_csv_file(report_path.with_extension("csv"))?;
    println!(
        "{} pairs: mean jaccard {:.4}, thresholded {:.4}, {} below {}",
        report.per_image.len(),
        report.mean_raw,
        report.mean_thresholded,
        report.n_below_threshold,
        report.threshold
    );
    Ok(())
}

fn cmd_augment_preview(input: &Path, mask: &Path, seed: u64, count: usize, out: &Path) -> Result<(), Failure> {
    let img = load_rgb(input)?;
    let mask = load_mask(mask)?;
    create_dir(out)?;
    let spec = AugmentSpec::default();
    let root = SeededRng::new(seed);
    for i in 0..count {
        let (a, m) = augment_pair(&img, &mask, &spec, &mut root.split(i as u64))?;
        save_image_png(&a, out.join(format!("aug_{i:03}.png")))?;
        save_mask_png(&m, out.join(format!("aug_{i:03}_mask.png")))?;
    }
    println!("wrote {count} augmented pairs to {}", out.display());
    Ok(())
}

fn cmd_sample_crops(
    dataset: &Path,
    range: ExpansionRange,
    seed: u64,
    per_image: usize,
    input_size: usize,
    out: &Path,
) -> Result<(), Failure> {
    let layout = DatasetLayout::isic(dataset);
    if !layout.has_truth() {
        return Err(data_error(format!("{} has no masks directory", dataset.display())));
    }
    create_dir(out)?;
    let root = SeededRng::new(seed);
    let mut written = 0;
    for (index, entry) in layout.entries()?.iter().enumerate() {
        let truth = entry.truth.as_ref().expect("layout has truth");
        if !truth.exists() {
            eprintln!("{}: missing ground truth, skipped", entry.id);
            continue;
        }
        let img = load_rgb(&entry.image)?;
        let mask = load_mask(truth)?;
        let Some(gt_box) = mask.bounding_box() else {
            eprintln!("{}: empty ground truth, skipped", entry.id);
            continue;
        };
        let mut rng = root.split(index as u64);
        for k in 0..per_image {
            let sample = training_crop_sampler(&img, &mask, &gt_box, &range, &mut rng, input_size)?;
            let stem = format!("{}_{k:03}", entry.id);
            TensorFile::from_stack(&sample.stack)
                .write(out.join(format!("{stem}.dst")))
                .map_err(|e| data_error(e.to_string()))?;
            save_mask_png(&sample.mask, out.join(format!("{stem}_mask.png")))?;
            written += 1;
        }
    }
    println!("wrote {written} crops to {}", out.display());
    Ok(())
}

fn cmd_synth(out: &Path, count: usize, seed: u64) -> Result<(), Failure> {
    let images = out.join("images");
    let masks = out.join("masks");
    create_dir(&images)?;
    create_dir(&masks)?;
    let root = SeededRng::new(seed);
    for i in 0..count {
        let mut rng = root.split(i as u64);
        let lesion = EllipseLesion::random(&mut rng, (600, 1200), (48.0, 300.0), (0.4, 0.6));
        let (img, mask) = lesion.render(rand::RngCore::next_u64(&mut rng))?;
        let id = format!("ISIC_{i:07}");
        save_image_png(&img, images.join(format!("{id}.png")))?;
        save_mask_png(&mask, masks.join(format!("{id}_segmentation.png")))?;
    }
    println!("wrote {count} synthetic cases to {}", out.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let cfg = ConfigFile::load(cli.config.as_deref())?;
    match cli.command {
        Command::Split { ids, seed, out } => cmd_split(
            &ids,
            cfg.pick(seed, "seed")?.unwrap_or(0),
            &cfg.pick(out, "out")?.unwrap_or_else(|| PathBuf::from(".")),
        ),
        Command::Preprocess { input, dump_channels } => cmd_preprocess(&input, &dump_channels),
        Command::Run {
            dataset,
            detector,
            segmenter,
            no_tta,
            no_fallback,
            expansion,
            threshold,
            seed,
            input_size,
            workers,
            out,
        } => cmd_run(
            &cfg, dataset, detector, segmenter, no_tta, no_fallback, expansion, threshold, seed, input_size,
            workers, out,
        ),
        Command::Eval { pred, truth, report } => cmd_eval(&pred, &truth, &report),
        Command::AugmentPreview {
            input,
            mask,
            seed,
            count,
            out,
        } => cmd_augment_preview(&input, &mask, cfg.pick(seed, "seed")?.unwrap_or(0), count, &out),
        Command::SampleCrops {
            dataset,
            range,
            seed,
            per_image,
            input_size,
            out,
        } => {
            let range = match cfg.pick(range, "range")? {
                Some(r) => ExpansionRange::parse(&r).map_err(|e| usage(e.to_string()))?,
                None => ExpansionRange::default(),
            };
            cmd_sample_crops(
                &cfg.require(dataset, "dataset")?,
                range,
                cfg.pick(seed, "seed")?.unwrap_or(0),
                per_image,
                cfg.pick(input_size, "input_size")?.unwrap_or(512),
                &cfg.require::<PathBuf>(out, "out")?,
            )
        }
        Command::Synth { out, count, seed } => cmd_synth(&out, count, cfg.pick(seed, "seed")?.unwrap_or(0)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
