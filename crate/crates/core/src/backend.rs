//! Inference backend contract.
//!
//! Detectors and segmenters are either reference baselines running in
//! process or external executables that exchange tensors through a work
//! directory:
//!
//! ```text
//! <workdir>/input.dst      DST1 tensor, channel-first (C x H x W)
//! <workdir>/request.json   {"task": "detect" | "segment", "input": "input.dst", "dims": [...]}
//! <workdir>/output.dst     segment only: probability map, dims [H, W] or [1, H, W]
//! <workdir>/response.json  detect: {"detections": [{"x0","y0","x1","y1","score"}, ...]}
//!                          segment: {"output": "output.dst"}
//! ```
//!
//! The child is started as `<executable> [args...] <workdir>` and must exit 0.
//! `DERM_BACKEND_TIMEOUT_SECS` overrides the default 60 second timeout.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colorspace::{ChannelStack, L_CHANNEL, STACK_CHANNELS};
use crate::imagecore::{BinaryMask, BoundingBox, ColorSpace, ProbabilityMap, RasterImage};

pub const TIMEOUT_ENV: &str = "DERM_BACKEND_TIMEOUT_SECS";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

pub const INPUT_FILE: &str = "input.dst";
pub const OUTPUT_FILE: &str = "output.dst";
pub const REQUEST_FILE: &str = "request.json";
pub const RESPONSE_FILE: &str = "response.json";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("failed to start {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },

    #[error("backend exited with code {code:?}: {stderr}")]
    Exit { code: Option<i32>, stderr: String },

    #[error("backend timed out after {0:?}")]
    Timeout(Duration),

    #[error("response schema violation: {0}")]
    Schema(String),

    #[error("malformed tensor: {0}")]
    Tensor(String),

    #[error("invalid backend output: {0}")]
    InvalidOutput(String),

    #[error("backend unhealthy: {0}")]
    Unhealthy(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("TTA variant {index} failed: {source}")]
    Variant {
        index: usize,
        #[source]
        source: Box<BackendError>,
    },
}

impl BackendError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BackendError::Io {
            path: path.into(),
            source,
        }
    }
}

type BackendResult<T> = std::result::Result<T, BackendError>;

/// Little-endian float tensor file: `"DST1"`, `ndim: u32`, `dims: [u32; ndim]`,
/// then `product(dims)` IEEE-754 `f32` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dims: Vec<u32>,
    data: Vec<f32>,
}

impl TensorFile {
    pub const MAGIC: [u8; 4] = *b"DST1";

    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> BackendResult<Self> {
        let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        if expected != Some(data.len()) {
            return Err(BackendError::Tensor(format!(
                "dims {dims:?} do not match {} values",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[u32] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn encoded_len(&self) -> usize {
        8 + 4 * self.dims.len() + 4 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&Self::MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> BackendResult<Self> {
        let word = |at: usize| -> BackendResult<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| BackendError::Tensor(format!("truncated at byte {at}")))
        };
        if bytes.len() < 8 || bytes[..4] != Self::MAGIC {
            return Err(BackendError::Tensor("missing DST1 magic".into()));
        }
        let ndim = word(4)? as usize;
        let header = ndim
            .checked_mul(4)
            .and_then(|n| n.checked_add(8))
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| BackendError::Tensor(format!("header for {ndim} dims is truncated")))?;
        let dims = (0..ndim).map(|i| word(8 + 4 * i)).collect::<BackendResult<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| BackendError::Tensor("dims overflow".into()))?;
        let payload = &bytes[header..];
        if Some(payload.len()) != count.checked_mul(4) {
            return Err(BackendError::Tensor(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                payload.len(),
                count.saturating_mul(4)
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> BackendResult<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| BackendError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> BackendResult<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| BackendError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `[8, H, W]` tensor of a channel stack.
    pub fn from_stack(stack: &ChannelStack) -> Self {
        Self {
            dims: vec![STACK_CHANNELS as u32, stack.height() as u32, stack.width() as u32],
            data: stack.planes().to_vec(),
        }
    }

    /// `[C, H, W]` tensor of an interleaved raster.
    pub fn from_image(img: &RasterImage) -> Self {
        let data = (0..img.channels()).flat_map(|c| img.plane(c)).collect();
        Self {
            dims: vec![img.channels() as u32, img.height() as u32, img.width() as u32],
            data,
        }
    }

    pub fn from_probability(map: &ProbabilityMap) -> Self {
        Self {
            dims: vec![map.height() as u32, map.width() as u32],
            data: map.values().to_vec(),
        }
    }

    pub fn to_stack(&self) -> BackendResult<ChannelStack> {
        match self.dims[..] {
            [c, h, w] if c as usize == STACK_CHANNELS => {
                ChannelStack::from_planes(w as usize, h as usize, self.data.clone())
                    .map_err(|e| BackendError::Tensor(e.to_string()))
            }
            _ => Err(BackendError::Tensor(format!("expected [8, H, W], got {:?}", self.dims))),
        }
    }

    pub fn to_image(&self) -> BackendResult<RasterImage> {
        let [c, h, w] = self.dims[..] else {
            return Err(BackendError::Tensor(format!("expected [C, H, W], got {:?}", self.dims)));
        };
        let (c, h, w) = (c as usize, h as usize, w as usize);
        let n = h * w;
        let mut data = vec![0.0f32; c * n];
        for ch in 0..c {
            for i in 0..n {
                data[i * c + ch] = self.data[ch * n + i];
            }
        }
        let space = match c {
            1 => ColorSpace::Gray,
            3 => ColorSpace::Srgb,
            _ => ColorSpace::MultiChannel,
        };
        RasterImage::new(w, h, c, data, space).map_err(|e| BackendError::Tensor(e.to_string()))
    }

    /// Accepts `[H, W]` or `[1, H, W]`.
    pub fn to_probability(&self) -> BackendResult<ProbabilityMap> {
        let (h, w) = match self.dims[..] {
            [h, w] | [1, h, w] => (h as usize, w as usize),
            _ => {
                return Err(BackendError::InvalidOutput(format!(
                    "expected [H, W] or [1, H, W], got {:?}",
                    self.dims
                )))
            }
        };
        ProbabilityMap::new(w, h, self.data.clone()).map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }
}

/// A detected lesion box with confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64) -> BackendResult<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(BackendError::Schema(format!("score {score} outside [0, 1]")));
        }
        if bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 {
            return Err(BackendError::Schema(format!("degenerate box {bbox:?}")));
        }
        Ok(Self { bbox, score })
    }
}

/// Returns detections sorted by descending score.
pub trait Detector {
    fn detect(&mut self, img: &RasterImage) -> BackendResult<Vec<Detection>>;
}

/// Returns a probability map with the stack's width and height.
pub trait Segmenter {
    fn segment(&mut self, stack: &ChannelStack) -> BackendResult<ProbabilityMap>;
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]` of `values`.
///
/// When several adjacent splits share the maximal between-class variance the
/// middle of that run is returned. `None` for constant (or empty) input.
pub fn otsu_threshold(values: &[f32]) -> Option<f64> {
    const BINS: usize = 256;
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() || lo >= hi {
        return None;
    }
    let (lo, span) = (lo as f64, (hi - lo) as f64);
    let mut hist = [0u64; BINS];
    for &v in values {
        let bin = (((v as f64 - lo) / span) * BINS as f64) as usize;
        hist[bin.min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_total: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();

    let mut variances = [f64::NEG_INFINITY; BINS - 1];
    let (mut w_b, mut sum_b) = (0.0f64, 0.0f64);
    for t in 0..BINS - 1 {
        w_b += hist[t] as f64;
        sum_b += t as f64 * hist[t] as f64;
        let w_f = total - w_b;
        if w_b == 0.0 || w_f == 0.0 {
            continue;
        }
        let diff = sum_b / w_b - (sum_total - sum_b) / w_f;
        variances[t] = w_b * w_f * diff * diff;
    }
    let best = variances.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = variances.iter().position(|&v| v == best)?;
    let last = first + variances[first..].iter().take_while(|&&v| v == best).count() - 1;
    let edge = (first + last + 2) as f64 / 2.0;
    Some(lo + span * edge / BINS as f64)
}

/// A connected foreground region (8-connectivity).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Component {
    pub area: usize,
    pub bbox: BoundingBox,
}

/// Connected components of `mask` in raster-scan order of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] || !mask.bits()[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let q = ny * w + nx;
                    if !seen[q] && mask.bits()[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        out.push(Component {
            area,
            bbox: BoundingBox {
                x0: x0 as i64,
                y0: y0 as i64,
                x1: x1 as i64,
                y1: y1 as i64,
            },
        });
    }
    out
}

/// Otsu on darkness (`1 - V`), components below `min_component_fraction` of the
/// image area dropped, one detection per remaining component scored by its
/// area fraction. Scores are area fractions, not calibrated confidences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineDetector {
    pub min_component_fraction: f64,
}

impl Default for BaselineDetector {
    fn default() -> Self {
        Self {
            min_component_fraction: 0.001,
        }
    }
}

impl BaselineDetector {
    pub fn run(&self, img: &RasterImage) -> Vec<Detection> {
        let (w, h) = (img.width(), img.height());
        let darkness: Vec<f32> = img
            .data()
            .chunks_exact(img.channels())
            .map(|px| 1.0 - px.iter().cloned().fold(0.0f32, f32::max))
            .collect();
        let Some(t) = otsu_threshold(&darkness) else {
            return Vec::new();
        };
        let fg = darkness.iter().map(|&d| d as f64 > t).collect();
        let fg = BinaryMask::new(w, h, fg).expect("dimensions come from a valid image");
        let total = (w * h) as f64;
        let min_area = (self.min_component_fraction * total).ceil() as usize;
        let mut found: Vec<Detection> = connected_components(&fg)
            .into_iter()
            .filter(|c| c.area >= min_area.max(1))
            .map(|c| Detection {
                bbox: c.bbox,
                score: c.area as f64 / total,
            })
            .collect();
        found.sort_by(|a, b| b.score.total_cmp(&a.score));
        found
    }
}

impl Detector for BaselineDetector {
    fn detect(&mut self, img: &RasterImage) -> BackendResult<Vec<Detection>> {
        Ok(self.run(img))
    }
}

/// Otsu on the stack's lightness plane; probability is the logistic of the
/// signed distance below the threshold in units of the plane's standard
/// deviation, times `gain`. Constant planes yield an all-zero map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSegmenter {
    pub gain: f64,
}

impl Default for BaselineSegmenter {
    fn default() -> Self {
        Self { gain: 4.0 }
    }
}

impl BaselineSegmenter {
    /// Logistic argument limit; keeps outputs strictly inside (0, 1) in `f32`.
    const MAX_LOGIT: f64 = 15.0;

    pub fn run(&self, stack: &ChannelStack) -> ProbabilityMap {
        let (w, h) = (stack.width(), stack.height());
        let plane = stack.channel(L_CHANNEL);
        let n = plane.len() as f64;
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let values = match otsu_threshold(plane) {
            Some(t) if std > 0.0 => plane
                .iter()
                .map(|&l| {
                    let z = (self.gain * (t - l as f64) / std).clamp(-Self::MAX_LOGIT, Self::MAX_LOGIT);
                    (1.0 / (1.0 + (-z).exp())) as f32
                })
                .collect(),
            _ => vec![0.0; w * h],
        };
        ProbabilityMap::new(w, h, values).expect("logistic output lies in [0, 1]")
    }
}

impl Segmenter for BaselineSegmenter {
    fn segment(&mut self, stack: &ChannelStack) -> BackendResult<ProbabilityMap> {
        Ok(self.run(stack))
    }
}

/// Reads the timeout override from the environment.
pub fn default_timeout() -> Duration {
    std::env::var(TIMEOUT_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s > 0.0)
        .map(Duration::from_secs_f64)
        .unwrap_or(DEFAULT_TIMEOUT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Detect,
    Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub task: Task,
    pub input: String,
    pub dims: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

/// External executable speaking the work-directory protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SubprocessCommand {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl SubprocessCommand {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

/// Raw result of one protocol exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    pub output: Option<TensorFile>,
    pub response: serde_json::Value,
}

fn tail(path: &Path) -> String {
    let mut s = String::new();
    if let Ok(mut f) = fs::File::open(path) {
        let _ = f.read_to_string(&mut s);
    }
    let s = s.trim();
    let start = s.char_indices().rev().nth(2000).map_or(0, |(i, _)| i);
    s[start..].to_string()
}

/// Writes the request into a fresh temp dir, runs the child and reads its
/// response. The tensor output is optional at this level.
pub fn subprocess_roundtrip(
    cmd: &SubprocessCommand,
    timeout: Duration,
    task: Task,
    input: &TensorFile,
) -> BackendResult<Exchange> {
    let dir = tempfile::Builder::new()
        .prefix("derm-backend-")
        .tempdir()
        .map_err(|e| BackendError::io(std::env::temp_dir(), e))?;
    let work = dir.path();
    input.write(work.join(INPUT_FILE))?;
    let request = Request {
        task,
        input: INPUT_FILE.into(),
        dims: input.dims().to_vec(),
    };
    let request_path = work.join(REQUEST_FILE);
    fs::write(&request_path, serde_json::to_vec_pretty(&request).expect("request serializes"))
        .map_err(|e| BackendError::io(&request_path, e))?;

    let stdout_path = work.join("stdout.log");
    let stderr_path = work.join("stderr.log");
    let stdout = fs::File::create(&stdout_path).map_err(|e| BackendError::io(&stdout_path, e))?;
    let stderr = fs::File::create(&stderr_path).map_err(|e| BackendError::io(&stderr_path, e))?;
    let mut child = Command::new(&cmd.program)
        .args(&cmd.args)
        .arg(work)
        .stdin(Stdio::null())
        .stdout(stdout)
        .stderr(stderr)
        .spawn()
        .map_err(|source| BackendError::Spawn {
            program: cmd.program.display().to_string(),
            source,
        })?;

    let started = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if started.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(BackendError::Timeout(timeout));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(2)),
            Err(e) => return Err(BackendError::io(&cmd.program, e)),
        }
    };
    if !status.success() {
        return Err(BackendError::Exit {
            code: status.code(),
            stderr: tail(&stderr_path),
        });
    }

    let response_path = work.join(RESPONSE_FILE);
    let raw = fs::read(&response_path)
        .map_err(|_| BackendError::Schema(format!("missing {RESPONSE_FILE}")))?;
    let response: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| BackendError::Schema(format!("{RESPONSE_FILE} is not valid JSON: {e}")))?;
    if !response.is_object() {
        return Err(BackendError::Schema(format!("{RESPONSE_FILE} must be a JSON object")));
    }
    let output_name = response
        .get("output")
        .and_then(|v| v.as_str())
        .unwrap_or(OUTPUT_FILE);
    if output_name.contains(['/', '\\']) {
        return Err(BackendError::Schema(format!("output name {output_name:?} must be a bare file name")));
    }
    let output_path = work.join(output_name);
    let output = if output_path.exists() {
        Some(TensorFile::read(&output_path)?)
    } else {
        None
    };
    Ok(Exchange { output, response })
}

fn parse_detections(response: &serde_json::Value) -> BackendResult<Vec<Detection>> {
    let list = response
        .get("detections")
        .ok_or_else(|| BackendError::Schema("missing \"detections\"".into()))?;
    let records: Vec<Detection> = serde_json::from_value(list.clone())
        .map_err(|e| BackendError::Schema(format!("bad detections: {e}")))?;
    let mut dets = records
        .into_iter()
        .map(|d| Detection::new(d.bbox, d.score))
        .collect::<BackendResult<Vec<_>>>()?;
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(dets)
}

/// Which implementation a [`BackendHandle`] drives.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Baseline {
        detector: BaselineDetector,
        segmenter: BaselineSegmenter,
    },
    Subprocess(SubprocessCommand),
}

/// Handle to one detector/segmenter. A handle serializes its own requests;
/// use one handle per worker for parallelism.
#[derive(Debug, Clone)]
pub struct BackendHandle {
    kind: BackendKind,
    timeout: Duration,
    healthy: bool,
}

impl BackendHandle {
    pub fn baseline() -> Self {
        Self {
            kind: BackendKind::Baseline {
                detector: BaselineDetector::default(),
                segmenter: BaselineSegmenter::default(),
            },
            timeout: default_timeout(),
            healthy: false,
        }
    }

    pub fn subprocess(cmd: SubprocessCommand) -> Self {
        Self {
            kind: BackendKind::Subprocess(cmd),
            timeout: default_timeout(),
            healthy: false,
        }
    }

    /// `"baseline"` selects the in-process baseline; anything else is split on
    /// whitespace into an executable and its leading arguments.
    pub fn from_command(command: &str) -> BackendResult<Self> {
        let mut parts = command.split_whitespace();
        let program = parts
            .next()
            .ok_or_else(|| BackendError::Unhealthy("empty backend command".into()))?;
        if program == "baseline" && parts.clone().next().is_none() {
            return Ok(Self::baseline());
        }
        Ok(Self::subprocess(SubprocessCommand::new(
            program,
            parts.map(str::to_string).collect(),
        )))
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn kind(&self) -> &BackendKind {
        &self.kind
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Baselines are always healthy; subprocess handles need an existing
    /// executable (bare names are looked up on `PATH`).
    pub fn health_check(&mut self) -> BackendResult<()> {
        if let BackendKind::Subprocess(cmd) = &self.kind {
            let program = &cmd.program;
            let found = if program.components().count() > 1 {
                program.is_file()
            } else {
                std::env::var_os("PATH").is_some_and(|paths| {
                    std::env::split_paths(&paths).any(|dir| dir.join(program).is_file())
                })
            };
            if !found {
                return Err(BackendError::Unhealthy(format!(
                    "executable {} not found",
                    program.display()
                )));
            }
        }
        self.healthy = true;
        Ok(())
    }

    fn ensure_healthy(&mut self) -> BackendResult<()> {
        if self.healthy {
            Ok(())
        } else {
            self.health_check()
        }
    }
}

impl Detector for BackendHandle {
    fn detect(&mut self, img: &RasterImage) -> BackendResult<Vec<Detection>> {
        self.ensure_healthy()?;
        match &mut self.kind {
            BackendKind::Baseline { detector, .. } => detector.detect(img),
            BackendKind::Subprocess(cmd) => {
                let ex = subprocess_roundtrip(cmd, self.timeout, Task::Detect, &TensorFile::from_image(img))?;
                parse_detections(&ex.response)
            }
        }
    }
}

impl Segmenter for BackendHandle {
    fn segment(&mut self, stack: &ChannelStack) -> BackendResult<ProbabilityMap> {
        self.ensure_healthy()?;
        let map = match &mut self.kind {
            BackendKind::Baseline { segmenter, .. } => segmenter.segment(stack)?,
            BackendKind::Subprocess(cmd) => {
                let ex = subprocess_roundtrip(cmd, self.timeout, Task::Segment, &TensorFile::from_stack(stack))?;
                ex.output
                    .ok_or_else(|| BackendError::Schema(format!("segment response without {OUTPUT_FILE}")))?
                    .to_probability()?
            }
        };
        if map.dims() != (stack.width(), stack.height()) {
            return Err(BackendError::InvalidOutput(format!(
                "segmenter returned {:?} for a {}x{} stack",
                map.dims(),
                stack.width(),
                stack.height()
            )));
        }
        Ok(map)
    }
}

/// Server side of the protocol: answers the request in `workdir` using the
/// given in-process implementations.
pub fn serve_request(
    workdir: &Path,
    detector: &mut dyn Detector,
    segmenter: &mut dyn Segmenter,
) -> BackendResult<()> {
    let request_path = workdir.join(REQUEST_FILE);
    let raw = fs::read(&request_path).map_err(|e| BackendError::io(&request_path, e))?;
    let request: Request = serde_json::from_slice(&raw)
        .map_err(|e| BackendError::Schema(format!("bad {REQUEST_FILE}: {e}")))?;
    if request.input.contains(['/', '\\']) {
        return Err(BackendError::Schema("input must be a bare file name".into()));
    }
    let input = TensorFile::read(workdir.join(&request.input))?;
    let response = match request.task {
        Task::Detect => Response {
            detections: Some(detector.detect(&input.to_image()?)?),
            output: None,
        },
        Task::Segment => {
            let map = segmenter.segment(&input.to_stack()?)?;
            TensorFile::from_probability(&map).write(workdir.join(OUTPUT_FILE))?;
            Response {
                detections: None,
                output: Some(OUTPUT_FILE.into()),
            }
        }
    };
    let response_path = workdir.join(RESPONSE_FILE);
    fs::write(&response_path, serde_json::to_vec_pretty(&response).expect("response serializes"))
        .map_err(|e| BackendError::io(&response_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_image(size: usize, discs: &[(f64, f64, f64)]) -> RasterImage {
        RasterImage::from_fn(size, size, 3, ColorSpace::Srgb, |x, y, _| {
            let inside = discs.iter().any(|&(cx, cy, r)| {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            });
            if inside { 0.2 } else { 0.85 }
        })
        .unwrap()
    }

    #[test]
    fn tensor_header_arithmetic() {
        let t = TensorFile::new(vec![8, 512, 512], vec![0.0; 8 * 512 * 512]).unwrap();
        assert_eq!(t.to_bytes().len(), 8_388_628);
        assert_eq!(t.encoded_len(), 8_388_628);
        assert!(TensorFile::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn tensor_rejects_garbage() {
        assert!(TensorFile::from_bytes(b"NOPE\0\0\0\0").is_err());
        let mut bytes = TensorFile::new(vec![2], vec![1.0, 2.0]).unwrap().to_bytes();
        bytes.pop();
        assert!(TensorFile::from_bytes(&bytes).is_err());
        let mut huge = b"DST1".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(TensorFile::from_bytes(&huge).is_err());
    }

    #[test]
    fn tensor_image_layout_is_channel_first() {
        let img = RasterImage::from_fn(3, 2, 3, ColorSpace::Srgb, |x, y, c| (x + 3 * y + 6 * c) as f32 / 20.0).unwrap();
        let t = TensorFile::from_image(&img);
        assert_eq!(t.dims(), &[3, 2, 3]);
        assert_eq!(t.data()[..6], img.plane(0)[..]);
        assert_eq!(t.to_image().unwrap(), img);
    }

    #[test]
    fn otsu_two_levels() {
        let values: Vec<f32> = (0..100).map(|i| if i % 3 == 0 { 0.2 } else { 0.8 }).collect();
        let t = otsu_threshold(&values).unwrap();
        assert!(t > 0.2 && t < 0.8, "{t}");
        assert_eq!(otsu_threshold(&[0.4; 10]), None);
        assert_eq!(otsu_threshold(&[]), None);
    }

    #[test]
    fn components_are_eight_connected() {
        let mask = BinaryMask::from_fn(5, 5, |x, y| x == y || (x == 4 && y == 0)).unwrap();
        let comps = connected_components(&mask);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].area, 5);
        assert_eq!(comps[0].bbox, BoundingBox::new(0, 0, 5, 5).unwrap());
        assert_eq!(comps[1].area, 1);
    }

    #[test]
    fn detector_centred_disk() {
        let img = disk_image(512, &[(256.0, 256.0, 100.0)]);
        let dets = BaselineDetector::default().run(&img);
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        assert!(b.x0 <= 156 && b.y0 <= 156 && b.x1 >= 356 && b.y1 >= 356, "{b:?}");
        assert!(b.area() <= 2 * 200 * 200);
        assert!(dets[0].score > 0.0 && dets[0].score <= 1.0);
    }

    #[test]
    fn detector_picks_largest_and_handles_blank() {
        let r_big = (5000.0f64 / std::f64::consts::PI).sqrt();
        let r_small = (500.0f64 / std::f64::consts::PI).sqrt();
        let img = disk_image(400, &[(300.0, 120.0, r_big), (80.0, 300.0, r_small)]);
        let dets = BaselineDetector::default().run(&img);
        assert_eq!(dets.len(), 2);
        assert!(dets[0].bbox.contains(300, 120));
        assert!(dets[0].score > dets[1].score);

        let blank = RasterImage::filled(64, 64, 3, ColorSpace::Srgb, 0.7).unwrap();
        assert!(BaselineDetector::default().run(&blank).is_empty());
    }

    #[test]
    fn segmenter_degenerate_and_open_interval() {
        let flat = ChannelStack::from_planes(4, 4, vec![0.3; 8 * 16]).unwrap();
        assert!(BaselineSegmenter::default().run(&flat).values().iter().all(|&v| v == 0.0));

        let planes: Vec<f32> = (0..8 * 16).map(|i| if (i % 16) < 5 { 0.0 } else { 1.0 }).collect();
        let stack = ChannelStack::from_planes(4, 4, planes).unwrap();
        let map = BaselineSegmenter::default().run(&stack);
        assert!(map.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(map.values()[0] > 0.5 && map.values()[15] < 0.5);
    }

    #[test]
    fn command_parsing() {
        assert!(matches!(BackendHandle::from_command("baseline").unwrap().kind(), BackendKind::Baseline { .. }));
        match BackendHandle::from_command("/bin/model --fast").unwrap().kind() {
            BackendKind::Subprocess(cmd) => {
                assert_eq!(cmd.program, PathBuf::from("/bin/model"));
                assert_eq!(cmd.args, vec!["--fast".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(BackendHandle::from_command("  ").is_err());
        let mut missing = BackendHandle::from_command("/definitely/not/here").unwrap();
        assert!(matches!(missing.health_check(), Err(BackendError::Unhealthy(_))));
    }

    #[test]
    fn detections_json_shape() {
        let d = Detection::new(BoundingBox::new(1, 2, 3, 4).unwrap(), 0.5).unwrap();
        let v = serde_json::to_value(d).unwrap();
        assert_eq!(v, serde_json::json!({"x0": 1, "y0": 2, "x1": 3, "y1": 4, "score": 0.5}));
        let bad = serde_json::json!({"detections": [{"x0": 1, "y0": 2, "x1": 3, "y1": 4, "score": 1.5}]});
        assert!(matches!(parse_detections(&bad), Err(BackendError::Schema(_))));
        let sorted = serde_json::json!({"detections": [
            {"x0": 0, "y0": 0, "x1": 1, "y1": 1, "score": 0.1},
            {"x0": 0, "y0": 0, "x1": 2, "y1": 2, "score": 0.9}
        ]});
        assert_eq!(parse_detections(&sorted).unwrap()[0].score, 0.9);
        assert!(parse_detections(&serde_json::json!({})).is_err());
    }
}
