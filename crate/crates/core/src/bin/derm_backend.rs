//! Reference backend speaking the work-directory protocol.
//!
//! ```text
//! derm-backend baseline <workdir>      Otsu baseline detector and segmenter
//! derm-backend echo <workdir>          copies input.dst to output.dst, no detections
//! derm-backend channel0 <workdir>      segment: returns channel 0 of the stack
//! derm-backend fixed-box X0,Y0,X1,Y1,SCORE <workdir>
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dermseg::backend::{
    serve_request, BackendError, BaselineDetector, BaselineSegmenter, Detection, Detector, Segmenter,
    INPUT_FILE, OUTPUT_FILE, RESPONSE_FILE,
};
use dermseg::colorspace::ChannelStack;
use dermseg::imagecore::{BoundingBox, ProbabilityMap, RasterImage};

#[derive(Debug, Parser)]
#[command(name = "derm-backend", version, about = "Reference inference backend")]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(Debug, Subcommand)]
enum Mode {
    Baseline { workdir: PathBuf },
    Echo { workdir: PathBuf },
    Channel0 { workdir: PathBuf },
    FixedBox { detection: String, workdir: PathBuf },
}

type BackendResult<T> = Result<T, BackendError>;

struct Channel0;

impl Segmenter for Channel0 {
    fn segment(&mut self, stack: &ChannelStack) -> BackendResult<ProbabilityMap> {
        ProbabilityMap::new(stack.width(), stack.height(), stack.channel(0).to_vec())
            .map_err(|e| BackendError::InvalidOutput(e.to_string()))
    }
}

struct Fixed(Detection);

impl Detector for Fixed {
    fn detect(&mut self, _: &RasterImage) -> BackendResult<Vec<Detection>> {
        Ok(vec![self.0])
    }
}

fn parse_detection(s: &str) -> Result<Detection, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [x0, y0, x1, y1, score] = parts[..] else {
        return Err(format!("expected X0,Y0,X1,Y1,SCORE, got {s:?}"));
    };
    let int = |v: &str| v.parse::<i64>().map_err(|e| format!("{v:?}: {e}"));
    let bbox = BoundingBox::new(int(x0)?, int(y0)?, int(x1)?, int(y1)?).map_err(|e| e.to_string())?;
    let score = score.parse::<f64>().map_err(|e| format!("{score:?}: {e}"))?;
    Detection::new(bbox, score).map_err(|e| e.to_string())
}

fn echo(workdir: &Path) -> BackendResult<()> {
    let input = workdir.join(INPUT_FILE);
    let output = workdir.join(OUTPUT_FILE);
    fs::copy(&input, &output).map_err(|e| BackendError::Io { path: input, source: e })?;
    let response = serde_json::json!({ "detections": [], "output": OUTPUT_FILE });
    let path = workdir.join(RESPONSE_FILE);
    fs::write(&path, response.to_string()).map_err(|e| BackendError::Io { path, source: e })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.mode {
        Mode::Baseline { workdir } => serve_request(
            &workdir,
            &mut BaselineDetector::default(),
            &mut BaselineSegmenter::default(),
        ),
        Mode::Echo { workdir } => echo(&workdir),
        Mode::Channel0 { workdir } => serve_request(&workdir, &mut BaselineDetector::default(), &mut Channel0),
        Mode::FixedBox { detection, workdir } => match parse_detection(&detection) {
            Ok(d) => serve_request(&workdir, &mut Fixed(d), &mut BaselineSegmenter::default()),
            Err(msg) => {
                eprintln!("error: {msg}");
                return ExitCode::from(1);
            }
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
