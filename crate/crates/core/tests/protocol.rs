use std::time::{Duration, Instant};

use dermseg::backend::{
    subprocess_roundtrip, BackendError, BackendHandle, BaselineDetector, BaselineSegmenter, Detector, Segmenter,
    SubprocessCommand, Task, TensorFile,
};
use dermseg::colorspace::{assemble_channels, ChannelStack};
use dermseg::imagecore::{BoundingBox, ColorSpace, RasterImage};
use dermseg::synthetic::ellipse_mask;

fn reference_backend(mode: &[&str]) -> BackendHandle {
    BackendHandle::subprocess(SubprocessCommand::new(
        env!("CARGO_BIN_EXE_derm-backend"),
        mode.iter().map(|s| s.to_string()).collect(),
    ))
}

/// `sh -c SCRIPT sh <workdir>`, so the script sees the work directory as `$1`.
fn shell(script: &str) -> SubprocessCommand {
    SubprocessCommand::new("sh", vec!["-c".into(), script.into(), "sh".into()])
}

fn lesion_image(n: usize) -> RasterImage {
    let mask = ellipse_mask(n, n, n as f64 * 0.45, n as f64 * 0.55, n as f64 * 0.5, n as f64 * 0.3, 25.0);
    RasterImage::from_fn(n, n, 3, ColorSpace::Srgb, |x, y, c| {
        let skin = [0.86, 0.72, 0.64][c];
        if mask.get(x, y) {
            skin * 0.35
        } else {
            skin
        }
    })
    .unwrap()
}

fn stack(n: usize) -> ChannelStack {
    assemble_channels(&lesion_image(n)).unwrap()
}

#[test]
fn echo_preserves_tensor_bytes() {
    let input = TensorFile::from_stack(&stack(33));
    let cmd = SubprocessCommand::new(env!("CARGO_BIN_EXE_derm-backend"), vec!["echo".into()]);
    let ex = subprocess_roundtrip(&cmd, Duration::from_secs(30), Task::Segment, &input).unwrap();
    assert_eq!(ex.output.unwrap().to_bytes(), input.to_bytes());
    assert_eq!(ex.response["output"], "output.dst");
}

#[test]
fn subprocess_baseline_matches_in_process() {
    let img = lesion_image(48);
    let mut remote = reference_backend(&["baseline"]);
    assert_eq!(remote.detect(&img).unwrap(), BaselineDetector::default().run(&img));
    let s = stack(32);
    assert_eq!(remote.segment(&s).unwrap(), BaselineSegmenter::default().run(&s));
}

#[test]
fn fixed_box_detection_is_parsed() {
    let mut det = reference_backend(&["fixed-box", "3,4,20,30,0.75"]);
    let found = det.detect(&lesion_image(40)).unwrap();
    assert_eq!(found.len(), 1);
    assert_eq!(found[0].bbox, BoundingBox::new(3, 4, 20, 30).unwrap());
    assert_eq!(found[0].score, 0.75);
}

#[test]
fn channel0_segmenter_returns_red_plane() {
    let s = stack(16);
    let map = reference_backend(&["channel0"]).segment(&s).unwrap();
    assert_eq!(map.values(), s.channel(0));
}

#[test]
fn detections_are_sorted_by_score() {
    let script = r#"printf '{"detections":[{"x0":0,"y0":0,"x1":2,"y1":2,"score":0.1},{"x0":1,"y0":1,"x1":5,"y1":5,"score":0.9}]}' > "$1/response.json""#;
    let mut det = BackendHandle::subprocess(shell(script));
    let found = det.detect(&lesion_image(8)).unwrap();
    assert_eq!(found.iter().map(|d| d.score).collect::<Vec<_>>(), vec![0.9, 0.1]);
}

#[test]
fn nonzero_exit_carries_code_and_stderr() {
    let mut seg = BackendHandle::subprocess(shell("echo model exploded >&2; exit 3"));
    match seg.segment(&stack(8)) {
        Err(BackendError::Exit { code, stderr }) => {
            assert_eq!(code, Some(3));
            assert!(stderr.contains("model exploded"));
        }
        other => panic!("expected exit error, got {other:?}"),
    }
}

#[test]
fn slow_backend_times_out() {
    let mut seg = BackendHandle::subprocess(shell("sleep 5")).with_timeout(Duration::from_millis(200));
    let start = Instant::now();
    assert!(matches!(seg.segment(&stack(8)), Err(BackendError::Timeout(_))));
    assert!(start.elapsed() < Duration::from_secs(4));
}

#[test]
fn schema_violations_are_reported() {
    let cases = [
        "true",
        r#"echo 'not json' > "$1/response.json""#,
        r#"echo '[1, 2]' > "$1/response.json""#,
        r#"echo '{"detections": [{"x0": 5, "y0": 0, "x1": 2, "y1": 3, "score": 0.5}]}' > "$1/response.json""#,
        r#"echo '{"output": "../escape.dst"}' > "$1/response.json""#,
    ];
    for script in cases {
        let err = BackendHandle::subprocess(shell(script)).detect(&lesion_image(8)).unwrap_err();
        assert!(
            matches!(err, BackendError::Schema(_) | BackendError::InvalidOutput(_)),
            "{script}: {err:?}"
        );
    }
}

#[test]
fn wrong_output_size_is_rejected() {
    let script = r#"cp "$1/input.dst" "$1/output.dst"; echo '{"output": "output.dst"}' > "$1/response.json""#;
    let err = BackendHandle::subprocess(shell(script)).segment(&stack(8)).unwrap_err();
    assert!(matches!(err, BackendError::Tensor(_) | BackendError::InvalidOutput(_)), "{err:?}");
}

#[test]
fn missing_executable_is_unhealthy() {
    let mut h = BackendHandle::from_command("/nonexistent/derm-model --fast").unwrap();
    assert!(matches!(h.health_check(), Err(BackendError::Unhealthy(_))));
    assert!(BackendHandle::from_command("baseline").unwrap().health_check().is_ok());
}
