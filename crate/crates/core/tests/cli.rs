use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn derm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_derm")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(root: &Path, count: usize) {
    let out = derm(&["synth", "--out", p(root), "--count", &count.to_string(), "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn split_writes_ten_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let ids: String = (0..22).map(|i| format!("ISIC_{i:07}\n")).collect();
    fs::write(dir.path().join("ids.txt"), ids).unwrap();
    let out_dir = dir.path().join("split");
    let run = |out: &Path| derm(&["split", "--ids", p(&dir.path().join("ids.txt")), "--seed", "7", "--out", p(out)]);
    assert_eq!(code(&run(&out_dir)), 0);
    let train = fs::read_to_string(out_dir.join("train.txt")).unwrap();
    let val = fs::read_to_string(out_dir.join("val.txt")).unwrap();
    assert_eq!((train.lines().count(), val.lines().count()), (20, 2));

    let again = dir.path().join("again");
    run(&again);
    assert_eq!(fs::read_to_string(again.join("val.txt")).unwrap(), val);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&derm(&["frobnicate"])), 1);
    assert_eq!(code(&derm(&["run", "--workers", "many"])), 1);
    assert_eq!(code(&derm(&["run", "--out", "/tmp/x"])), 1);
    assert_eq!(code(&derm(&["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&derm(&["split", "--ids", p(&dir.path().join("missing.txt"))])), 2);
    fs::create_dir_all(dir.path().join("empty/images")).unwrap();
    let out = derm(&[
        "run", "--dataset", p(&dir.path().join("empty")), "--detector", "baseline", "--segmenter", "baseline",
        "--out", p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn broken_backend_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("data"), 2);
    let out = derm(&[
        "run", "--dataset", p(&dir.path().join("data")), "--detector", "/nonexistent/detector", "--segmenter",
        "baseline", "--out", p(&dir.path().join("out")),
    ]);
    assert_eq!(code(&out), 3);

    let script = dir.path().join("fail.sh");
    fs::write(&script, "#!/bin/sh\nexit 3\n").unwrap();
    let out = derm(&[
        "run", "--dataset", p(&dir.path().join("data")), "--detector", &format!("sh {}", p(&script)),
        "--segmenter", "baseline", "--out", p(&dir.path().join("out2")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn run_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 3);
    let masks = dir.path().join("masks");
    let backend = format!("{} baseline", env!("CARGO_BIN_EXE_derm-backend"));
    let out = derm(&[
        "run", "--dataset", p(&data), "--detector", &backend, "--segmenter", "baseline", "--input-size", "128",
        "--workers", "2", "--out", p(&masks),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(masks.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 3);
    assert!(masks.join("report.csv").exists());

    let eval_report = dir.path().join("eval.json");
    let out = derm(&["eval", "--pred", p(&masks), "--truth", p(&data.join("masks")), "--report", p(&eval_report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(&eval_report).unwrap()).unwrap();
    assert_eq!(eval["mean_raw"], report["mean_raw"]);
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert!(csv.starts_with("id,raw_jaccard,thresholded_jaccard"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 1);
    let config = dir.path().join("derm.conf");
    fs::write(
        &config,
        format!(
            "# batch settings\ndataset = {}\ndetector = baseline\nsegmenter = baseline\ninput_size = 64\ntta = false\nout = {}\n",
            p(&data),
            p(&dir.path().join("from-config"))
        ),
    )
    .unwrap();
    let out = derm(&["--config", p(&config), "run", "--out", p(&dir.path().join("from-flag"))]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from-flag/ISIC_0000000_segmentation.png").exists());
    assert!(!dir.path().join("from-config").exists());
}

#[test]
fn preprocess_and_sample_crops_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2);
    let channels = dir.path().join("channels");
    let out = derm(&["preprocess", "--in", p(&data.join("images/ISIC_0000000.png")), "--dump-channels", p(&channels)]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_dir(&channels).unwrap().count(), 8);

    let crops = dir.path().join("crops");
    let out = derm(&[
        "sample-crops", "--dataset", p(&data), "--range", "0.9:1.1", "--per-image", "2", "--input-size", "64",
        "--out", p(&crops),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dst = crops.join("ISIC_0000001_001.dst");
    assert_eq!(fs::metadata(dst).unwrap().len(), 8 + 12 + 4 * 8 * 64 * 64);
    assert_eq!(code(&derm(&["sample-crops", "--dataset", p(&data), "--range", "1.2:0.9", "--out", p(&crops)])), 1);
}
