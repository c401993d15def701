use std::path::Path;
use std::process::{Command, Output};

use octa_restore::detect::{Label, ScanLabel};
use octa_restore::synth::{DefectKind, TruthFile};
use octa_restore::volume::read_volume;

fn octa_restore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octa-restore"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = octa_restore(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn no_arguments_prints_usage() {
    let out = octa_restore(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_names_the_path() {
    let out = octa_restore(&["detect", "--in", "/no/such/missing.vol"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/missing.vol"));
}

#[test]
fn patchplan_reports_starts_and_boundaries() {
    let out = ok(&["patchplan", "--width", "500", "--patch", "128", "--count", "5", "--trim", "8"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["starts"], serde_json::json!([0, 93, 186, 279, 372]));
    assert_eq!(v["boundaries"], serde_json::json!([[110, 111], [203, 204], [296, 297], [389, 390]]));
}

#[test]
fn synth_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    for run in ["a", "b"] {
        ok(&[
            "synth",
            "--seed",
            "4",
            "--dims",
            "16,32,32",
            "--out-oct",
            &p(dir.path(), &format!("{run}.oct.vol")),
            "--out-octa",
            &p(dir.path(), &format!("{run}.octa.vol")),
            "--truth",
            &p(dir.path(), &format!("{run}.json")),
            "--defects",
            "3:blink,9:motion",
        ]);
    }
    for suffix in ["oct.vol", "octa.vol", "json"] {
        let a = std::fs::read(dir.path().join(format!("a.{suffix}"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("b.{suffix}"))).unwrap();
        assert_eq!(a, b, "{suffix} differs");
    }
    let truth: TruthFile = serde_json::from_slice(&std::fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(truth.labels[3], DefectKind::Blink);
    assert_eq!(truth.labels[9], DefectKind::Motion);
    assert!(!truth.vessel_voxels.is_empty());
}

#[test]
fn bad_defect_list_is_a_usage_error() {
    let out = octa_restore(&["synth", "--out-oct", "a", "--out-octa", "b", "--truth", "c", "--defects", "3:smudge"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn import_wraps_raw_floats() {
    let dir = tempfile::tempdir().unwrap();
    let raw: Vec<u8> = (0..24).flat_map(|i| (i as f32 / 4.0).to_le_bytes()).collect();
    std::fs::write(dir.path().join("x.raw"), &raw).unwrap();
    ok(&["import", "--raw", &p(dir.path(), "x.raw"), "--dims", "2,3,4", "--out", &p(dir.path(), "x.vol")]);
    let v = read_volume(dir.path().join("x.vol")).unwrap();
    assert_eq!(v.dims(), [2, 3, 4]);
    assert_eq!(v.data[[1, 2, 3]], 23.0 / 4.0);
    let out = octa_restore(&["import", "--raw", &p(dir.path(), "x.raw"), "--dims", "2,3,5", "--out", &p(dir.path(), "y.vol")]);
    assert_eq!(out.status.code(), Some(2));
}

/// synth -> detect -> train -> infer -> repair -> project -> eval.
#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    std::fs::create_dir(&data).unwrap();
    ok(&[
        "synth", "--seed", "1", "--dims", "16,32,64",
        "--out-oct", &p(&data, "a.oct.vol"), "--out-octa", &p(&data, "a.octa.vol"), "--truth", &p(d, "train.json"),
    ]);
    ok(&[
        "synth", "--seed", "2", "--dims", "24,32,64",
        "--out-oct", &p(d, "test.oct.vol"), "--out-octa", &p(d, "test.octa.vol"), "--truth", &p(d, "test.json"),
        "--defects", "5:blink,15:blink", "--out-clean", &p(d, "clean.vol"),
    ]);
    std::fs::write(d.join("detect.json"), r#"{"tau_l": 1.55, "tau_u": 1.95}"#).unwrap();
    ok(&["detect", "--in", &p(d, "test.octa.vol"), "--config", &p(d, "detect.json"), "--out", &p(d, "labels.json")]);
    let labels: Vec<ScanLabel> = serde_json::from_slice(&std::fs::read(d.join("labels.json")).unwrap()).unwrap();
    assert_eq!(labels.len(), 24);
    assert_eq!(labels[5].label, Label::LowDefect);
    assert_eq!(labels[15].label, Label::LowDefect);

    std::fs::write(d.join("unet.json"), r#"{"initial_channels": 2, "growth": 2}"#).unwrap();
    ok(&[
        "train", "--seed", "3", "--data", &p(d, "data"), "--ucfg", &p(d, "unet.json"),
        "--epochs", "2", "--smoothing-epochs", "1", "--patch-width", "16", "--patches-per-scan", "2",
        "--out", &p(d, "model.ckpt"), "--log", &p(d, "loss.csv"),
    ]);
    let log = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(&["infer", "--oct", &p(d, "test.oct.vol"), "--model", &p(d, "model.ckpt"), "--patch", "16", "--trim", "1", "--out", &p(d, "gen.vol")]);
    assert_eq!(read_volume(d.join("gen.vol")).unwrap().dims(), [24, 32, 64]);

    ok(&[
        "repair", "--oct", &p(d, "test.oct.vol"), "--octa", &p(d, "test.octa.vol"), "--model", &p(d, "model.ckpt"),
        "--dconfig", &p(d, "detect.json"), "--mode", "low", "--patch", "16", "--trim", "1",
        "--out", &p(d, "repaired.vol"), "--png", &p(d, "annotated.png"),
    ]);
    let before = read_volume(d.join("test.octa.vol")).unwrap();
    let after = read_volume(d.join("repaired.vol")).unwrap();
    let changed: Vec<usize> = (0..24).filter(|&i| before.bscan(i) != after.bscan(i)).collect();
    assert_eq!(changed, [5, 15]);
    let png = image::open(d.join("annotated.png")).unwrap().to_rgb8();
    assert_eq!((png.width(), png.height()), (24, 64 + 4));
    assert_eq!(png.get_pixel(5, 0).0, [255, 0, 0]);
    assert_eq!(png.get_pixel(6, 0).0, [0, 255, 0]);

    std::fs::write(d.join("bounds.json"), r#"{"upper": 4, "lower": 20}"#).unwrap();
    ok(&["project", "--in", &p(d, "repaired.vol"), "--bounds", &p(d, "bounds.json"), "--png", &p(d, "proj.png")]);
    let gray = image::open(d.join("proj.png")).unwrap();
    assert_eq!((gray.width(), gray.height()), (64, 24));
    assert!(matches!(gray, image::DynamicImage::ImageLuma8(_)));

    let out = ok(&[
        "eval", "--a", &p(d, "repaired.vol"), "--b", &p(d, "clean.vol"),
        "--bounds", &p(d, "bounds.json"), "--report", &p(d, "report.json"),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    let stdout: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report, stdout);
    for row in ["bscans", "projection", "segmented_projection"] {
        for m in ["mae", "mse", "ssim"] {
            assert!(report[row][m].is_f64(), "{row}.{m}");
        }
    }

    std::fs::write(d.join("bad_bounds.json"), r#"{"upper": 20, "lower": 4}"#).unwrap();
    let out = octa_restore(&["project", "--in", &p(d, "repaired.vol"), "--bounds", &p(d, "bad_bounds.json"), "--png", &p(d, "x.png")]);
    assert_eq!(out.status.code(), Some(2));
}
