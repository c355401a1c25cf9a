use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mandible_seg::io::{load_mask_auto, load_volume_auto, save_volume_auto, DataType};
use mandible_seg::volume::crop_mask;
use mandible_seg::{BoundingBox, Grid, Volume};
use serde_json::Value;

fn mandseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mandseg")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mandseg(args);
    assert!(
        out.status.success(),
        "mandseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Phantoms for training and testing plus trained forests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    forests: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let train = root.join("train");
    for (sev, seed) in [("low", "100"), ("medium", "101"), ("high", "102")] {
        ok(&["phantom", "--severity", sev, "--seed", seed, "--out", s(&train)]);
    }
    let forests = root.join("forests");
    ok(&[
        "train",
        "--manifest",
        s(&train.join("manifest.tsv")),
        "--out",
        s(&forests),
        "--trees",
        "20",
        "--seed",
        "3",
    ]);
    Fixture {
        _dir: dir,
        root,
        forests,
    }
}

#[test]
fn round_trip_phantom_train_segment_evaluate() {
    let f = fixture();
    let test = f.root.join("test");
    for sev in ["low", "medium", "high"] {
        ok(&["phantom", "--severity", sev, "--seed", "0", "--count", "2", "--out", s(&test)]);
    }
    let preds = f.root.join("preds");
    ok(&[
        "segment",
        "--manifest",
        s(&test.join("manifest.tsv")),
        "--out-dir",
        s(&preds),
        "--forests",
        s(&f.forests),
    ]);
    let report = f.root.join("report.json");
    ok(&[
        "evaluate",
        "--manifest",
        s(&preds.join("predictions.tsv")),
        "--out",
        s(&report),
    ]);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let cases = r["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 6);
    for c in cases {
        assert!(c["dsc"].as_f64().unwrap() > 0.9, "{c}");
        assert!(c["uoi"].as_f64().unwrap() > 0.7, "{c}");
    }
    assert_eq!(r["groups"]["overall"]["count"], 6);
    for sev in ["low", "medium", "high"] {
        assert_eq!(r["groups"][sev]["count"], 2);
    }
    let log = preds.join("phantom_low_0.pred.log.json");
    let log: Value = serde_json::from_slice(&fs::read(log).unwrap()).unwrap();
    assert!(log["seed_voxel"].is_object() || log["seed_voxel"].is_array());
    assert!(preds.join("phantom_low_0.pred.trace.json").exists());
}

#[test]
fn air_volume_exits_with_recognition_failure() {
    let f = fixture();
    let g = Grid::new([64, 64, 40], [1.0, 1.0, 3.0]).unwrap();
    let air = f.root.join("air.nii");
    save_volume_auto(&Volume::filled(g, -1000.0), &air, DataType::I16).unwrap();
    let out = mandseg(&[
        "segment",
        "--volume",
        s(&air),
        "--out",
        s(&f.root.join("air_pred.nii")),
        "--forests",
        s(&f.forests),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mandible not found"), "{err}");
    assert!(!f.root.join("air_pred.nii").exists());
}

#[test]
fn no_refine_output_is_the_thresholded_connectivity() {
    let f = fixture();
    let test = f.root.join("test");
    ok(&["phantom", "--severity", "high", "--seed", "4", "--out", s(&test)]);
    let vol = test.join("phantom_high_4.nii");
    let raw = f.root.join("raw.nii");
    let refined = f.root.join("refined.nii");
    let conn = f.root.join("conn.nii");
    let common = ["--volume", s(&vol), "--forests", s(&f.forests), "--theta", "0.98"];
    ok(&[&["segment", "--no-refine", "--out", s(&raw)], &common[..]].concat());
    ok(&[
        &["segment", "--out", s(&refined), "--dump-connectivity", s(&conn)],
        &common[..],
    ]
    .concat());
    let raw_mask = load_mask_auto(&raw).unwrap();
    let refined_mask = load_mask_auto(&refined).unwrap();
    let strength = load_volume_auto(&conn).unwrap();
    let log: Value = serde_json::from_slice(&fs::read(raw.with_extension("log.json")).unwrap()).unwrap();
    let b = &log["crop_box"];
    let at = |k: &str, a: &str| b[k][a].as_u64().unwrap() as usize;
    let crop = BoundingBox::from_intervals(
        (at("min", "x"), at("max", "x")),
        (at("min", "y"), at("max", "y")),
        (at("min", "z"), at("max", "z")),
    )
    .unwrap();
    let inside = crop_mask(&raw_mask, &crop).unwrap();
    assert_eq!(inside.count(), raw_mask.count());
    assert_eq!(inside.dims(), strength.dims());
    // The dump is f32, so voxels within rounding of theta may flip.
    for (&v, &m) in strength.data().iter().zip(inside.bits()) {
        assert!(m == (v >= 0.98) || (v - 0.98).abs() < 1e-6, "strength {v} mask {m}");
    }
    assert!(refined_mask.is_subset_of(&raw_mask));
    assert_eq!(log["fc_voxels"], log["output_voxels"]);
    assert_eq!(log["output_voxels"].as_u64().unwrap() as usize, raw_mask.count());
}

#[test]
fn training_is_reproducible() {
    let f = fixture();
    let again = f.root.join("forests2");
    ok(&[
        "train",
        "--manifest",
        s(&f.root.join("train/manifest.tsv")),
        "--out",
        s(&again),
        "--trees",
        "20",
        "--seed",
        "3",
    ]);
    for axis in ["sagittal", "coronal", "axial"] {
        let name = format!("{axis}.forest.json");
        assert_eq!(
            fs::read(f.forests.join(&name)).unwrap(),
            fs::read(again.join(&name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn evaluate_identical_masks() {
    let dir = tempfile::tempdir().unwrap();
    for sev in ["low", "medium", "high"] {
        ok(&["phantom", "--severity", sev, "--seed", "9", "--out", s(dir.path())]);
    }
    let mut args = vec!["evaluate".to_string()];
    for sev in ["low", "medium", "high"] {
        let m = dir.path().join(format!("phantom_{sev}_9_mandible.nii"));
        let m = m.to_str().unwrap().to_string();
        args.extend(["--pred".into(), m.clone(), "--gt".into(), m, "--severity".into(), sev.into()]);
    }
    let report = dir.path().join("r.json");
    args.extend(["--out".into(), report.to_str().unwrap().into()]);
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&args);
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    for c in r["cases"].as_array().unwrap() {
        assert_eq!(c["dsc"], 1.0);
        assert_eq!(c["uoi"], 1.0);
        assert_eq!(c["mhd_mm"], 0.0);
    }
    let keys: Vec<&String> = r["groups"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["high", "low", "medium", "overall"]);
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "# nothing here\n").unwrap();
    let out = mandseg(&["train", "--manifest", s(&empty), "--out", s(&dir.path().join("f"))]);
    assert!(!out.status.success());

    ok(&["phantom", "--seed", "1", "--out", s(dir.path())]);
    let m = dir.path().join("phantom_low_1_mandible.nii");
    let out = mandseg(&["evaluate", "--pred", s(&m), "--pred", s(&m), "--gt", s(&m)]);
    assert_eq!(out.status.code(), Some(1));

    let missing = dir.path().join("missing.nii");
    let out = mandseg(&["evaluate", "--pred", s(&missing), "--gt", s(&m), "--severity", "low"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.nii"));

    let out = mandseg(&["segment", "--volume", s(&m), "--out", s(&missing), "--forests", s(dir.path())]);
    assert_eq!(out.status.code(), Some(4));
}
