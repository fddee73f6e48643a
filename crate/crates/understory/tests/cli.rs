//! End-to-end tests of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

use understory::scene::{generate_forest, voxelize, ForestParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_understory"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth_small(dir: &Path, seed: u64, extra: &[&str]) {
    let mut cmd = bin();
    cmd.args([
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        &seed.to_string(),
        "--set",
        "n_stems=2",
        "--set",
        "extent=12",
        "--set-capture",
        "n_x=2",
        "--set-capture",
        "n_y=2",
        "--set-capture",
        "width=48",
        "--set-capture",
        "height=48",
    ]);
    cmd.args(extra);
    run_ok(&mut cmd);
}

#[test]
fn synth_single_camera_minimal() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let mut cmd = bin();
    cmd.args([
        "synth",
        "--out",
        ds.to_str().unwrap(),
        "--set",
        "n_stems=0",
        "--set",
        "canopy_density=0",
        "--set-capture",
        "n_x=1",
        "--set-capture",
        "n_y=1",
        "--set-capture",
        "width=32",
        "--set-capture",
        "height=32",
    ]);
    run_ok(&mut cmd);
    assert!(ds.join("cameras.json").exists());
    assert!(ds.join("images/view_000.png").exists());
    assert!(!ds.join("images/view_001.png").exists());
    assert!(ds.join("manifest.json").exists());
}

#[test]
fn synth_is_deterministic_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth_small(&a, 5, &[]);
    synth_small(&b, 5, &[]);
    for rel in ["cameras.json", "dtm.json", "scene.json", "images/view_000.png"] {
        let fa = std::fs::read(a.join(rel)).unwrap();
        let fb = std::fs::read(b.join(rel)).unwrap();
        assert_eq!(fa, fb, "{rel} differs between identical runs");
    }
}

#[test]
fn crop_without_dtm_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "render",
            "--checkpoint",
            "x.cnpl",
            "--cameras",
            "x.json",
            "--out",
            tmp.path().to_str().unwrap(),
            "--crop",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--dtm"));
}

#[test]
fn missing_dataset_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "train",
            "--dataset",
            "/nonexistent/nowhere",
            "--out",
            tmp.path().join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

/// Shared fixture: dataset, short training run, checkpoint path.
fn trained_checkpoint(tmp: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let ds = tmp.join("ds");
    synth_small(&ds, 7, &["--float"]);
    let run = tmp.join("run");
    let mut cmd = bin();
    cmd.args([
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--seed",
        "3",
        "--set",
        "steps=60",
        "--set",
        "batch_size=1024",
        "--set",
        "n_samples=48",
        "--set",
        "resolution=[24,24,24]",
        "--set",
        "visibility_loss_weight=0.0",
        "--set",
        "log_every=1",
    ]);
    run_ok(&mut cmd);
    (ds, run.join("field.cnpl"))
}

#[test]
fn mask_render_of_fully_visible_field_equals_full() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained_checkpoint(tmp.path());
    // Pin the visibility channel fully open so masking is a no-op.
    let mut field = understory::field::VoxelField::load(&ckpt).unwrap();
    for chunk in field.params.chunks_mut(understory::field::CHANNELS) {
        chunk[4] = 60.0;
    }
    field.save(&ckpt).unwrap();
    for (dir, flag) in [("full", None), ("mask", Some("--mask"))] {
        let mut cmd = bin();
        cmd.args([
            "render",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--cameras",
            ds.join("cameras.json").to_str().unwrap(),
            "--out",
            tmp.path().join(dir).to_str().unwrap(),
            "--samples",
            "64",
        ]);
        if let Some(f) = flag {
            cmd.arg(f);
        }
        run_ok(&mut cmd);
    }
    let a = std::fs::read(tmp.path().join("full/view_000.png")).unwrap();
    let b = std::fs::read(tmp.path().join("mask/view_000.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn huge_crop_margin_renders_background() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained_checkpoint(tmp.path());
    let out_dir = tmp.path().join("crop");
    run_ok(bin().args([
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--cameras",
        ds.join("cameras.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--crop",
        "--dtm",
        ds.join("dtm.json").to_str().unwrap(),
        "--margin",
        "1e9",
        "--background",
        "0.25,0.5,0.75",
        "--samples",
        "32",
    ]));
    let img = understory::img::ImageBuf::load_png(&out_dir.join("view_000.png")).unwrap();
    let expect = img.get(0, 0);
    for p in &img.data {
        assert_eq!(*p, expect, "crop with huge margin must be flat background");
    }
    assert!(expect[2] > expect[1] && expect[1] > expect[0]);
}

#[test]
fn eval_self_comparison_and_missing_counterpart() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    synth_small(&ds, 11, &[]);
    let csv_path = tmp.path().join("metrics.csv");
    run_ok(bin().args([
        "eval",
        "--rendered",
        ds.join("images").to_str().unwrap(),
        "--reference",
        ds.join("images").to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("name,value\n"));
    assert!(csv.contains("msssim_mean,1.000000"), "{csv}");
    assert!(csv.contains("msssim_std,0.000000"));
    assert!(csv.contains(",inf\n"), "self psnr must be inf: {csv}");

    // A reference directory with a missing counterpart names the file.
    let partial = tmp.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    std::fs::copy(
        ds.join("images/view_000.png"),
        partial.join("view_000.png"),
    )
    .unwrap();
    let out = bin()
        .args([
            "eval",
            "--rendered",
            ds.join("images").to_str().unwrap(),
            "--reference",
            partial.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("view_001.png"));
}

#[test]
fn stems_command_with_stages() {
    let tmp = tempfile::tempdir().unwrap();
    // Use an exact voxelization so the count is deterministic.
    let scene = generate_forest(&ForestParams {
        seed: 33,
        extent: 16.0,
        n_stems: 5,
        canopy_density: 1.0,
        n_targets: 0,
        ..ForestParams::default()
    })
    .unwrap();
    let field = voxelize(&scene, [128, 128, 64]).unwrap();
    let ckpt = tmp.path().join("field.cnpl");
    field.save(&ckpt).unwrap();
    understory::dataset::write_json_atomic(&tmp.path().join("dtm.json"), &scene.terrain).unwrap();

    let report_path = tmp.path().join("out/report.json");
    run_ok(bin().args([
        "stems",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--dtm",
        tmp.path().join("dtm.json").to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
        "--keep-stages",
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["stem_count"], serde_json::json!(5));
    let stage_dir = report_path.parent().unwrap();
    for name in ["stage1_raw.ply", "stage2_no_foliage.ply", "stage3_cropped.ply"] {
        assert!(stage_dir.join(name).exists(), "missing {name}");
    }
}

#[test]
fn inspect_lighting_flags_split_exposure() {
    let tmp = tempfile::tempdir().unwrap();
    // Bright dataset with gain 1: unimodal-ish natural texture.
    let ds = tmp.path().join("ds");
    synth_small(&ds, 13, &[]);
    let out = run_ok(bin().args([
        "inspect-lighting",
        "--input",
        ds.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["images"].as_array().unwrap().len(), 4);

    // Constructed hard-shadow split: half almost black, half bright.
    let split_dir = tmp.path().join("split");
    std::fs::create_dir_all(&split_dir).unwrap();
    let mut img = understory::img::ImageBuf::new(64, 64);
    for (i, p) in img.data.iter_mut().enumerate() {
        *p = if (i / 64) < 32 { [0.05; 3] } else { [0.9; 3] };
    }
    img.save_png(&split_dir.join("view.png")).unwrap();
    let out = run_ok(bin().args([
        "inspect-lighting",
        "--input",
        split_dir.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["fraction_bimodal"], serde_json::json!(1.0));

    // Empty directory is a usage error.
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = bin()
        .args(["inspect-lighting", "--input", empty.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn resumed_training_continues_the_loss_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained_checkpoint(tmp.path());
    let resumed = tmp.path().join("resumed");
    run_ok(bin().args([
        "train",
        "--dataset",
        ds.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
        "--init",
        ckpt.to_str().unwrap(),
        "--seed",
        "4",
        "--set",
        "steps=10",
        "--set",
        "batch_size=1024",
        "--set",
        "n_samples=48",
        "--set",
        "visibility_loss_weight=0.0",
        "--set",
        "log_every=1",
    ]));
    let first_loss = |dir: &Path| -> f64 {
        let log = std::fs::read_to_string(dir.join("train_log.csv")).unwrap();
        log.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap()
    };
    let fresh_start = first_loss(&tmp.path().join("run"));
    let resumed_start = first_loss(&resumed);
    assert!(
        resumed_start < fresh_start * 0.8,
        "resumed {resumed_start} vs fresh {fresh_start}"
    );
}
