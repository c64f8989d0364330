use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dmsr::data::{load_image, save_image, synthetic_phantom, BitDepth};
use tempfile::TempDir;

fn dmsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmsr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dmsr(args);
    assert!(
        out.status.success(),
        "dmsr {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three 32×32 phantoms.
fn dataset(root: &Path) -> PathBuf {
    let dir = root.join("hr");
    fs::create_dir_all(&dir).unwrap();
    for i in 0..3 {
        save_image(&synthetic_phantom(32, 32, i), dir.join(format!("img{i}.png")), BitDepth::Sixteen).unwrap();
    }
    dir
}

fn train(root: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = root.join(name);
    let mut args = vec!["train", "--data", s(data), "--out", s(&out), "--seed", "3", "--iterations", "3"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn check_grad_single_module_passes() {
    let stdout = ok(&["check-grad", "ssm-scan"]);
    assert!(stdout.contains("selective_scan"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn check_grad_all_modules_pass() {
    let stdout = ok(&["check-grad"]);
    for m in dmsr::verify::MODULES {
        assert!(stdout.contains(m), "{m} missing from\n{stdout}");
    }
}

#[test]
fn check_grad_flags_corrupted_backward() {
    let out = dmsr(&["check-grad", "corrupted-fixture"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn check_grad_rejects_unknown_module() {
    let out = dmsr(&["check-grad", "bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown module"));
}

#[test]
fn scale_three_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let out = dmsr(&["train", "--data", s(tmp.path()), "--out", s(tmp.path()), "--scale", "3"]);
    assert!(!out.status.success());
}

#[test]
fn train_writes_log_and_checkpoint_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let a = train(tmp.path(), &data, "a", &[]);
    let b = train(tmp.path(), &data, "b", &[]);

    let log = fs::read_to_string(a.join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64 + 1);
        for key in ["l1", "celoss", "total"] {
            assert!(l[key].as_f64().unwrap().is_finite(), "{l}");
        }
    }
    assert_eq!(log, fs::read_to_string(b.join("train_log.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
}

#[test]
fn resume_reproduces_unbroken_run() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"iterations": 4, "checkpoint_every": 2, "seed": 9}"#).unwrap();

    let full = tmp.path().join("full");
    ok(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&full)]);
    let part = tmp.path().join("part");
    ok(&["train", "--config", s(&config), "--iterations", "2", "--data", s(&data), "--out", s(&part)]);
    ok(&[
        "train",
        "--resume",
        s(&part.join("final.ckpt")),
        "--iterations",
        "4",
        "--data",
        s(&data),
        "--out",
        s(&part),
    ]);

    assert_eq!(
        fs::read_to_string(full.join("train_log.jsonl")).unwrap(),
        fs::read_to_string(part.join("train_log.jsonl")).unwrap()
    );
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(part.join("final.ckpt")).unwrap());
    assert!(full.join("step000002.ckpt").exists());
}

#[test]
fn infer_scales_extents_and_is_bitwise_reproducible() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let run = train(tmp.path(), &data, "run", &[]);
    let lr_dir = tmp.path().join("lr");
    fs::create_dir_all(&lr_dir).unwrap();
    save_image(&synthetic_phantom(16, 24, 7), lr_dir.join("scan.pgm"), BitDepth::Sixteen).unwrap();

    let ckpt = run.join("final.ckpt");
    let (o1, o2) = (tmp.path().join("o1"), tmp.path().join("o2"));
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&lr_dir), "--out", s(&o1)]);
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&lr_dir.join("scan.pgm")), "--out", s(&o2)]);
    let (a, b) = (o1.join("scan_sr.pgm"), o2.join("scan_sr.pgm"));
    assert_eq!(load_image(&a).unwrap().shape(), &[1, 32, 48]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let o8 = tmp.path().join("o8");
    ok(&["infer", "--checkpoint", s(&ckpt), "--input", s(&lr_dir), "--out", s(&o8), "--bit-depth", "8"]);
    assert!(fs::metadata(o8.join("scan_sr.pgm")).unwrap().len() < fs::metadata(&a).unwrap().len());
}

#[test]
fn infer_names_required_divisibility() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let run = train(tmp.path(), &data, "run", &[]);
    let bad = tmp.path().join("bad.png");
    save_image(&synthetic_phantom(12, 16, 0), &bad, BitDepth::Eight).unwrap();
    let out = dmsr(&["infer", "--checkpoint", s(&run.join("final.ckpt")), "--input", s(&bad), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("multiples of 8"));
}

#[test]
fn eval_bypass_hits_the_caps() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("eval");
    let stdout = ok(&["eval", "--bypass", "--data", s(&data), "--out", s(&out)]);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let records = report["records"].as_array().unwrap();
    assert_eq!(records.len(), 3);
    for r in records {
        assert_eq!(r["psnr_db"], 100.0);
        assert_eq!(r["ssim"], 1.0);
    }
    assert_eq!(report["mean_ssim"], 1.0);
    for i in 0..3 {
        assert!(out.join("error_maps").join(format!("img{i}_error.png")).exists());
    }
    let header = stdout.lines().find(|l| l.starts_with("image")).unwrap();
    assert!(header.find("PSNR").unwrap() < header.find("SSIM").unwrap(), "{header}");
}

#[test]
fn eval_of_checkpoint_reports_mean_of_images() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let run = train(tmp.path(), &data, "run", &[]);
    let out = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run.join("final.ckpt")), "--data", s(&data), "--out", s(&out)]);

    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    let psnr: Vec<f64> = report["records"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["psnr_db"].as_f64().unwrap())
        .collect();
    let mean = psnr.iter().sum::<f64>() / psnr.len() as f64;
    assert!((report["mean_psnr_db"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(fs::read_to_string(out.join("metrics.txt")).unwrap().contains("mean"));
}

#[test]
fn ablate_emits_four_labelled_rows() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let out = tmp.path().join("ablate");
    let stdout = ok(&["ablate", "--data", s(&data), "--out", s(&out), "--iterations", "1"]);
    for label in dmsr::train::ABLATION_LABELS {
        assert!(stdout.contains(label), "{label} missing from\n{stdout}");
    }
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn cache_is_created_then_reused() {
    let tmp = TempDir::new().unwrap();
    let data = dataset(tmp.path());
    let cache = tmp.path().join("cache");
    let a = train(tmp.path(), &data, "a", &["--cache", s(&cache)]);
    assert!(cache.join("manifest.json").exists());
    let b = train(tmp.path(), &data, "b", &["--cache", s(&cache)]);
    assert_eq!(
        fs::read_to_string(a.join("train_log.jsonl")).unwrap(),
        fs::read_to_string(b.join("train_log.jsonl")).unwrap()
    );
}
