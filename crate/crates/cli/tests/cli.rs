use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seld_core::dsp::{write_wav_f32, AudioClip};
use seld_core::labels::{EventLabel, SegmentLabels};
use seld_core::model::ModelConfig;
use seld_core::seldt::SeldtTensor;
use serde_json::Value;

fn seld(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seld")).args(args).env_remove("SELD_SEED").output().unwrap()
}

fn seld_env(args: &[&str], key: &str, val: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seld")).args(args).env(key, val).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

fn wav(dir: &Path, rate: u32) -> PathBuf {
    let n = rate as usize;
    let w: Vec<f32> = (0..n).map(|i| (i as f32 * 0.07).sin() * 0.3).collect();
    let clip = AudioClip::new(vec![w.clone(), w.clone(), w.iter().map(|v| v * 0.5).collect(), vec![0.0; n]], rate).unwrap();
    let path = dir.join(format!("clip{rate}.wav"));
    write_wav_f32(&path, &clip).unwrap();
    path
}

fn label(frame: usize, az: f64, d: f64) -> EventLabel {
    EventLabel { frame, class_id: 3, source_id: 0, azimuth: az, elevation: 0.0, distance: d }
}

fn labels_file(dir: &Path, name: &str, labels: Vec<EventLabel>) -> PathBuf {
    let path = dir.join(name);
    SegmentLabels { clip_id: name.into(), start_frame: 0, labels, feature: None }.save(&path).unwrap();
    path
}

fn toy_cfg(dir: &Path) -> PathBuf {
    let path = dir.join("toy.toml");
    std::fs::write(&path, ModelConfig::toy().to_toml_string()).unwrap();
    path
}

#[test]
fn no_arguments_prints_usage_and_fails() {
    let o = seld(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_flag_fails_with_usage() {
    let o = seld(&["filterbank", "dump", "--filter", "mel", "--csv", "-", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = seld(&["filterbank", "dump", "--filter", "cochlea", "--csv", "-"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn filterbank_dump_has_128_rows_of_257() {
    let o = seld(&["filterbank", "dump", "--filter", "gammatone", "--csv", "-"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 128);
    for r in rows {
        let vals: Vec<f64> = r.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 257);
        assert!(vals.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn features_extract_writes_tensor_and_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), 24_000);
    let (a, b) = (dir.path().join("a.seldt"), dir.path().join("b.seldt"));
    for out in [&a, &b] {
        let o = seld(&["--json", "features", "extract", "--filter", "bark", "--in", p(&input), "--out", p(out)]);
        assert_eq!(stdout_json(&o)["shape"], serde_json::json!([7, 100, 128]));
    }
    assert_eq!(SeldtTensor::load(&a).unwrap().dims, vec![7, 100, 128]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.seldt.manifest.json")).unwrap()).unwrap();
    let digest = m["input_sha256"][p(&input)].as_str().unwrap();
    assert_eq!(digest.len(), 64);
    assert!(m["output_sha256"][p(&a)].is_string());
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert_eq!(m["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn wrong_sample_rate_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = wav(dir.path(), 48_000);
    let out = dir.path().join("x.seldt");
    let o = seld(&["features", "extract", "--filter", "mel", "--in", p(&input), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("48000"));
}

#[test]
fn encode_then_loss_of_own_target_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let labels = labels_file(dir.path(), "seg.json", vec![label(2, 40.0, 3.0), label(3, 45.0, 3.0)]);
    let target = dir.path().join("target.seldt");
    let o = seld(&["--json", "encode", "--labels", p(&labels), "--out", p(&target)]);
    assert_eq!(stdout_json(&o)["active_cells"], 2);
    let o = seld(&["loss", "eval", "--pred", p(&target), "--labels", p(&labels)]);
    let j = stdout_json(&o);
    // The stored target is single precision.
    assert!(j["total"].as_f64().unwrap() < 1e-12);
    assert_eq!(j["per_class"].as_array().unwrap().len(), 13);
}

#[test]
fn metrics_eval_single_true_positive() {
    let dir = tempfile::tempdir().unwrap();
    let pred_labels = labels_file(dir.path(), "pred.json", vec![label(0, 10.0, 2.0)]);
    let refs = labels_file(dir.path(), "ref.json", vec![label(0, 0.0, 2.0)]);
    let pred = dir.path().join("pred.seldt");
    assert!(seld(&["encode", "--labels", p(&pred_labels), "--out", p(&pred)]).status.success());
    let (out, csv) = (dir.path().join("report.json"), dir.path().join("report.csv"));
    let o = seld(&["--json", "metrics", "eval", "--pred", p(&pred), "--ref", p(&refs), "--out", p(&out), "--csv", p(&csv)]);
    let j = stdout_json(&o);
    assert_eq!(j["f_20_1"], 100.0);
    assert!((j["ae"].as_f64().unwrap() - 10.0).abs() < 1e-4);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(file, j);
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(csv_text.lines().next(), Some("f20_1,ae,rde,seld"));
    assert!(dir.path().join("report.json.manifest.json").exists());
}

#[test]
fn model_params_reports_toy_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg(dir.path());
    let j = stdout_json(&seld(&["--json", "model", "params", "--cfg", p(&cfg)]));
    assert_eq!(j["total"], 18_719);
    let sum: u64 = j["tensors"].as_array().unwrap().iter().map(|t| t["numel"].as_u64().unwrap()).sum();
    assert_eq!(sum, 18_719);
}

#[test]
fn model_forward_respects_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg(dir.path());
    let feat = dir.path().join("feat.seldt");
    let data: Vec<f32> = (0..7 * 40 * 16).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    SeldtTensor::new(vec![7, 40, 16], data).unwrap().save(&feat).unwrap();
    let run = |out: &Path, seed: Option<&str>| {
        let args = ["model", "forward", "--cfg", p(&cfg), "--in", p(&feat), "--out", p(out)];
        let o = match seed {
            Some(s) => seld_env(&args, "SELD_SEED", s),
            None => seld(&args),
        };
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = run(&dir.path().join("a.seldt"), None);
    let b = run(&dir.path().join("b.seldt"), None);
    let c = run(&dir.path().join("c.seldt"), Some("7"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let dims = SeldtTensor::load(dir.path().join("a.seldt")).unwrap().dims;
    assert_eq!((dims[0], dims[2]), (2, 156));

    let o = seld_env(&["model", "params", "--cfg", p(&cfg)], "SELD_SEED", "x1");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn model_gradcheck_and_overfit_on_toy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_cfg(dir.path());
    let j = stdout_json(&seld(&["--json", "model", "gradcheck", "--cfg", p(&cfg), "--n-params", "30"]));
    assert_eq!(j["pass"], true);
    assert_eq!(j["n_checked"], 30);

    let seg = labels_file(dir.path(), "seg.json", vec![label(0, 30.0, 2.0), label(1, 30.0, 2.0)]);
    let trace = dir.path().join("trace.csv");
    let o = seld(&["--json", "model", "overfit", "--cfg", p(&cfg), "--seg", p(&seg), "--steps", "25", "--trace", p(&trace)]);
    let j = stdout_json(&o);
    assert!(j["final_loss"].as_f64().unwrap() < j["initial_loss"].as_f64().unwrap());
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 27);
}

#[test]
fn compare_tabulates_each_filter() {
    let dir = tempfile::tempdir().unwrap();
    let (pred_dir, ref_dir) = (dir.path().join("pred"), dir.path().join("ref"));
    std::fs::create_dir_all(&ref_dir).unwrap();
    let refs = vec![label(0, 20.0, 2.0), label(5, -60.0, 4.0)];
    let ref_file = labels_file(&ref_dir, "clip1.json", refs);
    for f in ["mel", "bark", "gammatone"] {
        std::fs::create_dir_all(pred_dir.join(f)).unwrap();
        let out = pred_dir.join(f).join("clip1.seldt");
        assert!(seld(&["encode", "--labels", p(&ref_file), "--out", p(&out)]).status.success());
    }
    let o = seld(&["compare", "--filters", "mel,bark,gammatone", "--pred-dir", p(&pred_dir), "--ref-dir", p(&ref_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "filter,f20_1,ae,rde,seld");
    assert_eq!(lines.len(), 4);
    for (line, f) in lines[1..].iter().zip(["mel", "bark", "gammatone"]) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(&cells[..4], &[f, "100.00", "0.000", "0.0000"]);
    }

    std::fs::remove_file(pred_dir.join("bark").join("clip1.seldt")).unwrap();
    let o = seld(&["compare", "--filters", "mel,bark", "--pred-dir", p(&pred_dir), "--ref-dir", p(&ref_dir)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(p(&pred_dir.join("bark").join("clip1.seldt"))));
}
