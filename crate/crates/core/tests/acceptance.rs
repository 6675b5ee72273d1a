//! Acceptance suite: one PASS/FAIL line per criterion, tolerances inline.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_core::adpit::adpit_loss;
use seld_core::dsp::{
    assemble_features, design_bank, erb, hz_to_bark, hz_to_mel, read_wav, write_wav_f32, AudioClip, FilterKind,
    StftConfig,
};
use seld_core::labels::{encode_targets, AccdoaTensor, EventLabel, TargetLayout, DEFAULT_D_NORM};
use seld_core::metrics::{
    assignment_cost, compute_report, decode_multi_accdoa, evaluate, events_from_labels, hungarian, match_and_count,
    seld_score, DetectionEvent, MetricsConfig,
};
use seld_core::model::train::{split_output, synthetic_sample};
use seld_core::model::{gradcheck, overfit, param_count, Model, ModelConfig, Tensor};
use seld_core::seldt::SeldtTensor;

type Outcome = (bool, String);

fn foa_clip(seconds: f64, seed: u64) -> AudioClip<f32> {
    let sr = 24_000usize;
    let n = (seconds * sr as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = common::unit(45.0, 10.0);
    let mut w = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr as f64;
        let tone = 0.3 * (std::f64::consts::TAU * 440.0 * t).sin() + 0.2 * (std::f64::consts::TAU * 3100.0 * t).sin();
        w.push(tone + 0.05 * rng.random_range(-1.0..1.0));
    }
    let ch = |g: f64| w.iter().map(|&s| (s * g) as f32).collect::<Vec<f32>>();
    AudioClip::new(vec![ch(1.0), ch(dir[0]), ch(dir[1]), ch(dir[2])], sr as u32).unwrap()
}

fn criterion_1() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.wav");
    write_wav_f32(&path, &foa_clip(1.0, 1)).unwrap();
    let mut worst = 0.0f64;
    let mut ok = true;
    let mut shapes = Vec::new();
    for kind in FilterKind::ALL {
        let t0 = Instant::now();
        let clip = read_wav::<f32>(&path, 24_000).unwrap();
        let cfg = StftConfig::default();
        let bank = design_bank(kind, 128, 50.0, 12_000.0, cfg.fft_size, 24_000).unwrap();
        let fm = assemble_features(&clip, &cfg, &bank).unwrap();
        worst = worst.max(t0.elapsed().as_secs_f64());
        ok &= fm.shape() == [7, 100, 128] && fm.data.iter().all(|v| v.is_finite());
        shapes.push(format!("{}={:?}", kind.name(), fm.shape()));
    }
    ok &= worst < 1.0;
    (ok, format!("{}; slowest clip {:.3} s (limit 1 s)", shapes.join(" "), worst))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (fft, sr) = (512usize, 24_000u32);
    let mut failures = Vec::new();
    let trials = 300;
    for trial in 0..trials {
        let kind = FilterKind::ALL[trial % 3];
        let f_min = rng.random_range(0.0..2000.0);
        let f_max = rng.random_range(f_min + 500.0..=12_000.0);
        let n_bands = rng.random_range(2..=160);
        let bank = design_bank::<f64>(kind, n_bands, f_min, f_max, fft, sr).unwrap();
        let nonneg = bank.weights.iter().all(|&w| w >= 0.0 && w.is_finite());
        let monotone = bank.center_freqs.windows(2).all(|p| p[1] > p[0]);
        let covered = (0..bank.n_bins()).all(|k| {
            let f = k as f64 * sr as f64 / fft as f64;
            !(f_min..=f_max).contains(&f) || bank.weights.column(k).iter().any(|&w| w > 0.0)
        });
        if !(nonneg && monotone && covered) {
            failures.push(format!("{kind} n={n_bands} [{f_min:.1},{f_max:.1}]"));
        }
    }
    // Scale formulas evaluated independently, then against the published constants.
    let mel = 2595.0 * (1.0f64 + 1000.0 / 700.0).log10();
    let bark = 26.81 * 1000.0 / (1960.0 + 1000.0) - 0.53;
    let erb_1k = 24.7 * (4.37 * 1000.0 / 1000.0 + 1.0);
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let spots = [
        ("mel(1000)", hz_to_mel(1000.0), mel, 1000.0),
        ("bark(1000)", hz_to_bark(1000.0), bark, 8.527),
        ("erb(1000)", erb(1000.0), erb_1k, 132.64),
    ];
    let mut spot_ok = true;
    let mut spot_txt = Vec::new();
    for (name, lib, oracle, published) in spots {
        let e = rel(lib, published);
        spot_ok &= rel(lib, oracle) < 1e-12 && e < 1e-3;
        spot_txt.push(format!("{name}={lib:.4} (rel {e:.1e})"));
    }
    let ok = failures.is_empty() && spot_ok;
    (
        ok,
        format!(
            "{trials} random banks, {} invariant failures {:?}; {} (tol 1e-3 rel)",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>(),
            spot_txt.join(", ")
        ),
    )
}

fn criterion_3() -> Outcome {
    let layout = TargetLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut max_diff, mut max_perm_diff) = (0.0f64, 0.0f64);
    let n = 1000;
    for _ in 0..n {
        let labels = common::random_labels(&mut rng, layout, 0.3, 3);
        let (_, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
        let pred = common::random_pred(&mut rng, layout);
        let lib = adpit_loss(&pred, &set).unwrap().total;
        let oracle = common::brute_force_adpit(&pred, &labels, DEFAULT_D_NORM);
        max_diff = max_diff.max((lib - oracle).abs());
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[rng.random_range(0..6)];
        let mut permuted = AccdoaTensor::zeros(layout);
        for ((comp, track, class, frame), v) in permuted.data.indexed_iter_mut() {
            *v = pred.data[[comp, perm[track], class, frame]];
        }
        let lib_perm = adpit_loss(&permuted, &set).unwrap().total;
        max_perm_diff = max_perm_diff.max((lib_perm - lib).abs());
    }
    let ok = max_diff <= 1e-9 && max_perm_diff <= 1e-12;
    (ok, format!("{n} instances: max |loss - oracle| = {max_diff:.1e} (tol 1e-9), max permutation change {max_perm_diff:.1e} (tol 1e-12)"))
}

fn ev(az: f64, d: f64) -> DetectionEvent {
    DetectionEvent { frame: 0, class_id: 3, doa: common::unit(az, 0.0), distance: d }
}

fn criterion_4() -> Outcome {
    let cfg = MetricsConfig::default();
    let single = compute_report(&match_and_count(&[ev(0.0, 2.0)], &[ev(10.0, 2.0)], &cfg), &cfg);
    let over = compute_report(&match_and_count(&[ev(0.0, 2.0)], &[ev(25.0, 2.0)], &cfg), &cfg);
    let fixtures_ok = (single.f_20_1 - 100.0).abs() < 1e-9
        && (single.ae - 10.0).abs() < 1e-9
        && single.rde == 0.0
        && over.f_20_1 == 0.0
        && (over.ae - 25.0).abs() < 1e-9;
    let endpoints_ok = seld_score(0.0, 1.0, 1.0, 0.0) == 0.0 && seld_score(1.0, 0.0, 0.0, 180.0) == 1.0;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut valid = true;
    let frames = 1000;
    for _ in 0..frames {
        let (r, c) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let cost: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0.0..180.0)).collect()).collect();
        let a = hungarian(&cost);
        let mut used = vec![false; c];
        let mut pairs = 0;
        for j in a.iter().flatten() {
            valid &= !std::mem::replace(&mut used[*j], true);
            pairs += 1;
        }
        valid &= pairs == r.min(c);
        worst = worst.max((assignment_cost(&cost, &a) - common::brute_force_assignment(&cost)).abs());
    }
    let ok = fixtures_ok && endpoints_ok && valid && worst < 1e-9;
    (
        ok,
        format!(
            "single-TP F={:.1}% AE={:.2} RDE={:.2}; over-threshold F={:.1}% AE={:.2}; endpoints {}/{}; Hungarian vs brute force on {frames} frames max gap {worst:.1e} (tol 1e-9)",
            single.f_20_1,
            single.ae,
            single.rde,
            over.f_20_1,
            over.ae,
            seld_score(0.0, 1.0, 1.0, 0.0),
            seld_score(1.0, 0.0, 0.0, 180.0)
        ),
    )
}

fn criterion_5() -> Outcome {
    let layout = TargetLayout::default();
    let cfg = MetricsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut max_doa, mut max_dist) = (0.0f64, 0.0f64);
    let mut structure_ok = true;
    let sets = 200;
    for _ in 0..sets {
        let labels = common::separated_labels(&mut rng, layout, 2.0 * cfg.merge_angle);
        let (target, _) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
        let decoded = decode_multi_accdoa(&target, &cfg);
        structure_ok &= decoded.len() == labels.len();
        for l in &labels {
            let v = common::unit(l.azimuth, l.elevation);
            let best = decoded
                .iter()
                .filter(|d| d.frame == l.frame && d.class_id == l.class_id)
                .min_by(|a, b| common::angle_deg(a.doa, v).total_cmp(&common::angle_deg(b.doa, v)));
            match best {
                Some(d) => {
                    let e = (0..3).map(|i| (d.doa[i] - v[i]).abs()).fold(0.0, f64::max);
                    max_doa = max_doa.max(e);
                    max_dist = max_dist.max((d.distance - l.distance).abs());
                }
                None => structure_ok = false,
            }
        }
    }
    let ok = structure_ok && max_doa < 1e-6 && max_dist < 1e-5;
    (ok, format!("{sets} label sets: classes/frames exact={structure_ok}, max DOA component error {max_doa:.1e} (tol 1e-6), max distance error {max_dist:.1e} m (tol 1e-5)"))
}

fn single_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

fn criterion_6() -> Outcome {
    let cfg = ModelConfig::toy();
    let t0 = Instant::now();
    let report = single_thread(|| {
        let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
        let batch = [synthetic_sample::<f64>(&cfg, 0).unwrap()];
        gradcheck(&model, &batch, 200, 1e-4, 6).unwrap()
    });
    let secs = t0.elapsed().as_secs_f64();
    let ok = report.n_checked >= 200 && report.max_rel_error < 1e-4 && secs < 120.0;
    (
        ok,
        format!(
            "{} parameters, h={}, max relative error {:.2e} (tol 1e-4, floor 1e-6) at {}; {:.1} s on one thread (limit 120 s)",
            report.n_checked,
            report.h,
            report.max_rel_error,
            report.worst.map_or(String::new(), |w| format!("{}[{}]", w.param, w.index)),
            secs
        ),
    )
}

fn criterion_7() -> Outcome {
    let cfg = ModelConfig::toy();
    let run = || {
        single_thread(|| {
            let mut model = Model::<f64>::new(cfg.clone(), 0).unwrap();
            let batch = [synthetic_sample::<f64>(&cfg, 0).unwrap()];
            overfit(&mut model, &batch, 500, 1e-2).unwrap()
        })
    };
    let t0 = Instant::now();
    let a = run();
    let secs = t0.elapsed().as_secs_f64();
    let b = run();
    let ok = a.ratio() <= 0.1 && a == b && secs < 300.0;
    (
        ok,
        format!(
            "500 GD steps, lr 1e-2: loss {:.4} -> {:.4} (ratio {:.3}, limit 0.1); repeat run identical={}; {:.1} s (limit 300 s)",
            a.initial_loss(),
            a.final_loss,
            a.ratio(),
            a == b,
            secs
        ),
    )
}

fn criterion_8() -> Outcome {
    let full = ModelConfig::default();
    let with = param_count(&full);
    let without = param_count(&ModelConfig { use_scconv: false, ..full });
    let ok = (430_000..=710_000).contains(&with) && with > without;
    (ok, format!("default config {with} parameters (window [430000, 710000]); without SCConv {without}"))
}

fn pipeline_once(dir: &std::path::Path, refs: &[EventLabel]) -> (Vec<u8>, Vec<u8>, String) {
    let wav = dir.join("e2e.wav");
    write_wav_f32(&wav, &foa_clip(1.0, 9)).unwrap();
    let clip = read_wav::<f32>(&wav, 24_000).unwrap();
    let cfg = StftConfig::default();
    let bank = design_bank(FilterKind::Mel, 128, 50.0, 12_000.0, cfg.fft_size, 24_000).unwrap();
    let fm = assemble_features(&clip, &cfg, &bank).unwrap();
    let mut feat_bytes = Vec::new();
    SeldtTensor::from_array(&fm.data.clone().into_dyn()).write_to(&mut feat_bytes).unwrap();

    let feat = SeldtTensor::read_from(&feat_bytes[..]).unwrap();
    let model_cfg = ModelConfig { seed: 42, ..ModelConfig::default() };
    let model = Model::<f32>::new(model_cfg.clone(), model_cfg.seed).unwrap();
    let x = Tensor::<f32>::from_seldt(&feat).reshape(&[1, 7, 100, 128]).unwrap();
    let out = model.forward(&x).unwrap();
    let mut pred_bytes = Vec::new();
    out.to_seldt().write_to(&mut pred_bytes).unwrap();

    let preds = split_output(&out, &model_cfg).unwrap();
    let report = evaluate(&preds, &events_from_labels(refs), &MetricsConfig::default());
    (feat_bytes, pred_bytes, serde_json::to_string(&report).unwrap())
}

fn criterion_9() -> Outcome {
    let refs = vec![
        EventLabel { frame: 3, class_id: 1, source_id: 0, azimuth: 45.0, elevation: 10.0, distance: 2.0 },
        EventLabel { frame: 4, class_id: 1, source_id: 0, azimuth: 45.0, elevation: 10.0, distance: 2.0 },
    ];
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = pipeline_once(d1.path(), &refs);
    let b = pipeline_once(d2.path(), &refs);
    let ok = a == b;
    (
        ok,
        format!(
            "features {} bytes identical={}, predictions {} bytes identical={}, metrics JSON identical={}",
            a.0.len(),
            a.0 == b.0,
            a.1.len(),
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("feature map shape and speed", criterion_1),
        ("filter-bank invariants and scale formulas", criterion_2),
        ("ADPIT loss vs brute-force oracle", criterion_3),
        ("metric fixtures and Hungarian matching", criterion_4),
        ("encode/decode round trip", criterion_5),
        ("model gradient check", criterion_6),
        ("overfit demo", criterion_7),
        ("parameter count", criterion_8),
        ("end-to-end determinism", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if !ok {
            failed += 1;
        }
        println!("criterion {} {}: {} - {}", i + 1, if ok { "PASS" } else { "FAIL" }, name, detail);
    }
    println!("acceptance: {} passed, {} failed", criteria.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
