use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use seld_core::adpit::adpit_loss;
use seld_core::dsp::{assemble_features, design_bank, read_wav, FilterBank, StftConfig, DEFAULT_SAMPLE_RATE};
use seld_core::labels::{encode_targets, TargetLayout, DEFAULT_D_NORM, N_CLASSES, N_TRACKS};
use seld_core::metrics::{
    compute_report, decode_multi_accdoa_at, events_from_labels, match_and_count, MatchCounts, MetricsConfig,
    MetricsReport,
};
use seld_core::model::train::{synthetic_features, synthetic_sample};
use seld_core::model::{gradcheck, overfit, param_specs, ModelConfig, ParamStore, Tensor, TrainSample};
use seld_core::seldt::SeldtTensor;
use seld_core::{Model32, Model64};

use crate::error::{CliError, CliResult};
use crate::inputs::{
    load_label_file, load_model_config, load_predictions, load_segment, read_seldt, require_file, split_labels,
    write_seldt,
};
use crate::manifest::Recorder;
use crate::{
    BankArgs, CompareArgs, DumpArgs, EncodeArgs, ExtractArgs, ForwardArgs, GradcheckArgs, LossArgs, MetricsArgs,
    OverfitArgs, ParamsArgs,
};

/// What a command reports: JSON for `--json`, text otherwise. A command
/// may complete its report and still fail (e.g. a gradient check above
/// tolerance).
pub struct Output {
    pub json: Value,
    pub text: String,
    pub failure: Option<CliError>,
}

impl Output {
    fn ok(json: Value, text: String) -> CliResult<Self> {
        Ok(Self { json, text, failure: None })
    }
}

fn bank(a: &BankArgs) -> CliResult<FilterBank<f64>> {
    let stft = StftConfig::default();
    Ok(design_bank(a.filter, a.bands, a.f_min, a.f_max, stft.fft_size, DEFAULT_SAMPLE_RATE)?)
}

pub fn features_extract(a: &ExtractArgs, rec: &mut Recorder) -> CliResult<Output> {
    require_file(&a.input)?;
    rec.input(&a.input);
    let clip = read_wav::<f64>(&a.input, DEFAULT_SAMPLE_RATE).map_err(|e| CliError::at(&a.input, e))?;
    let fm = assemble_features(&clip, &StftConfig::default(), &bank(&a.bank)?)?;
    write_seldt(&a.out, &SeldtTensor::from_array(&fm.data.clone().into_dyn()))?;
    rec.write(&[&a.out])?;
    let shape = fm.shape();
    Output::ok(
        json!({ "out": a.out, "filter": a.bank.filter, "shape": shape }),
        format!("wrote {} with shape {:?}", a.out.display(), shape),
    )
}

pub fn filterbank_dump(a: &DumpArgs, rec: &mut Recorder) -> CliResult<Output> {
    let fb = bank(&a.bank)?;
    let mut text = String::new();
    for row in fb.weights.rows() {
        let cells: Vec<String> = row.iter().map(|w| w.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    let (bands, bins) = fb.weights.dim();
    let to_stdout = a.csv.as_os_str() == "-";
    if to_stdout {
        std::io::stdout().write_all(text.as_bytes())?;
    } else {
        std::fs::write(&a.csv, &text).map_err(|e| CliError::at(&a.csv, e))?;
        rec.write(&[&a.csv])?;
    }
    let info = json!({
        "filter": fb.kind,
        "bands": bands,
        "bins": bins,
        "center_freqs": fb.center_freqs,
    });
    let msg = if to_stdout { String::new() } else { format!("wrote {bands}x{bins} {} weights to {}", fb.kind, a.csv.display()) };
    // Stdout already carries the CSV; JSON would corrupt it.
    Ok(Output { json: if to_stdout { Value::Null } else { info }, text: msg, failure: None })
}

pub fn encode(a: &EncodeArgs, rec: &mut Recorder) -> CliResult<Output> {
    if a.frames == 0 {
        return Err(CliError::validation("--frames must be positive"));
    }
    rec.input(&a.labels);
    let labels = load_label_file(&a.labels)?;
    let layout = TargetLayout { n_tracks: N_TRACKS, n_classes: N_CLASSES, n_frames: a.frames };
    let (target, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
    write_seldt(&a.out, &SeldtTensor::from_array(&target.data.clone().into_dyn()))?;
    rec.write(&[&a.out])?;
    let active = set.cells.iter().filter(|c| c.active).count();
    Output::ok(
        json!({ "out": a.out, "shape": layout.shape(), "labels": labels.len(), "active_cells": active }),
        format!("encoded {} labels into {:?} ({} active cells)", labels.len(), layout.shape(), active),
    )
}

pub fn loss_eval(a: &LossArgs, rec: &mut Recorder) -> CliResult<Output> {
    rec.input(&a.pred);
    rec.input(&a.labels);
    let preds = load_predictions(&a.pred)?;
    let labels = load_label_file(&a.labels)?;
    let layout = preds[0].layout();
    let per_segment = split_labels(&labels, preds.len(), layout.n_frames);
    let mut total = 0.0;
    let mut per_class = vec![0.0; layout.n_classes];
    let mut per_frame = Vec::new();
    for (pred, seg) in preds.iter().zip(&per_segment) {
        let (_, set) = encode_targets::<f64>(seg, pred.layout(), DEFAULT_D_NORM);
        let b = adpit_loss(pred, &set)?;
        total += b.total;
        per_class.iter_mut().zip(&b.per_class).for_each(|(acc, v)| *acc += v);
        per_frame.extend(b.per_frame);
    }
    let n = preds.len() as f64;
    total /= n;
    per_class.iter_mut().for_each(|v| *v /= n);
    let result = json!({ "total": total, "per_class": per_class, "per_frame": per_frame, "segments": preds.len() });
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&result)?).map_err(|e| CliError::at(out, e))?;
        rec.write(&[out])?;
    }
    let text = serde_json::to_string_pretty(&result)?;
    Output::ok(result, text)
}

fn evaluate_pairs(pairs: &[(PathBuf, PathBuf)], cfg: &MetricsConfig) -> CliResult<MetricsReport> {
    let mut counts = MatchCounts::default();
    for (pred_path, ref_path) in pairs {
        let preds = load_predictions(pred_path)?;
        let refs = events_from_labels(&load_label_file(ref_path)?);
        let mut decoded = Vec::new();
        let mut offset = 0;
        for p in &preds {
            decoded.extend(decode_multi_accdoa_at(p, cfg, offset));
            offset += p.layout().n_frames;
        }
        counts.merge(&match_and_count(&refs, &decoded, cfg));
    }
    Ok(compute_report(&counts, cfg))
}

const SUMMARY_HEADER: &str = "f20_1,ae,rde,seld";

fn summary_row(r: &MetricsReport) -> String {
    format!("{:.2},{:.3},{:.4},{:.4}", r.f_20_1, r.ae, r.rde, r.seld_score)
}

pub fn metrics_eval(a: &MetricsArgs, rec: &mut Recorder) -> CliResult<Output> {
    rec.input(&a.pred);
    rec.input(&a.reference);
    let cfg = MetricsConfig::default();
    let report = evaluate_pairs(&[(a.pred.clone(), a.reference.clone())], &cfg)?;
    std::fs::write(&a.out, serde_json::to_string_pretty(&report)?).map_err(|e| CliError::at(&a.out, e))?;
    rec.write(&[&a.out])?;
    if let Some(csv) = &a.csv {
        let text = format!("{SUMMARY_HEADER}\n{}\n", summary_row(&report));
        std::fs::write(csv, text).map_err(|e| CliError::at(csv, e))?;
        rec.write(&[csv])?;
    }
    let text = format!(
        "F(20/1) {:.2}%  AE {:.3} deg  RDE {:.4}  SELD {:.4}{}",
        report.f_20_1,
        report.ae,
        report.rde,
        report.seld_score,
        if report.undefined { "  (no reference events)" } else { "" }
    );
    Output::ok(serde_json::to_value(&report)?, text)
}

/// `[7, T, F]` with T a multiple of `t_in`, or `[S, 7, t_in, F]`, as a
/// batch of segments.
fn feature_batch(t: &SeldtTensor, cfg: &ModelConfig, path: &Path) -> CliResult<Tensor<f32>> {
    let (c, ti, f) = (cfg.in_ch, cfg.t_in, cfg.f_in);
    let x = Tensor::<f32>::from_seldt(t);
    let bad = || {
        CliError::validation(format!(
            "{}: feature dims {:?} do not fit [{c}, k*{ti}, {f}] or [S, {c}, {ti}, {f}]",
            path.display(),
            t.dims
        ))
    };
    match t.dims.as_slice() {
        &[s, cc, tt, ff] if cc == c && tt == ti && ff == f => Ok(x.reshape(&[s, c, ti, f]).map_err(|_| bad())?),
        &[cc, tt, ff] if cc == c && ff == f && tt >= ti && tt % ti == 0 => {
            let segs = tt / ti;
            let src = x.data();
            let mut out = Vec::with_capacity(src.len());
            for s in 0..segs {
                for ch in 0..c {
                    let start = (ch * tt + s * ti) * f;
                    out.extend_from_slice(&src[start..start + ti * f]);
                }
            }
            Ok(Tensor::new(vec![segs, c, ti, f], out)?)
        }
        _ => Err(bad()),
    }
}

pub fn model_forward(a: &ForwardArgs, rec: &mut Recorder) -> CliResult<Output> {
    rec.config(&a.cfg);
    rec.input(&a.input);
    let cfg = load_model_config(&a.cfg)?;
    rec.seed = Some(cfg.seed);
    let model = match &a.params {
        Some(p) => {
            require_file(p)?;
            rec.input(p);
            let store = ParamStore::<f32>::load(p).map_err(|e| CliError::at(p, e))?;
            Model32::with_params(cfg.clone(), store)?
        }
        None => Model32::new(cfg.clone(), cfg.seed)?,
    };
    let x = feature_batch(&read_seldt(&a.input)?, &cfg, &a.input)?;
    let out = model.forward(&x)?;
    write_seldt(&a.out, &out.to_seldt())?;
    rec.write(&[&a.out])?;
    Output::ok(
        json!({ "out": a.out, "shape": out.dims(), "seed": cfg.seed }),
        format!("wrote {} with shape {:?}", a.out.display(), out.dims()),
    )
}

pub fn model_gradcheck(a: &GradcheckArgs, rec: &mut Recorder) -> CliResult<Output> {
    rec.config(&a.cfg);
    let cfg = load_model_config(&a.cfg)?;
    if !(a.h > 0.0) {
        return Err(CliError::validation("--h must be positive"));
    }
    let model = Model64::new(cfg.clone(), cfg.seed)?;
    let batch = [synthetic_sample::<f64>(&cfg, cfg.seed)?];
    let report = gradcheck(&model, &batch, a.n_params, a.h, cfg.seed)?;
    let pass = report.max_rel_error < a.tol;
    let worst = report.worst.as_ref().map_or(String::from("-"), |w| format!("{}[{}]", w.param, w.index));
    let text = format!(
        "{} parameters, h={}, max relative error {:.3e} at {} (tolerance {:.1e}): {}",
        report.n_checked,
        report.h,
        report.max_rel_error,
        worst,
        a.tol,
        if pass { "PASS" } else { "FAIL" }
    );
    let mut j = serde_json::to_value(&report)?;
    j["pass"] = json!(pass);
    j["tolerance"] = json!(a.tol);
    let failure = (!pass).then(|| {
        CliError::validation(format!("gradient check failed: {:.3e} >= {:.1e}", report.max_rel_error, a.tol))
    });
    Ok(Output { json: j, text, failure })
}

pub fn model_overfit(a: &OverfitArgs, rec: &mut Recorder) -> CliResult<Output> {
    rec.config(&a.cfg);
    rec.input(&a.seg);
    let cfg = load_model_config(&a.cfg)?;
    rec.seed = Some(cfg.seed);
    let seg = load_segment(&a.seg)?;
    let features = match &seg.feature {
        Some(rel) => {
            let path = a.seg.parent().unwrap_or(Path::new(".")).join(rel);
            rec.input(&path);
            let t = read_seldt(&path)?;
            let expected = [cfg.in_ch, cfg.t_in, cfg.f_in];
            if t.dims != expected {
                return Err(CliError::validation(format!(
                    "{}: feature dims {:?}, model expects {:?}",
                    path.display(),
                    t.dims,
                    expected
                )));
            }
            Tensor::<f64>::from_seldt(&t)
        }
        None => synthetic_features(&cfg, cfg.seed),
    };
    let batch = [TrainSample::from_labels(&cfg, features, &seg.labels)?];
    let mut model = Model64::new(cfg.clone(), cfg.seed)?;
    let trace = overfit(&mut model, &batch, a.steps, a.lr)?;

    let mut outputs: Vec<&Path> = Vec::new();
    if let Some(path) = &a.trace {
        let mut csv = String::from("step,loss\n");
        for (i, l) in trace.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        csv.push_str(&format!("{},{}\n", trace.losses.len(), trace.final_loss));
        std::fs::write(path, csv).map_err(|e| CliError::at(path, e))?;
        outputs.push(path);
    }
    if let Some(path) = &a.save {
        model.params.save(path).map_err(|e| CliError::at(path, e))?;
        outputs.push(path);
    }
    if !outputs.is_empty() {
        rec.write(&outputs)?;
    }
    Output::ok(
        json!({
            "steps": a.steps,
            "lr": a.lr,
            "seed": cfg.seed,
            "initial_loss": trace.initial_loss(),
            "final_loss": trace.final_loss,
            "ratio": trace.ratio(),
        }),
        format!(
            "{} steps at lr {}: loss {:.6} -> {:.6} (ratio {:.4})",
            a.steps,
            a.lr,
            trace.initial_loss(),
            trace.final_loss,
            trace.ratio()
        ),
    )
}

pub fn model_params(a: &ParamsArgs, rec: &mut Recorder) -> CliResult<Output> {
    rec.config(&a.cfg);
    let cfg = load_model_config(&a.cfg)?;
    cfg.validate()?;
    let specs = param_specs(&cfg);
    let total: usize = specs.iter().map(|s| s.numel()).sum();
    let mut groups: Vec<(String, usize)> = Vec::new();
    for s in &specs {
        let group = s.name.split('.').next().unwrap_or("").to_string();
        match groups.last_mut() {
            Some((g, n)) if *g == group => *n += s.numel(),
            _ => groups.push((group, s.numel())),
        }
    }
    let mut text = format!("{total} parameters\n");
    for (g, n) in &groups {
        text.push_str(&format!("  {g:<10} {n}\n"));
    }
    let tensors: Vec<Value> = specs.iter().map(|s| json!({ "name": s.name, "dims": s.dims, "numel": s.numel() })).collect();
    Output::ok(json!({ "total": total, "tensors": tensors }), text)
}

/// Reference clips in `dir`: `<clip>.json` or `<clip>.csv`, sorted by name.
fn reference_clips(dir: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::at(dir, e))?;
    let mut clips = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::at(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("json" | "csv")) && !path.to_string_lossy().ends_with(".manifest.json") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            clips.push((stem, path));
        }
    }
    clips.sort();
    if clips.is_empty() {
        return Err(CliError::validation(format!("{}: no .json or .csv reference files", dir.display())));
    }
    Ok(clips)
}

pub fn compare(a: &CompareArgs, rec: &mut Recorder) -> CliResult<Output> {
    let cfg = MetricsConfig::default();
    let clips = reference_clips(&a.ref_dir)?;
    let mut csv = format!("filter,{SUMMARY_HEADER}\n");
    let mut rows = Vec::new();
    for filter in &a.filters {
        let pairs: Vec<(PathBuf, PathBuf)> = clips
            .iter()
            .map(|(stem, r)| (a.pred_dir.join(filter.name()).join(format!("{stem}.seldt")), r.clone()))
            .collect();
        for (p, r) in &pairs {
            require_file(p)?;
            rec.input(p);
            rec.input(r);
        }
        let report = evaluate_pairs(&pairs, &cfg)?;
        csv.push_str(&format!("{filter},{}\n", summary_row(&report)));
        rows.push(json!({
            "filter": filter,
            "f20_1": report.f_20_1,
            "ae": report.ae,
            "rde": report.rde,
            "seld": report.seld_score,
        }));
    }
    match &a.out {
        Some(out) => {
            std::fs::write(out, &csv).map_err(|e| CliError::at(out, e))?;
            rec.write(&[out])?;
            Output::ok(json!(rows), format!("wrote {} rows to {}", rows.len(), out.display()))
        }
        None => Output::ok(json!(rows), csv),
    }
}
