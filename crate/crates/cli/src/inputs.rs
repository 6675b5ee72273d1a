use std::path::Path;

use seld_core::labels::{load_labels, AccdoaTensor, EventLabel, SegmentLabels, TargetLayout, N_COMPS, N_TRACKS};
use seld_core::model::ModelConfig;
use seld_core::seldt::SeldtTensor;

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "SELD_SEED";

pub fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::validation(format!("{SEED_ENV}='{s}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(format!("{}: no such file", path.display())))
    }
}

pub fn read_seldt(path: &Path) -> CliResult<SeldtTensor> {
    require_file(path)?;
    SeldtTensor::load(path).map_err(|e| CliError::at(path, e))
}

pub fn write_seldt(path: &Path, t: &SeldtTensor) -> CliResult<()> {
    t.save(path).map_err(|e| CliError::at(path, e))
}

/// Model configuration with `SELD_SEED` applied.
pub fn load_model_config(path: &Path) -> CliResult<ModelConfig> {
    require_file(path)?;
    let mut cfg = ModelConfig::load(path).map_err(|e| CliError::at(path, e))?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Labels from a CSV file or a JSON sidecar (object or bare array).
pub fn load_label_file(path: &Path) -> CliResult<Vec<EventLabel>> {
    Ok(load_segment(path)?.labels)
}

pub fn load_segment(path: &Path) -> CliResult<SegmentLabels> {
    require_file(path)?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let file = std::fs::File::open(path).map_err(|e| CliError::at(path, e))?;
        let labels = load_labels(file).map_err(|e| CliError::at(path, e))?;
        Ok(SegmentLabels { clip_id: String::new(), start_frame: 0, labels, feature: None })
    } else {
        SegmentLabels::load(path).map_err(|e| CliError::at(path, e))
    }
}

/// Prediction tensors, one per segment. Accepted layouts: `[4, N, C, T]`
/// ACCDOA, or frame-major model output `[T, 4·N·C]` / `[S, T, 4·N·C]`
/// with N = 3 tracks.
pub fn load_predictions(path: &Path) -> CliResult<Vec<AccdoaTensor<f64>>> {
    let t = read_seldt(path)?;
    let bad = |why: &str| CliError::validation(format!("{}: dims {:?}: {why}", path.display(), t.dims));
    let data: Vec<f64> = t.data.iter().map(|&v| f64::from(v)).collect();
    match t.dims.as_slice() {
        &[comps, _, _, _] if comps == N_COMPS => {
            let arr = t.to_array::<f64>().into_dimensionality().map_err(|_| bad("not rank 4"))?;
            Ok(vec![AccdoaTensor::from_array(arr).map_err(|e| CliError::at(path, e))?])
        }
        &[frames, width] => frame_major(&data, 1, frames, width).ok_or_else(|| bad("width is not a multiple of 12")),
        &[segs, frames, width] => {
            frame_major(&data, segs, frames, width).ok_or_else(|| bad("width is not a multiple of 12"))
        }
        _ => Err(bad("expected [4, N, C, T], [T, W] or [S, T, W]")),
    }
}

fn frame_major(data: &[f64], segs: usize, frames: usize, width: usize) -> Option<Vec<AccdoaTensor<f64>>> {
    if width == 0 || width % (N_COMPS * N_TRACKS) != 0 || frames == 0 {
        return None;
    }
    let layout = TargetLayout { n_tracks: N_TRACKS, n_classes: width / (N_COMPS * N_TRACKS), n_frames: frames };
    let per = frames * width;
    (0..segs).map(|s| AccdoaTensor::from_frame_major(&data[s * per..(s + 1) * per], layout).ok()).collect()
}

/// Split clip-level labels into per-segment, segment-local label lists.
pub fn split_labels(labels: &[EventLabel], segments: usize, frames: usize) -> Vec<Vec<EventLabel>> {
    let mut out = vec![Vec::new(); segments];
    for l in labels {
        let s = l.frame / frames;
        if s < segments {
            out[s].push(EventLabel { frame: l.frame % frames, ..l.clone() });
        } else {
            log::warn!("label at frame {} lies beyond the {} predicted frames, ignored", l.frame, segments * frames);
        }
    }
    out
}
