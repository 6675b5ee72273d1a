//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seld_core::labels::{AccdoaTensor, EventLabel, TargetLayout};

pub fn unit(az_deg: f64, el_deg: f64) -> [f64; 3] {
    let (az, el) = (az_deg.to_radians(), el_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

pub fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot: f64 = (0..3).map(|i| a[i] * b[i]).sum();
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Random labels with up to `max_events` sources per (class, frame).
pub fn random_labels(rng: &mut ChaCha8Rng, layout: TargetLayout, p_active: f64, max_events: usize) -> Vec<EventLabel> {
    let mut out = Vec::new();
    for frame in 0..layout.n_frames {
        for class in 0..layout.n_classes {
            if !rng.random_bool(p_active) {
                continue;
            }
            let k = rng.random_range(1..=max_events);
            for s in 0..k {
                out.push(EventLabel {
                    frame,
                    class_id: class,
                    source_id: s as i64,
                    azimuth: rng.random_range(-180.0..180.0),
                    elevation: rng.random_range(-90.0..=90.0),
                    distance: rng.random_range(0.3..12.0),
                });
            }
        }
    }
    out
}

/// Labels whose same-class, same-frame sources are at least `min_sep` degrees apart.
pub fn separated_labels(rng: &mut ChaCha8Rng, layout: TargetLayout, min_sep: f64) -> Vec<EventLabel> {
    let mut out: Vec<EventLabel> = Vec::new();
    for frame in 0..layout.n_frames {
        for class in 0..layout.n_classes {
            if !rng.random_bool(0.3) {
                continue;
            }
            let k = rng.random_range(1..=layout.n_tracks);
            let mut placed: Vec<[f64; 3]> = Vec::new();
            while placed.len() < k {
                let az = rng.random_range(-180.0..180.0);
                let el = rng.random_range(-80.0..80.0);
                let v = unit(az, el);
                if placed.iter().all(|p| angle_deg(*p, v) >= min_sep) {
                    placed.push(v);
                    out.push(EventLabel {
                        frame,
                        class_id: class,
                        source_id: placed.len() as i64,
                        azimuth: az,
                        elevation: el,
                        distance: rng.random_range(0.5..9.5),
                    });
                }
            }
        }
    }
    out
}

/// Direct ADPIT evaluation: for each cell, every surjective map from tracks
/// to that cell's events (at most `n_tracks`, lowest source ids kept),
/// squared error averaged over counted components and tracks, minimised,
/// then averaged over cells.
pub fn brute_force_adpit(pred: &AccdoaTensor<f64>, labels: &[EventLabel], d_norm: f64) -> f64 {
    let layout = pred.layout();
    let n = layout.n_tracks;
    let mut total = 0.0;
    for class in 0..layout.n_classes {
        for frame in 0..layout.n_frames {
            let mut events: Vec<&EventLabel> =
                labels.iter().filter(|l| l.class_id == class && l.frame == frame).collect();
            events.sort_by_key(|e| e.source_id);
            events.truncate(n);
            let targets: Vec<[f64; 4]> = events
                .iter()
                .map(|e| {
                    let v = unit(e.azimuth, e.elevation);
                    [v[0], v[1], v[2], (e.distance / d_norm).clamp(0.0, 1.0)]
                })
                .collect();
            let k = targets.len();
            let comps = if k > 0 { 4 } else { 3 };
            let mut best = f64::INFINITY;
            let n_maps = if k == 0 { 1 } else { k.pow(n as u32) };
            for code in 0..n_maps {
                let map: Vec<usize> = (0..n).map(|t| if k == 0 { 0 } else { (code / k.pow((n - 1 - t) as u32)) % k }).collect();
                if k > 0 && (0..k).any(|e| !map.contains(&e)) {
                    continue;
                }
                let mut loss = 0.0;
                for (track, &ev) in map.iter().enumerate() {
                    let mut sq = 0.0;
                    for comp in 0..comps {
                        let target = if k == 0 { 0.0 } else { targets[ev][comp] };
                        let d = pred.data[[comp, track, class, frame]] - target;
                        sq += d * d;
                    }
                    loss += sq / comps as f64;
                }
                best = best.min(loss / n as f64);
            }
            total += best;
        }
    }
    total / (layout.n_classes * layout.n_frames) as f64
}

/// Minimum total cost over all one-to-one pairings saturating the smaller side.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    fn go(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, rows_left: usize, cols_left: usize) -> f64 {
        if r == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        // Leave this row unmatched only if enough rows remain to fill the columns.
        if rows_left > cols_left {
            best = go(cost, r + 1, used, rows_left - 1, cols_left);
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[r][c] + go(cost, r + 1, used, rows_left - 1, cols_left - 1));
                used[c] = false;
            }
        }
        best
    }
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    go(cost, 0, &mut vec![false; cols], rows, cols)
}

pub fn random_pred(rng: &mut ChaCha8Rng, layout: TargetLayout) -> AccdoaTensor<f64> {
    let mut p = AccdoaTensor::zeros(layout);
    p.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    p
}
