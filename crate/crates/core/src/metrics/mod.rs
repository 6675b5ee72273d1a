//! Decoding of multi-ACCDOA output and location-aware detection metrics:
//! F(20°/1), angular error, relative distance error and the SELD score.

mod hungarian;

pub use hungarian::{assignment_cost, hungarian};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::labels::{AccdoaTensor, EventLabel, DEFAULT_D_NORM};
use crate::scalar::Scalar;

/// A decoded (or reference) event at one label frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub frame: usize,
    pub class_id: usize,
    /// Unit vector.
    pub doa: [f64; 3],
    /// Metres, ≥ 0.
    pub distance: f64,
}

impl DetectionEvent {
    pub fn from_label(l: &EventLabel) -> Self {
        Self { frame: l.frame, class_id: l.class_id, doa: l.doa(), distance: l.distance }
    }
}

pub fn events_from_labels(labels: &[EventLabel]) -> Vec<DetectionEvent> {
    labels.iter().map(DetectionEvent::from_label).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    /// Angular threshold in degrees.
    pub t_doa: f64,
    /// Relative distance threshold.
    pub t_rd: f64,
    pub activity_threshold: f64,
    /// Same-class detections on different tracks closer than this (degrees)
    /// are merged.
    pub merge_angle: f64,
    /// Distance scale of the fourth ACCDOA component, metres.
    pub d_norm: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            t_doa: 20.0,
            t_rd: 1.0,
            activity_threshold: 0.5,
            merge_angle: 15.0,
            d_norm: DEFAULT_D_NORM,
        }
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = norm3(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Angle between two unit vectors, degrees in [0, 180].
pub fn angular_error(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Threshold each track's ACCDOA vector, then merge same-class detections
/// within `merge_angle` of each other (mean direction renormalised, mean
/// distance). Frames are offset by `frame_offset`.
pub fn decode_multi_accdoa_at<T: Scalar>(
    pred: &AccdoaTensor<T>,
    cfg: &MetricsConfig,
    frame_offset: usize,
) -> Vec<DetectionEvent> {
    struct Group {
        sum: [f64; 3],
        dist: f64,
        count: usize,
    }
    let layout = pred.layout();
    let mut out = Vec::new();
    for frame in 0..layout.n_frames {
        for class in 0..layout.n_classes {
            let mut groups: Vec<Group> = Vec::new();
            for track in 0..layout.n_tracks {
                let v = pred.doa(track, class, frame).map(|x| x.as_f64());
                let activity = norm3(v);
                if !(activity > cfg.activity_threshold) {
                    continue;
                }
                let doa = normalized(v);
                let dist = (pred.distance(track, class, frame).as_f64() * cfg.d_norm).max(0.0);
                let hit = groups
                    .iter_mut()
                    .find(|g| angular_error(normalized(g.sum), doa) <= cfg.merge_angle);
                match hit {
                    Some(g) => {
                        (0..3).for_each(|i| g.sum[i] += doa[i]);
                        g.dist += dist;
                        g.count += 1;
                    }
                    None => groups.push(Group { sum: doa, dist, count: 1 }),
                }
            }
            out.extend(groups.into_iter().map(|g| DetectionEvent {
                frame: frame + frame_offset,
                class_id: class,
                doa: normalized(g.sum),
                distance: g.dist / g.count as f64,
            }));
        }
    }
    out
}

pub fn decode_multi_accdoa<T: Scalar>(pred: &AccdoaTensor<T>, cfg: &MetricsConfig) -> Vec<DetectionEvent> {
    decode_multi_accdoa_at(pred, cfg, 0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Additive detection/localisation statistics. `merge` is associative and
/// commutative, so partial counts over disjoint frames may be summed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub n_ref: usize,
    /// Sum of angular errors (degrees) over all class-matched pairs.
    pub sum_angle: f64,
    /// Sum of relative distance errors over class-matched pairs with a
    /// positive reference distance.
    pub sum_rde: f64,
    pub n_matched: usize,
    pub n_matched_with_distance: usize,
    /// Matched pairs whose reference distance was 0 (RDE undefined).
    pub n_rde_skipped: usize,
    pub per_class: BTreeMap<usize, ClassCounts>,
}

impl MatchCounts {
    pub fn merge(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.n_ref += other.n_ref;
        self.sum_angle += other.sum_angle;
        self.sum_rde += other.sum_rde;
        self.n_matched += other.n_matched;
        self.n_matched_with_distance += other.n_matched_with_distance;
        self.n_rde_skipped += other.n_rde_skipped;
        for (c, cc) in &other.per_class {
            let e = self.per_class.entry(*c).or_default();
            e.tp += cc.tp;
            e.fp += cc.fp;
            e.fn_ += cc.fn_;
        }
    }
}

fn group_by_frame_class(events: &[DetectionEvent]) -> BTreeMap<(usize, usize), Vec<&DetectionEvent>> {
    let mut m: BTreeMap<(usize, usize), Vec<&DetectionEvent>> = BTreeMap::new();
    for e in events {
        m.entry((e.frame, e.class_id)).or_default().push(e);
    }
    m
}

/// Optimal per-(frame, class) matching and counting.
///
/// Within each cell references and predictions are paired one-to-one to
/// minimise the total angular error. A pair is a true positive when its
/// angle is at most `t_doa` and `|d̂ - d| ≤ t_rd·d`; a pair failing either
/// test counts as one FN and one FP. Angles and relative distance errors
/// accumulate over every pair regardless of the thresholds. Substitutions,
/// deletions and insertions are derived per frame from that frame's FN and
/// FP totals.
pub fn match_and_count(
    refs: &[DetectionEvent],
    preds: &[DetectionEvent],
    cfg: &MetricsConfig,
) -> MatchCounts {
    let ref_cells = group_by_frame_class(refs);
    let pred_cells = group_by_frame_class(preds);
    let mut keys: Vec<(usize, usize)> = ref_cells.keys().chain(pred_cells.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();

    let mut counts = MatchCounts::default();
    let mut per_frame: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let none: Vec<&DetectionEvent> = Vec::new();
    for key in keys {
        let (frame, class) = key;
        let r = ref_cells.get(&key).unwrap_or(&none);
        let p = pred_cells.get(&key).unwrap_or(&none);
        let cost: Vec<Vec<f64>> = r
            .iter()
            .map(|re| p.iter().map(|pe| angular_error(re.doa, pe.doa)).collect())
            .collect();
        let assignment = if r.is_empty() || p.is_empty() { vec![None; r.len()] } else { hungarian(&cost) };

        let mut tp = 0;
        for (i, j) in assignment.iter().enumerate() {
            let Some(j) = *j else { continue };
            let angle = cost[i][j];
            let (d_ref, d_pred) = (r[i].distance, p[j].distance);
            counts.sum_angle += angle;
            counts.n_matched += 1;
            if d_ref > 0.0 {
                counts.sum_rde += (d_pred - d_ref).abs() / d_ref;
                counts.n_matched_with_distance += 1;
            } else {
                counts.n_rde_skipped += 1;
                log::warn!("reference distance 0 at frame {frame} class {class}, RDE skipped");
            }
            if angle <= cfg.t_doa && (d_pred - d_ref).abs() <= cfg.t_rd * d_ref {
                tp += 1;
            }
        }
        let fn_ = r.len() - tp;
        let fp = p.len() - tp;
        counts.tp += tp;
        counts.fn_ += fn_;
        counts.fp += fp;
        counts.n_ref += r.len();
        let cc = counts.per_class.entry(class).or_default();
        cc.tp += tp;
        cc.fn_ += fn_;
        cc.fp += fp;
        let f = per_frame.entry(frame).or_default();
        f.0 += fn_;
        f.1 += fp;
    }
    for (fn_, fp) in per_frame.into_values() {
        counts.substitutions += fn_.min(fp);
        counts.deletions += fn_.saturating_sub(fp);
        counts.insertions += fp.saturating_sub(fn_);
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubMetrics {
    pub er_20: f64,
    /// F-score as a fraction.
    pub f_20: f64,
    /// Degrees.
    pub le_cd: f64,
    pub lr_cd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent.
    pub f_20_1: f64,
    /// Degrees.
    pub ae: f64,
    pub rde: f64,
    pub seld_score: f64,
    pub sub: SubMetrics,
    /// Set when there are no reference events; ratios with a zero
    /// denominator are then reported as 0.
    #[serde(default)]
    pub undefined: bool,
    /// Per-class F-score (fraction), keyed by class id.
    #[serde(default)]
    pub per_class_f: BTreeMap<usize, f64>,
}

/// `(ER + 2 - F - LR + LE/180) / 4`.
pub fn seld_score(er: f64, f: f64, lr: f64, le_deg: f64) -> f64 {
    (er + 2.0 - f - lr + le_deg / 180.0) / 4.0
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 { num / den } else { 0.0 }
}

pub fn compute_report(counts: &MatchCounts, _cfg: &MetricsConfig) -> MetricsReport {
    let (tp, fp, fn_) = (counts.tp as f64, counts.fp as f64, counts.fn_ as f64);
    let f = ratio(2.0 * tp, 2.0 * tp + fp + fn_);
    let ae = if counts.n_matched > 0 { counts.sum_angle / counts.n_matched as f64 } else { 180.0 };
    let rde = if counts.n_matched_with_distance > 0 {
        counts.sum_rde / counts.n_matched_with_distance as f64
    } else {
        1.0
    };
    let lr = ratio(tp, tp + fn_);
    let er = ratio(
        (counts.substitutions + counts.deletions + counts.insertions) as f64,
        counts.n_ref as f64,
    );
    let per_class_f = counts
        .per_class
        .iter()
        .map(|(&c, cc)| {
            let tp = cc.tp as f64;
            (c, ratio(2.0 * tp, 2.0 * tp + cc.fp as f64 + cc.fn_ as f64))
        })
        .collect();
    MetricsReport {
        f_20_1: 100.0 * f,
        ae,
        rde,
        seld_score: seld_score(er, f, lr, ae),
        sub: SubMetrics { er_20: er, f_20: f, le_cd: ae, lr_cd: lr },
        undefined: counts.n_ref == 0,
        per_class_f,
    }
}

/// Decode, match and report in one call.
pub fn evaluate<T: Scalar>(
    preds: &[AccdoaTensor<T>],
    refs: &[DetectionEvent],
    cfg: &MetricsConfig,
) -> MetricsReport {
    let mut decoded = Vec::new();
    let mut offset = 0;
    for p in preds {
        decoded.extend(decode_multi_accdoa_at(p, cfg, offset));
        offset += p.layout().n_frames;
    }
    compute_report(&match_and_count(refs, &decoded, cfg), cfg)
}
