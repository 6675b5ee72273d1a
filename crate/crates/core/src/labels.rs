//! Frame-level event annotations, 1-second segmentation and
//! multi-ACCDOA (+distance) target encoding.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::dsp::FeatureMap;
use crate::error::{Result, SeldError};
use crate::scalar::Scalar;

pub const N_TRACKS: usize = 3;
pub const N_CLASSES: usize = 13;
/// Components per track: x, y, z and normalised distance.
pub const N_COMPS: usize = 4;
pub const LABEL_FRAMES_PER_SECOND: usize = 20;
pub const FEATURE_FRAMES_PER_SECOND: usize = 100;
pub const DEFAULT_D_NORM: f64 = 10.0;

/// One annotated event at one 50 ms label frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLabel {
    pub frame: usize,
    pub class_id: usize,
    pub source_id: i64,
    /// Degrees in [-180, 180).
    pub azimuth: f64,
    /// Degrees in [-90, 90].
    pub elevation: f64,
    /// Metres, > 0.
    pub distance: f64,
}

impl EventLabel {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.class_id >= n_classes {
            return Err(SeldError::domain(format!(
                "class {} out of range 0..{n_classes}",
                self.class_id
            )));
        }
        if !(-180.0..180.0).contains(&self.azimuth) {
            return Err(SeldError::domain(format!("azimuth {} outside [-180, 180)", self.azimuth)));
        }
        if !(-90.0..=90.0).contains(&self.elevation) {
            return Err(SeldError::domain(format!(
                "elevation {} outside [-90, 90]",
                self.elevation
            )));
        }
        if !(self.distance.is_finite() && self.distance > 0.0) {
            return Err(SeldError::domain(format!("distance {} must be positive", self.distance)));
        }
        Ok(())
    }

    pub fn doa(&self) -> [f64; 3] {
        doa_to_cartesian(self.azimuth, self.elevation)
    }
}

/// Unit vector for an azimuth/elevation pair in degrees.
pub fn doa_to_cartesian(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (az, el) = (azimuth.to_radians(), elevation.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Azimuth and elevation in degrees of a (not necessarily unit) vector.
pub fn cartesian_to_doa(v: [f64; 3]) -> (f64, f64) {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let az = v[1].atan2(v[0]).to_degrees();
    let el = if r > 0.0 { (v[2] / r).clamp(-1.0, 1.0).asin().to_degrees() } else { 0.0 };
    (az, el)
}

/// Parse `frame,class,source,azimuth,elevation,distance` rows. A leading
/// header row starting with `frame` is skipped; blank lines are ignored.
pub fn load_labels<R: Read>(r: R) -> Result<Vec<EventLabel>> {
    load_labels_with_classes(r, N_CLASSES)
}

pub fn load_labels_with_classes<R: Read>(r: R, n_classes: usize) -> Result<Vec<EventLabel>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(i + 1);
            SeldError::Parse { line, msg: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(i + 1);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if out.is_empty() && rec.get(0).is_some_and(|f| f.eq_ignore_ascii_case("frame")) {
            continue;
        }
        let label = parse_row(&rec, n_classes).map_err(|msg| SeldError::Parse { line, msg })?;
        out.push(label);
    }
    Ok(out)
}

fn parse_row(rec: &csv::StringRecord, n_classes: usize) -> std::result::Result<EventLabel, String> {
    if rec.len() != 6 {
        return Err(format!("expected 6 fields, found {}", rec.len()));
    }
    fn field<F: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<F, String> {
        rec[i]
            .parse::<F>()
            .map_err(|_| format!("invalid {name} '{}'", &rec[i]))
    }
    let label = EventLabel {
        frame: field(rec, 0, "frame")?,
        class_id: field(rec, 1, "class")?,
        source_id: field(rec, 2, "source")?,
        azimuth: field(rec, 3, "azimuth")?,
        elevation: field(rec, 4, "elevation")?,
        distance: field(rec, 5, "distance")?,
    };
    label.validate(n_classes).map_err(|e| match e {
        SeldError::Domain(m) => m,
        other => other.to_string(),
    })?;
    Ok(label)
}

/// One fixed-length window of features with its window-local labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T> {
    pub clip_id: String,
    /// Start of the window in label frames.
    pub start_frame: usize,
    pub feature: FeatureMap<T>,
    pub labels: Vec<EventLabel>,
}

/// Cut a 100 fps feature map into non-overlapping `seg_len_s` windows and
/// re-base the 20 fps labels into each. A trailing partial window is dropped.
pub fn segment_clip<T: Scalar>(
    clip_id: &str,
    features: &FeatureMap<T>,
    labels: &[EventLabel],
    seg_len_s: f64,
) -> Vec<Segment<T>> {
    let feat_len = (seg_len_s * FEATURE_FRAMES_PER_SECOND as f64).round() as usize;
    let label_len = (seg_len_s * LABEL_FRAMES_PER_SECOND as f64).round() as usize;
    if feat_len == 0 || label_len == 0 {
        return Vec::new();
    }
    let n_seg = features.n_frames() / feat_len;
    let mut by_segment: Vec<Vec<EventLabel>> = vec![Vec::new(); n_seg];
    for l in labels {
        let s = l.frame / label_len;
        if s < n_seg {
            by_segment[s].push(EventLabel { frame: l.frame - s * label_len, ..l.clone() });
        }
    }
    by_segment
        .into_iter()
        .enumerate()
        .map(|(s, labels)| Segment {
            clip_id: clip_id.to_string(),
            start_frame: s * label_len,
            feature: features.slice_frames(s * feat_len, feat_len),
            labels,
        })
        .collect()
}

/// Extents of a multi-ACCDOA tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLayout {
    pub n_tracks: usize,
    pub n_classes: usize,
    pub n_frames: usize,
}

impl Default for TargetLayout {
    fn default() -> Self {
        Self { n_tracks: N_TRACKS, n_classes: N_CLASSES, n_frames: LABEL_FRAMES_PER_SECOND }
    }
}

impl TargetLayout {
    /// Values per frame in the flat `comp·N·C + track·C + class` order.
    pub fn frame_width(&self) -> usize {
        N_COMPS * self.n_tracks * self.n_classes
    }

    pub fn shape(&self) -> [usize; 4] {
        [N_COMPS, self.n_tracks, self.n_classes, self.n_frames]
    }
}

/// `[comp=4][track][class][frame]`; comps 0..3 are the activity-scaled DOA,
/// comp 3 the distance divided by `d_norm`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccdoaTensor<T> {
    pub data: Array4<T>,
}

impl<T: Scalar> AccdoaTensor<T> {
    pub fn zeros(layout: TargetLayout) -> Self {
        Self { data: Array4::zeros(layout.shape()) }
    }

    pub fn from_array(data: Array4<T>) -> Result<Self> {
        if data.shape()[0] != N_COMPS {
            return Err(SeldError::Shape {
                expected: vec![N_COMPS, data.shape()[1], data.shape()[2], data.shape()[3]],
                got: data.shape().to_vec(),
            });
        }
        Ok(Self { data })
    }

    pub fn layout(&self) -> TargetLayout {
        let s = self.data.shape();
        TargetLayout { n_tracks: s[1], n_classes: s[2], n_frames: s[3] }
    }

    pub fn doa(&self, track: usize, class: usize, frame: usize) -> [T; 3] {
        [
            self.data[[0, track, class, frame]],
            self.data[[1, track, class, frame]],
            self.data[[2, track, class, frame]],
        ]
    }

    pub fn distance(&self, track: usize, class: usize, frame: usize) -> T {
        self.data[[3, track, class, frame]]
    }

    /// Build from frame-major model output `[frame][comp·N·C + track·C + class]`.
    pub fn from_frame_major(values: &[T], layout: TargetLayout) -> Result<Self> {
        let width = layout.frame_width();
        if values.len() != width * layout.n_frames {
            return Err(SeldError::Shape {
                expected: vec![layout.n_frames, width],
                got: vec![values.len()],
            });
        }
        let mut data = Array4::zeros(layout.shape());
        for ((comp, track, class, frame), v) in data.indexed_iter_mut() {
            *v = values[frame * width + (comp * layout.n_tracks + track) * layout.n_classes + class];
        }
        Ok(Self { data })
    }

    pub fn to_frame_major(&self) -> Vec<T> {
        let layout = self.layout();
        let width = layout.frame_width();
        let mut out = vec![T::zero(); width * layout.n_frames];
        for ((comp, track, class, frame), &v) in self.data.indexed_iter() {
            out[frame * width + (comp * layout.n_tracks + track) * layout.n_classes + class] = v;
        }
        out
    }
}

/// The candidate targets of one (class, frame) cell. Each candidate is a
/// flat `[comp][track]` block of `4·N` values.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentCell<T> {
    /// Whether any event is present; controls the distance mask.
    pub active: bool,
    pub candidates: Vec<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignmentSet<T> {
    pub layout: TargetLayout,
    /// Row-major over `(class, frame)`.
    pub cells: Vec<AssignmentCell<T>>,
}

impl<T: Scalar> TargetAssignmentSet<T> {
    pub fn cell(&self, class: usize, frame: usize) -> &AssignmentCell<T> {
        &self.cells[class * self.layout.n_frames + frame]
    }

    pub fn cell_mut(&mut self, class: usize, frame: usize) -> &mut AssignmentCell<T> {
        let n_frames = self.layout.n_frames;
        &mut self.cells[class * n_frames + frame]
    }
}

/// All surjective maps from `n_tracks` tracks onto `k` events, as
/// `map[track] = event`, in lexicographic order (track 0 most significant).
/// `k = 1` gives the single duplicated assignment and `k = n_tracks` the
/// permutations. `k = 0` gives one empty-target assignment.
pub fn track_assignments(n_tracks: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    if k > n_tracks {
        return Vec::new();
    }
    let total = k.pow(n_tracks as u32);
    let mut out = Vec::new();
    let mut map = vec![0usize; n_tracks];
    for code in 0..total {
        let mut c = code;
        for slot in map.iter_mut().rev() {
            *slot = c % k;
            c /= k;
        }
        let mut seen = vec![false; k];
        map.iter().for_each(|&e| seen[e] = true);
        if seen.iter().all(|&s| s) {
            out.push(map.clone());
        }
    }
    out
}

/// Encode one segment with the default layout.
pub fn encode_segment<T: Scalar>(
    seg: &Segment<T>,
    d_norm: f64,
) -> (AccdoaTensor<T>, TargetAssignmentSet<T>) {
    encode_targets(&seg.labels, TargetLayout::default(), d_norm)
}

/// Auxiliary-duplicated multi-ACCDOA targets.
///
/// Per (class, frame) the active events (at most `n_tracks`, extras dropped
/// by ascending `source_id` with a warning) are spread over all tracks
/// through every surjective track map; the first map is the canonical
/// target. Labels outside the layout are dropped with a warning.
pub fn encode_targets<T: Scalar>(
    labels: &[EventLabel],
    layout: TargetLayout,
    d_norm: f64,
) -> (AccdoaTensor<T>, TargetAssignmentSet<T>) {
    let n = layout.n_tracks;
    let mut grouped: BTreeMap<(usize, usize), Vec<&EventLabel>> = BTreeMap::new();
    for l in labels {
        if l.frame >= layout.n_frames || l.class_id >= layout.n_classes {
            log::warn!(
                "label at frame {} class {} is outside the {}x{} target grid, dropped",
                l.frame,
                l.class_id,
                layout.n_classes,
                layout.n_frames
            );
            continue;
        }
        grouped.entry((l.class_id, l.frame)).or_default().push(l);
    }

    let empty = AssignmentCell { active: false, candidates: vec![vec![T::zero(); N_COMPS * n]] };
    let mut set = TargetAssignmentSet {
        layout,
        cells: vec![empty; layout.n_classes * layout.n_frames],
    };
    let mut target = AccdoaTensor::zeros(layout);

    for ((class, frame), mut events) in grouped {
        events.sort_by_key(|e| e.source_id);
        if events.len() > n {
            log::warn!(
                "{} simultaneous events of class {class} at frame {frame}; keeping the first {n} by source id",
                events.len()
            );
            events.truncate(n);
        }
        let encoded: Vec<[f64; 4]> = events
            .iter()
            .map(|e| {
                let v = e.doa();
                [v[0], v[1], v[2], (e.distance / d_norm).clamp(0.0, 1.0)]
            })
            .collect();
        let candidates: Vec<Vec<T>> = track_assignments(n, encoded.len())
            .into_iter()
            .map(|map| {
                let mut block = vec![T::zero(); N_COMPS * n];
                for (track, &ev) in map.iter().enumerate() {
                    for comp in 0..N_COMPS {
                        block[comp * n + track] = T::lit(encoded[ev][comp]);
                    }
                }
                block
            })
            .collect();
        for comp in 0..N_COMPS {
            for track in 0..n {
                target.data[[comp, track, class, frame]] = candidates[0][comp * n + track];
            }
        }
        *set.cell_mut(class, frame) = AssignmentCell { active: true, candidates };
    }
    (target, set)
}

/// JSON sidecar describing a segment's labels. `feature` optionally names a
/// SELDT file (relative to the sidecar) holding the segment's feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabels {
    #[serde(default)]
    pub clip_id: String,
    #[serde(default)]
    pub start_frame: usize,
    pub labels: Vec<EventLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelsJson {
    Sidecar(SegmentLabels),
    List(Vec<EventLabel>),
}

impl SegmentLabels {
    /// Accepts either a sidecar object or a bare array of labels.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let parsed: LabelsJson = serde_json::from_str(s)?;
        let out = match parsed {
            LabelsJson::Sidecar(s) => s,
            LabelsJson::List(labels) => SegmentLabels {
                clip_id: String::new(),
                start_frame: 0,
                labels,
                feature: None,
            },
        };
        for (i, l) in out.labels.iter().enumerate() {
            l.validate(N_CLASSES).map_err(|e| SeldError::Parse {
                line: i + 1,
                msg: format!("label #{}: {e}", i + 1),
            })?;
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
