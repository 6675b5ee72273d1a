//! Auxiliary-duplicating permutation-invariant MSE over multi-ACCDOA cells.
//!
//! For each (class, frame) the loss is the minimum, over the cell's
//! candidate targets, of the track-averaged MSE; the total is the mean of
//! those minima. DOA components are always counted, the distance component
//! only where the cell is active.

use serde::Serialize;

use crate::error::{Result, SeldError};
use crate::labels::{AccdoaTensor, TargetAssignmentSet, N_COMPS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Mean over frames of each class's selected cell loss.
    pub per_class: Vec<T>,
    /// Mean over classes for each frame.
    pub per_frame: Vec<T>,
    /// Selected candidate per cell, row-major over `(class, frame)`.
    pub argmin_assignment: Vec<usize>,
}

fn check(pred: &AccdoaTensor<impl Scalar>, set: &TargetAssignmentSet<impl Scalar>) -> Result<()> {
    let layout = pred.layout();
    if layout != set.layout || set.cells.len() != layout.n_classes * layout.n_frames {
        return Err(SeldError::Shape {
            expected: set.layout.shape().to_vec(),
            got: pred.data.shape().to_vec(),
        });
    }
    let width = N_COMPS * layout.n_tracks;
    for (i, cell) in set.cells.iter().enumerate() {
        if cell.candidates.is_empty() {
            return Err(SeldError::domain(format!("cell {i} has no candidate targets")));
        }
        if cell.candidates.iter().any(|c| c.len() != width) {
            return Err(SeldError::domain(format!(
                "cell {i} has a candidate of the wrong width (expected {width})"
            )));
        }
    }
    Ok(())
}

/// Number of components entering the MSE of a cell.
fn counted_comps(active: bool) -> usize {
    if active { N_COMPS } else { N_COMPS - 1 }
}

/// Track-averaged MSE between the prediction at `(class, frame)` and one
/// candidate block.
pub fn cell_loss<T: Scalar>(
    pred: &AccdoaTensor<T>,
    class: usize,
    frame: usize,
    candidate: &[T],
    active: bool,
) -> T {
    let n = pred.layout().n_tracks;
    let comps = counted_comps(active);
    let mut acc = T::zero();
    for track in 0..n {
        let mut sq = T::zero();
        for comp in 0..comps {
            let d = pred.data[[comp, track, class, frame]] - candidate[comp * n + track];
            sq += d * d;
        }
        acc += sq / T::from_usize_lossy(comps);
    }
    acc / T::from_usize_lossy(n)
}

pub fn adpit_loss<T: Scalar>(
    pred: &AccdoaTensor<T>,
    assignments: &TargetAssignmentSet<T>,
) -> Result<LossBreakdown<T>> {
    check(pred, assignments)?;
    let layout = pred.layout();
    let (n_c, n_t) = (layout.n_classes, layout.n_frames);
    let mut per_class = vec![T::zero(); n_c];
    let mut per_frame = vec![T::zero(); n_t];
    let mut argmin_assignment = vec![0usize; n_c * n_t];
    let mut total = T::zero();
    for c in 0..n_c {
        for t in 0..n_t {
            let cell = assignments.cell(c, t);
            let (best, loss) = cell
                .candidates
                .iter()
                .map(|cand| cell_loss(pred, c, t, cand, cell.active))
                .enumerate()
                // Strict `<` keeps the lowest index on ties.
                .fold((0, T::infinity()), |acc, (i, l)| if l < acc.1 { (i, l) } else { acc });
            argmin_assignment[c * n_t + t] = best;
            per_class[c] += loss;
            per_frame[t] += loss;
            total += loss;
        }
    }
    per_class.iter_mut().for_each(|v| *v /= T::from_usize_lossy(n_t));
    per_frame.iter_mut().for_each(|v| *v /= T::from_usize_lossy(n_c));
    Ok(LossBreakdown {
        total: total / T::from_usize_lossy(n_c * n_t),
        per_class,
        per_frame,
        argmin_assignment,
    })
}

/// Gradient of the total loss with respect to `pred`, holding each cell's
/// selected candidate fixed.
pub fn adpit_loss_grad<T: Scalar>(
    pred: &AccdoaTensor<T>,
    assignments: &TargetAssignmentSet<T>,
) -> Result<AccdoaTensor<T>> {
    Ok(adpit_loss_and_grad(pred, assignments)?.1)
}

pub fn adpit_loss_and_grad<T: Scalar>(
    pred: &AccdoaTensor<T>,
    assignments: &TargetAssignmentSet<T>,
) -> Result<(LossBreakdown<T>, AccdoaTensor<T>)> {
    let breakdown = adpit_loss(pred, assignments)?;
    let layout = pred.layout();
    let (n, n_c, n_t) = (layout.n_tracks, layout.n_classes, layout.n_frames);
    let mut grad = AccdoaTensor::zeros(layout);
    let base = T::lit(2.0) / T::from_usize_lossy(n_c * n_t * n);
    for c in 0..n_c {
        for t in 0..n_t {
            let cell = assignments.cell(c, t);
            let cand = &cell.candidates[breakdown.argmin_assignment[c * n_t + t]];
            let comps = counted_comps(cell.active);
            let scale = base / T::from_usize_lossy(comps);
            for track in 0..n {
                for comp in 0..comps {
                    let idx = [comp, track, c, t];
                    grad.data[idx] = scale * (pred.data[idx] - cand[comp * n + track]);
                }
            }
        }
    }
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::{encode_targets, EventLabel, TargetLayout};

    fn one_cell_layout() -> TargetLayout {
        TargetLayout { n_tracks: 3, n_classes: 1, n_frames: 1 }
    }

    #[test]
    fn exact_prediction_has_zero_loss_and_gradient() {
        let labels = vec![
            EventLabel { frame: 2, class_id: 1, source_id: 0, azimuth: 10.0, elevation: 5.0, distance: 3.0 },
            EventLabel { frame: 2, class_id: 1, source_id: 1, azimuth: -90.0, elevation: 0.0, distance: 6.0 },
        ];
        let (target, set) = encode_targets::<f64>(&labels, TargetLayout::default(), 10.0);
        let (loss, grad) = adpit_loss_and_grad(&target, &set).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_derived_gradient_single_cell() {
        let layout = one_cell_layout();
        let label = EventLabel { frame: 0, class_id: 0, source_id: 0, azimuth: 0.0, elevation: 0.0, distance: 5.0 };
        let (target, set) = encode_targets::<f64>(&[label], layout, 10.0);
        let mut pred = AccdoaTensor::zeros(layout);
        pred.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        let (loss, grad) = adpit_loss_and_grad(&pred, &set).unwrap();
        // Active cell: 4 counted comps, N = 3, C = T = 1.
        let mut expect_loss = 0.0;
        for idx in ndarray::indices(pred.data.raw_dim()) {
            let d = pred.data[idx] - target.data[idx];
            expect_loss += d * d / 4.0 / 3.0;
            assert!((grad.data[idx] - 2.0 * d / (1.0 * 1.0 * 3.0 * 4.0)).abs() < 1e-15);
        }
        assert!((loss.total - expect_loss).abs() < 1e-15);
    }

    #[test]
    fn inactive_cell_masks_distance() {
        let layout = one_cell_layout();
        let (_, set) = encode_targets::<f64>(&[], layout, 10.0);
        let mut pred = AccdoaTensor::zeros(layout);
        for n in 0..3 {
            pred.data[[3, n, 0, 0]] = 0.7;
        }
        let (loss, grad) = adpit_loss_and_grad(&pred, &set).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(grad.data.iter().all(|&g| g == 0.0));
        pred.data[[0, 1, 0, 0]] = 0.3;
        let loss = adpit_loss(&pred, &set).unwrap();
        assert!((loss.total - 0.09 / 3.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let (_, set) = encode_targets::<f64>(&[], TargetLayout::default(), 10.0);
        let pred = AccdoaTensor::zeros(one_cell_layout());
        assert!(matches!(adpit_loss(&pred, &set), Err(SeldError::Shape { .. })));
    }

    #[test]
    fn ties_pick_lowest_index() {
        let layout = one_cell_layout();
        let (_, mut set) = encode_targets::<f64>(&[], layout, 10.0);
        let cand = set.cells[0].candidates[0].clone();
        set.cells[0].candidates.push(cand);
        let loss = adpit_loss(&AccdoaTensor::zeros(layout), &set).unwrap();
        assert_eq!(loss.argmin_assignment, vec![0]);
    }
}
