mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_core::adpit::{adpit_loss, adpit_loss_and_grad};
use seld_core::labels::{encode_targets, track_assignments, EventLabel, TargetLayout, DEFAULT_D_NORM};
use seld_core::metrics::{decode_multi_accdoa, MetricsConfig};

fn small_layout() -> TargetLayout {
    TargetLayout { n_tracks: 3, n_classes: 4, n_frames: 5 }
}

/// Surjections from n onto k by inclusion-exclusion.
fn surjections(n: u32, k: u64) -> u64 {
    let binom = |n: u64, r: u64| (0..r).fold(1u64, |acc, i| acc * (n - i) / (i + 1));
    (0..=k)
        .map(|j| {
            let term = binom(k, j) * (k - j).pow(n);
            if j % 2 == 0 { term as i64 } else { -(term as i64) }
        })
        .sum::<i64>() as u64
}

#[test]
fn assignment_counts_match_inclusion_exclusion() {
    for n in 1..=5usize {
        for k in 1..=n {
            let maps = track_assignments(n, k);
            assert_eq!(maps.len() as u64, surjections(n as u32, k as u64), "n={n} k={k}");
            let mut sorted = maps.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), maps.len());
        }
    }
    assert_eq!(track_assignments(3, 1).len(), 1);
    assert_eq!(track_assignments(3, 2).len(), 6);
    assert_eq!(track_assignments(3, 3).len(), 6);
}

#[test]
fn loss_gradient_matches_central_differences() {
    let layout = small_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let labels = common::random_labels(&mut rng, layout, 0.5, 3);
    let (_, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
    let pred = common::random_pred(&mut rng, layout);
    let (_, grad) = adpit_loss_and_grad(&pred, &set).unwrap();
    let h = 1e-5;
    for (idx, g) in grad.data.indexed_iter() {
        let idx = [idx.0, idx.1, idx.2, idx.3];
        let mut p = pred.clone();
        p.data[idx] += h;
        let up = adpit_loss(&p, &set).unwrap().total;
        p.data[idx] -= 2.0 * h;
        let down = adpit_loss(&p, &set).unwrap().total;
        let fd = (up - down) / (2.0 * h);
        assert!((fd - g).abs() < 1e-6, "{idx:?}: analytic {g} numeric {fd}");
    }
}

#[test]
fn extra_candidates_never_raise_the_loss() {
    let layout = small_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..50 {
        let labels = common::random_labels(&mut rng, layout, 0.5, 3);
        let (_, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
        let pred = common::random_pred(&mut rng, layout);
        let base = adpit_loss(&pred, &set).unwrap().total;
        let mut wider = set.clone();
        for cell in wider.cells.iter_mut() {
            let width = cell.candidates[0].len();
            cell.candidates.push((0..width).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        assert!(adpit_loss(&pred, &wider).unwrap().total <= base);
    }
}

#[test]
fn perfect_prediction_of_canonical_target_has_zero_loss() {
    let layout = TargetLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let labels = common::random_labels(&mut rng, layout, 0.2, 3);
    let (target, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
    let out = adpit_loss(&target, &set).unwrap();
    assert_eq!(out.total, 0.0);
    assert!(out.argmin_assignment.iter().all(|&i| i == 0));
}

#[test]
fn breakdown_averages_agree_with_total() {
    let layout = small_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let labels = common::random_labels(&mut rng, layout, 0.5, 3);
    let (_, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
    let pred = common::random_pred(&mut rng, layout);
    let out = adpit_loss(&pred, &set).unwrap();
    let by_class = out.per_class.iter().sum::<f64>() / layout.n_classes as f64;
    let by_frame = out.per_frame.iter().sum::<f64>() / layout.n_frames as f64;
    assert!((by_class - out.total).abs() < 1e-14);
    assert!((by_frame - out.total).abs() < 1e-14);
}

fn arb_labels() -> impl Strategy<Value = Vec<EventLabel>> {
    proptest::collection::vec((0usize..5, 0usize..4, 0i64..4, -179.0f64..179.0, -89.0f64..89.0, 0.1f64..15.0), 0..25)
        .prop_map(|v| {
            let mut seen = std::collections::BTreeSet::new();
            v.into_iter()
                .filter(|&(f, c, s, ..)| seen.insert((f, c, s)))
                .map(|(frame, class_id, source_id, azimuth, elevation, distance)| EventLabel {
                    frame,
                    class_id,
                    source_id,
                    azimuth,
                    elevation,
                    distance,
                })
                .collect()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_matches_enumeration(labels in arb_labels(), seed in any::<u64>()) {
        let layout = small_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = common::random_pred(&mut rng, layout);
        let (_, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
        let lib = adpit_loss(&pred, &set).unwrap().total;
        let oracle = common::brute_force_adpit(&pred, &labels, DEFAULT_D_NORM);
        prop_assert!((lib - oracle).abs() < 1e-12);
    }

    #[test]
    fn candidates_per_cell_follow_event_count(labels in arb_labels()) {
        let layout = small_layout();
        let (_, set) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
        for class in 0..layout.n_classes {
            for frame in 0..layout.n_frames {
                let k = labels.iter().filter(|l| l.class_id == class && l.frame == frame).count().min(3);
                let cell = set.cell(class, frame);
                let expected = if k == 0 { 1 } else { surjections(3, k as u64) as usize };
                prop_assert_eq!(cell.candidates.len(), expected);
                prop_assert_eq!(cell.active, k > 0);
            }
        }
    }

    #[test]
    fn encode_then_decode_recovers_events(seed in any::<u64>()) {
        let layout = small_layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MetricsConfig::default();
        let labels = common::separated_labels(&mut rng, layout, 2.0 * cfg.merge_angle);
        let (target, _) = encode_targets::<f64>(&labels, layout, DEFAULT_D_NORM);
        let decoded = decode_multi_accdoa(&target, &cfg);
        prop_assert_eq!(decoded.len(), labels.len());
        for l in &labels {
            let v = common::unit(l.azimuth, l.elevation);
            let hit = decoded.iter().any(|d| {
                d.frame == l.frame
                    && d.class_id == l.class_id
                    && (0..3).all(|i| (d.doa[i] - v[i]).abs() < 1e-9)
                    && (d.distance - l.distance).abs() < 1e-9
            });
            prop_assert!(hit);
        }
    }
}
