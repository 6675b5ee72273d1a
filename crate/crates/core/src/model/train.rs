//! Loss evaluation, gradient checking and a plain gradient-descent loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ModelConfig;
use super::network::Model;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::adpit::{adpit_loss, adpit_loss_and_grad};
use crate::error::{Result, SeldError};
use crate::labels::{encode_targets, AccdoaTensor, EventLabel, TargetAssignmentSet, TargetLayout, DEFAULT_D_NORM};
use crate::scalar::Scalar;

/// One training example: features `[in_ch, t_in, f_in]` and ADPIT targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    pub features: Tensor<T>,
    pub targets: TargetAssignmentSet<T>,
}

impl<T: Scalar> TrainSample<T> {
    pub fn from_labels(cfg: &ModelConfig, features: Tensor<T>, labels: &[EventLabel]) -> Result<Self> {
        let expected = [cfg.in_ch, cfg.t_in, cfg.f_in];
        if features.dims() != expected {
            return Err(SeldError::Shape { expected: expected.to_vec(), got: features.dims().to_vec() });
        }
        let (_, targets) = encode_targets(labels, layout(cfg), DEFAULT_D_NORM);
        Ok(Self { features, targets })
    }
}

pub fn layout(cfg: &ModelConfig) -> TargetLayout {
    TargetLayout { n_tracks: cfg.n_tracks, n_classes: cfg.n_classes, n_frames: cfg.t_out }
}

fn stack_features<T: Scalar>(batch: &[TrainSample<T>]) -> Result<Tensor<T>> {
    let parts: Vec<Tensor<T>> = batch.iter().map(|s| s.features.clone()).collect();
    Tensor::stack(&parts)
}

/// Split `[N, t_out, width]` model output into per-sample ACCDOA tensors.
pub fn split_output<T: Scalar>(out: &Tensor<T>, cfg: &ModelConfig) -> Result<Vec<AccdoaTensor<T>>> {
    let lay = layout(cfg);
    let n = out.dims()[0];
    (0..n).map(|i| AccdoaTensor::from_frame_major(out.slice_outer(i, 1).data(), lay)).collect()
}

/// Sum over the batch of per-sample ADPIT losses.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &[TrainSample<T>]) -> Result<T> {
    let out = model.forward(&stack_features(batch)?)?;
    let mut total = T::zero();
    for (pred, s) in split_output(&out, &model.cfg)?.iter().zip(batch) {
        total += adpit_loss(pred, &s.targets)?.total;
    }
    Ok(total)
}

/// Batch loss and its gradient with respect to every parameter.
pub fn loss_and_grad<T: Scalar>(model: &Model<T>, batch: &[TrainSample<T>]) -> Result<(T, ParamStore<T>)> {
    let pass = model.forward_pass(&stack_features(batch)?)?;
    let mut total = T::zero();
    let mut seed = Vec::with_capacity(pass.output().numel());
    for (pred, s) in split_output(pass.output(), &model.cfg)?.iter().zip(batch) {
        let (breakdown, grad) = adpit_loss_and_grad(pred, &s.targets)?;
        total += breakdown.total;
        seed.extend(grad.to_frame_major());
    }
    Ok((total, pass.backward(&seed)?))
}

/// Denominator floor of the relative error, so that parameters with a
/// vanishing gradient are judged by absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub n_checked: usize,
    pub h: f64,
    pub max_rel_error: f64,
    pub worst: Option<GradcheckEntry>,
    pub entries: Vec<GradcheckEntry>,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRADCHECK_FLOOR)
}

/// Compare analytic gradients with central differences on `n_params`
/// parameters drawn without replacement.
pub fn gradcheck(
    model: &Model<f64>,
    batch: &[TrainSample<f64>],
    n_params: usize,
    h: f64,
    seed: u64,
) -> Result<GradcheckReport> {
    let (_, grads) = loss_and_grad(model, batch)?;
    let total = model.params.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, n_params.min(total)).into_vec();
    let names: Vec<(String, usize)> = model.params.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();

    let mut probe = model.clone();
    let mut entries = Vec::with_capacity(picks.len());
    for flat in picks {
        let orig = probe.params.flat_get(flat).expect("index in range");
        probe.params.flat_set(flat, orig + h);
        let up = batch_loss(&probe, batch)?;
        probe.params.flat_set(flat, orig - h);
        let down = batch_loss(&probe, batch)?;
        probe.params.flat_set(flat, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.flat_get(flat).expect("index in range");

        let (mut name, mut local) = (String::new(), flat);
        for (n, len) in &names {
            if local < *len {
                name = n.clone();
                break;
            }
            local -= len;
        }
        entries.push(GradcheckEntry { param: name, index: local, analytic, numeric, rel_error: rel_error(analytic, numeric) });
    }
    let worst = entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).cloned();
    Ok(GradcheckReport {
        n_checked: entries.len(),
        h,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverfitTrace {
    /// Loss before each update.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
}

impl OverfitTrace {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(self.final_loss)
    }

    pub fn ratio(&self) -> f64 {
        self.final_loss / self.initial_loss()
    }
}

/// Plain gradient descent on a fixed batch.
pub fn overfit<T: Scalar>(model: &mut Model<T>, batch: &[TrainSample<T>], steps: usize, lr: f64) -> Result<OverfitTrace> {
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grads) = loss_and_grad(model, batch)?;
        losses.push(loss.as_f64());
        if lr != 0.0 {
            model.params.axpy(T::lit(-lr), &grads)?;
        }
        log::debug!("step {} loss {:.6}", losses.len(), loss.as_f64());
    }
    let final_loss = batch_loss(model, batch)?.as_f64();
    Ok(OverfitTrace { losses, final_loss })
}

/// Deterministic pseudo-features `[in_ch, t_in, f_in]`, roughly standardised.
pub fn synthetic_features<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.in_ch * cfg.t_in * cfg.f_in;
    // Sum of uniforms: cheap, bounded, close to Gaussian.
    let data = (0..n)
        .map(|_| {
            let s: f64 = (0..4).map(|_| rng.random_range(-1.0..1.0)).sum();
            T::lit(s * (3.0f64 / 4.0).sqrt())
        })
        .collect();
    Tensor::new(vec![cfg.in_ch, cfg.t_in, cfg.f_in], data).expect("dims match")
}

/// A short scene: one class active throughout, a second class for the
/// middle half of the segment.
pub fn synthetic_labels(cfg: &ModelConfig) -> Vec<EventLabel> {
    let t = cfg.t_out;
    let mut labels = Vec::new();
    for frame in 0..t {
        labels.push(EventLabel {
            frame,
            class_id: 2 % cfg.n_classes,
            source_id: 0,
            azimuth: 30.0,
            elevation: 10.0,
            distance: 2.0,
        });
        if frame >= t / 4 && frame < 3 * t / 4 {
            labels.push(EventLabel {
                frame,
                class_id: 7 % cfg.n_classes,
                source_id: 1,
                azimuth: -60.0 + 4.0 * frame as f64,
                elevation: 0.0,
                distance: 4.0,
            });
        }
    }
    labels
}

pub fn synthetic_sample<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<TrainSample<T>> {
    TrainSample::from_labels(cfg, synthetic_features(cfg, seed), &synthetic_labels(cfg))
}
