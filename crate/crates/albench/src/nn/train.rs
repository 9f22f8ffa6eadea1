//! Adam training with a plateau learning-rate schedule.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    backward, forward_cache, mse_and_cotangent, sample_masks, EnsembleModel, Layer, NetworkSpec,
    Parameters,
};
use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Relative improvement below which an epoch counts as a plateau.
pub const PLATEAU_REL_THRESHOLD: f64 = 1e-4;
pub const PLATEAU_PATIENCE: usize = 20;
pub const LR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_decay: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 5000,
            learning_rate: 1e-3,
            plateau_decay: 0.8,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidInput("non-positive training setting".into()));
        }
        if !(0.0 < self.plateau_decay && self.plateau_decay < 1.0) {
            return Err(Error::InvalidInput("plateau_decay outside (0,1)".into()));
        }
        Ok(())
    }
}

pub(super) struct AdamState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: u64,
}

impl AdamState {
    pub fn new(spec: &NetworkSpec) -> Self {
        Self::like(&Parameters::zeros_like(spec).layers)
    }

    /// Zero moments shaped like the given layers.
    pub fn like(layers: &[Layer]) -> Self {
        let zeros = |ls: &[Layer]| -> Vec<Layer> {
            ls.iter()
                .map(|l| Layer::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect()
        };
        AdamState {
            m: zeros(layers),
            v: zeros(layers),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.step_layers(&mut params.layers, &grads.layers, lr);
    }

    pub fn step_layers(&mut self, params: &mut [Layer], grads: &[Layer], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            update(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights, lr, bc1, bc2);
            update(&mut p.biases, &g.biases, &mut m.biases, &mut v.biases, lr, bc1, bc2);
        }
    }
}

fn update<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    });
}

/// Tracks the plateau schedule: the learning rate decays by `decay` whenever
/// the epoch loss fails to beat the running best by a relative threshold for
/// `PLATEAU_PATIENCE` consecutive epochs.
pub(super) struct PlateauSchedule {
    pub lr: f64,
    decay: f64,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, decay: f64) -> Self {
        PlateauSchedule {
            lr,
            decay,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) {
        if loss < self.best * (1.0 - PLATEAU_REL_THRESHOLD) {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= PLATEAU_PATIENCE {
                self.lr = (self.lr * self.decay).max(LR_FLOOR);
                self.stale = 0;
            }
        }
    }
}

/// Adds the gradient of `weight_decay * ||params||^2` in place.
pub(super) fn add_l2(grads: &mut Parameters, params: &Parameters, weight_decay: f64) {
    if weight_decay == 0.0 {
        return;
    }
    for (g, p) in grads.layers.iter_mut().zip(&params.layers) {
        g.weights.scaled_add(2.0 * weight_decay, &p.weights);
        g.biases.scaled_add(2.0 * weight_decay, &p.biases);
    }
}

/// Trains one member from scratch. Returns the final parameters and the
/// per-epoch training-loss trace (data MSE, before each epoch's update).
pub fn train_member(
    spec: &NetworkSpec,
    init_seed: u64,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(Parameters, Vec<f64>)> {
    spec.validate()?;
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut params = Parameters::init(spec, init_seed);
    let mut adam = AdamState::new(spec);
    let mut sched = PlateauSchedule::new(cfg.learning_rate, cfg.plateau_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ init_seed, "train-rng"));
    let mut trace = Vec::with_capacity(cfg.epochs);
    let n = x.nrows();
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + cfg.batch_size).min(n);
            let bx = x.slice(ndarray::s![start..end, ..]);
            let by = y.slice(ndarray::s![start..end, ..]);
            let masks = if spec.dropout_rate > 0.0 {
                Some(sample_masks(
                    spec,
                    end - start,
                    spec.dropout_rate,
                    &mut rng,
                ))
            } else {
                None
            };
            let cache = forward_cache(&params, spec, bx, masks)?;
            let (loss, cot) = mse_and_cotangent(cache.output(), by);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let mut grads = backward(&params, spec, &cache, cot, None);
            add_l2(&mut grads, &params, cfg.weight_decay);
            adam.step(&mut params, &grads, sched.lr);
            epoch_loss += loss * (end - start) as f64;
            seen += end - start;
            start = end;
        }
        let loss = epoch_loss / seen as f64;
        trace.push(loss);
        sched.observe(loss);
    }
    Ok((params, trace))
}

/// Retrains every member of a fresh ensemble independently. Members differ
/// only through their initialization seed; training is deterministic given
/// (seed_base, cfg, data).
pub fn train_ensemble(
    spec: &NetworkSpec,
    seed_base: u64,
    n_members: usize,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<(EnsembleModel, Vec<Vec<f64>>)> {
    if n_members == 0 {
        return Err(Error::InvalidInput("ensemble needs >= 1 member".into()));
    }
    let results: Vec<(Parameters, Vec<f64>)> = (0..n_members)
        .into_par_iter()
        .map(|i| train_member(spec, EnsembleModel::member_seed(seed_base, i), x, y, cfg))
        .collect::<Result<_>>()?;
    let (members, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((
        EnsembleModel {
            spec: spec.clone(),
            seed_base,
            members,
            aux_heads: None,
            trained: true,
        },
        traces,
    ))
}
