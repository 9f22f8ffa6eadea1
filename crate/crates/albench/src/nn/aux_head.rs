//! Loss-prediction auxiliary head: taps the last hidden layers of the trunk,
//! runs each through a small fully-connected block, and predicts a scalar
//! per-sample loss. Trained jointly with the trunk under a pair-wise ranking
//! hinge; after the joint phase the head keeps learning but its gradients no
//! longer reach the trunk.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{add_l2, AdamState, PlateauSchedule};
use super::{
    backward, forward_cache, mse_and_cotangent, ForwardCache, Layer, NetworkSpec, Parameters,
};
use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossHeadConfig {
    /// Relative weight of the ranking loss in the joint objective.
    pub weight: f64,
    /// Fraction of epochs during which head gradients reach the trunk.
    pub joint_fraction: f64,
    /// Ranking hinge margin.
    pub margin: f64,
}

impl Default for LossHeadConfig {
    fn default() -> Self {
        LossHeadConfig {
            weight: 0.001,
            joint_fraction: 0.6,
            margin: 1.0,
        }
    }
}

/// Head parameters: one block per tap plus the final combining layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxHeadParams {
    /// Per-tap fully-connected block, (tap_width, hidden_width) each.
    pub taps: Vec<Layer>,
    /// Final scalar layer over the concatenated tap blocks.
    pub combine: Layer,
}

impl AuxHeadParams {
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let head_spec = spec
            .aux_head
            .as_ref()
            .ok_or_else(|| Error::Misuse("spec has no aux head".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |out: usize, input: usize| -> Layer {
            let limit = (6.0 / input as f64).sqrt();
            Layer {
                weights: Array2::from_shape_fn((out, input), |_| rng.random_range(-limit..limit)),
                biases: Array1::zeros(out),
            }
        };
        let taps: Vec<Layer> = head_spec
            .tap_layers
            .iter()
            .map(|&h| uniform(head_spec.tap_width, spec.layer_widths[h + 1]))
            .collect();
        let combine = uniform(1, head_spec.tap_layers.len() * head_spec.tap_width);
        Ok(AuxHeadParams { taps, combine })
    }

    fn into_layers(self) -> Vec<Layer> {
        let mut layers = self.taps;
        layers.push(self.combine);
        layers
    }

    fn from_layers(mut layers: Vec<Layer>) -> Self {
        let combine = layers.pop().expect("head layers");
        AuxHeadParams {
            taps: layers,
            combine,
        }
    }
}

pub struct HeadCache {
    tap_pre: Vec<Array2<f64>>,
    /// Concatenated post-ReLU tap activations, (n, taps * tap_width).
    concat: Array2<f64>,
}

/// Head forward from a trunk cache: per-sample predicted losses.
pub fn head_forward(
    head: &AuxHeadParams,
    spec: &NetworkSpec,
    trunk: &ForwardCache,
) -> Result<(Array1<f64>, HeadCache)> {
    let head_spec = spec
        .aux_head
        .as_ref()
        .ok_or_else(|| Error::Misuse("spec has no aux head".into()))?;
    let n = trunk.acts[0].nrows();
    let width = head_spec.tap_width;
    let mut concat = Array2::zeros((n, head.taps.len() * width));
    let mut tap_pre = Vec::with_capacity(head.taps.len());
    for (t, (&h, tap)) in head_spec.tap_layers.iter().zip(&head.taps).enumerate() {
        let mut z = trunk.hidden_act(h).dot(&tap.weights.t());
        z += &tap.biases;
        let a = z.mapv(|v| v.max(0.0));
        concat
            .slice_mut(ndarray::s![.., t * width..(t + 1) * width])
            .assign(&a);
        tap_pre.push(z);
    }
    let mut score = concat.dot(&head.combine.weights.t());
    score += &head.combine.biases;
    Ok((
        score.index_axis(Axis(1), 0).to_owned(),
        HeadCache { tap_pre, concat },
    ))
}

/// Backward through the head. Returns head gradients and the cotangent to
/// inject at each trunk hidden layer (None where no tap sits).
fn head_backward(
    head: &AuxHeadParams,
    spec: &NetworkSpec,
    trunk: &ForwardCache,
    cache: &HeadCache,
    dscore: &Array1<f64>,
) -> (Vec<Layer>, Vec<Option<Array2<f64>>>) {
    let head_spec = spec.aux_head.as_ref().expect("aux head");
    let n = dscore.len();
    let width = head_spec.tap_width;
    let dscore2 = dscore.view().into_shape_with_order((n, 1)).unwrap();
    // Combine layer.
    let g_combine = Layer {
        weights: dscore2.t().dot(&cache.concat),
        biases: Array1::from_vec(vec![dscore.sum()]),
    };
    let dconcat = dscore2.dot(&head.combine.weights);
    let mut grads = Vec::with_capacity(head.taps.len() + 1);
    let mut inject: Vec<Option<Array2<f64>>> = vec![None; spec.num_hidden()];
    for (t, (&h, tap)) in head_spec.tap_layers.iter().zip(&head.taps).enumerate() {
        let mut dz = dconcat
            .slice(ndarray::s![.., t * width..(t + 1) * width])
            .to_owned();
        ndarray::Zip::from(&mut dz)
            .and(&cache.tap_pre[t])
            .for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        grads.push(Layer {
            weights: dz.t().dot(trunk.hidden_act(h)),
            biases: dz.sum_axis(Axis(0)),
        });
        let da = dz.dot(&tap.weights);
        match &mut inject[h] {
            Some(existing) => *existing += &da,
            slot => *slot = Some(da),
        }
    }
    grads.push(g_combine);
    (grads, inject)
}

/// Soft pair-wise ranking hinge over consecutive pairs of a shuffled order.
/// Returns the mean pair loss and its gradient with respect to the predicted
/// losses.
fn ranking_loss(
    true_loss: &Array1<f64>,
    pred_loss: &Array1<f64>,
    order: &[usize],
    margin: f64,
) -> (f64, Array1<f64>) {
    let pairs = order.len() / 2;
    let mut grad = Array1::zeros(pred_loss.len());
    if pairs == 0 {
        return (0.0, grad);
    }
    let mut total = 0.0;
    for p in 0..pairs {
        let (i, j) = (order[2 * p], order[2 * p + 1]);
        let sign = (true_loss[i] - true_loss[j]).signum();
        let sign = if true_loss[i] == true_loss[j] { 0.0 } else { sign };
        let hinge = -sign * (pred_loss[i] - pred_loss[j]) + margin;
        if hinge > 0.0 {
            total += hinge;
            grad[i] -= sign / pairs as f64;
            grad[j] += sign / pairs as f64;
        }
    }
    (total / pairs as f64, grad)
}

/// Per-sample data losses (mean squared error over output dims).
fn per_sample_losses(pred: &Array2<f64>, target: ArrayView2<f64>) -> Array1<f64> {
    let dy = pred.ncols() as f64;
    let resid = pred - &target;
    resid.mapv(|r| r * r).sum_axis(Axis(1)) / dy
}

/// Joint training of trunk and loss head. The trunk objective is MSE (+L2);
/// the ranking loss enters with weight `ll.weight` and stops flowing into the
/// trunk after `ll.joint_fraction` of the epochs.
pub fn train_member_with_head(
    spec: &NetworkSpec,
    init_seed: u64,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    cfg: &super::TrainConfig,
    ll: &LossHeadConfig,
) -> Result<(Parameters, AuxHeadParams, Vec<f64>)> {
    spec.validate()?;
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    let mut params = Parameters::init(spec, init_seed);
    let head = AuxHeadParams::init(spec, derive_seed(init_seed, "loss-head"))?;
    let mut head_layers = head.into_layers();
    let mut adam = AdamState::new(spec);
    let mut head_adam = AdamState::like(&head_layers);
    let mut sched = PlateauSchedule::new(cfg.learning_rate, cfg.plateau_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ init_seed, "loss-head-rng"));
    let joint_epochs = (ll.joint_fraction * cfg.epochs as f64).round() as usize;
    let n = x.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let cache = forward_cache(&params, spec, x, None)?;
        let (loss, cot) = mse_and_cotangent(cache.output(), y);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let head_view = AuxHeadParams {
            taps: head_layers[..head_layers.len() - 1].to_vec(),
            combine: head_layers.last().unwrap().clone(),
        };
        let (pred_loss, head_cache) = head_forward(&head_view, spec, &cache)?;
        let true_loss = per_sample_losses(cache.output(), y);
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let (_, dpred) = ranking_loss(&true_loss, &pred_loss, &order, ll.margin);
        let dpred = dpred * ll.weight;
        let (head_grads, inject) = head_backward(&head_view, spec, &cache, &head_cache, &dpred);
        let joint = epoch < joint_epochs && ll.weight != 0.0;
        let mut grads = backward(
            &params,
            spec,
            &cache,
            cot,
            if joint { Some(&inject) } else { None },
        );
        add_l2(&mut grads, &params, cfg.weight_decay);
        adam.step(&mut params, &grads, sched.lr);
        head_adam.step_layers(&mut head_layers, &head_grads, sched.lr);
        trace.push(loss);
        sched.observe(loss);
    }
    Ok((params, AuxHeadParams::from_layers(head_layers), trace))
}

/// Head prediction for one candidate (dropout disabled).
pub fn predict_loss(
    spec: &NetworkSpec,
    params: &Parameters,
    head: &AuxHeadParams,
    x: &[f64],
) -> Result<f64> {
    let xa = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let cache = forward_cache(params, spec, xa.view(), None)?;
    let (score, _) = head_forward(head, spec, &cache)?;
    Ok(score[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hinge_inactive_when_ordering_correct_and_margin_met() {
        let truth = Array1::from_vec(vec![2.0, 0.0]);
        let pred = Array1::from_vec(vec![3.0, 0.5]);
        let (loss, grad) = ranking_loss(&truth, &pred, &[0, 1], 1.0);
        assert_eq!(loss, 0.0);
        assert_eq!(grad, Array1::<f64>::zeros(2));
    }

    #[test]
    fn hinge_two_samples_reversed_prediction() {
        // l=(1,0), lhat=(0,1), margin 1: -1*(0-1)+1 = 2.
        let truth = Array1::from_vec(vec![1.0, 0.0]);
        let pred = Array1::from_vec(vec![0.0, 1.0]);
        let (loss, grad) = ranking_loss(&truth, &pred, &[0, 1], 1.0);
        assert_eq!(loss, 2.0);
        assert_eq!(grad[0], -1.0);
        assert_eq!(grad[1], 1.0);
    }

    #[test]
    fn equal_true_losses_give_zero_gradient() {
        let truth = Array1::from_vec(vec![1.0, 1.0]);
        let pred = Array1::from_vec(vec![0.0, 5.0]);
        let (loss, grad) = ranking_loss(&truth, &pred, &[0, 1], 1.0);
        assert_eq!(loss, 1.0); // hinge = margin, but carries no slope
        assert_eq!(grad, Array1::<f64>::zeros(2));
    }
}

#[cfg(test)]
mod joint_tests {
    use super::*;
    use crate::nn::{finite_difference, train_member, AuxHeadSpec, TrainConfig};
    use ndarray::{array, Array2};

    fn head_spec() -> NetworkSpec {
        let mut spec = NetworkSpec::new(vec![1, 8, 8, 8, 8, 1]);
        spec.aux_head = Some(AuxHeadSpec {
            tap_layers: vec![1, 2, 3],
            tap_width: 4,
        });
        spec
    }

    fn toy_data() -> (Array2<f64>, Array2<f64>) {
        let x = Array2::from_shape_fn((24, 1), |(i, _)| -1.0 + i as f64 / 12.0);
        let y = x.mapv(|v: f64| v.sin());
        (x, y)
    }

    #[test]
    fn zero_weight_trunk_is_bit_identical_to_plain_training() {
        let spec = head_spec();
        let mut plain_spec = spec.clone();
        plain_spec.aux_head = None;
        let (x, y) = toy_data();
        let cfg = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        let ll = LossHeadConfig {
            weight: 0.0,
            ..LossHeadConfig::default()
        };
        let (with_head, _, _) =
            train_member_with_head(&spec, 9, x.view(), y.view(), &cfg, &ll).unwrap();
        let (plain, _) = train_member(&plain_spec, 9, x.view(), y.view(), &cfg).unwrap();
        assert_eq!(with_head, plain);
    }

    #[test]
    fn nonzero_weight_changes_the_trunk_during_joint_phase() {
        let spec = head_spec();
        let (x, y) = toy_data();
        let cfg = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        let zero = LossHeadConfig {
            weight: 0.0,
            ..LossHeadConfig::default()
        };
        let strong = LossHeadConfig {
            weight: 0.5,
            ..LossHeadConfig::default()
        };
        let (a, _, _) = train_member_with_head(&spec, 9, x.view(), y.view(), &cfg, &zero).unwrap();
        let (b, _, _) = train_member_with_head(&spec, 9, x.view(), y.view(), &cfg, &strong).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let spec = head_spec();
        let params = Parameters::init(&spec, 3);
        let head = AuxHeadParams::init(&spec, 17).unwrap();
        let x = array![[0.4], [-0.9], [0.1]];
        let cache = forward_cache(&params, &spec, x.view(), None).unwrap();
        // Scalar objective: sum of head scores.
        let dscore = Array1::from_vec(vec![1.0; 3]);
        let (_, head_cache) = head_forward(&head, &spec, &cache).unwrap();
        let (head_grads, _) = head_backward(&head, &spec, &cache, &head_cache, &dscore);
        // Flatten head parameters and compare against central differences.
        let flat_grads: Vec<f64> = head_grads
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied().collect::<Vec<_>>())
            .collect();
        let head_layers = head.clone().into_layers();
        let flat: Vec<f64> = head_layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied().collect::<Vec<_>>())
            .collect();
        let shapes: Vec<(usize, usize)> = head_layers
            .iter()
            .map(|l| (l.weights.nrows(), l.weights.ncols()))
            .collect();
        let rebuild = |flat: &[f64]| -> AuxHeadParams {
            let mut layers = Vec::new();
            let mut off = 0;
            for &(out, input) in &shapes {
                let w = Array2::from_shape_vec(
                    (out, input),
                    flat[off..off + out * input].to_vec(),
                )
                .unwrap();
                off += out * input;
                let b = Array1::from_vec(flat[off..off + out].to_vec());
                off += out;
                layers.push(Layer { weights: w, biases: b });
            }
            AuxHeadParams::from_layers(layers)
        };
        let fd = finite_difference(&flat, 1e-6, |v| {
            let h = rebuild(v);
            let (score, _) = head_forward(&h, &spec, &cache).unwrap();
            score.sum()
        });
        assert_eq!(flat_grads.len(), fd.len());
        for (g, f) in flat_grads.iter().zip(&fd) {
            assert!((g - f).abs() < 1e-5, "head grad {g} vs fd {f}");
        }
    }

    #[test]
    fn trained_head_ranks_losses_better_than_chance() {
        // A trunk deliberately too small to fit leaves a spread of per-sample
        // losses; the head should order them better than a coin flip.
        let spec = head_spec();
        let (x, _) = toy_data();
        // A step target leaves large, input-predictable residuals near the
        // discontinuity that the head can learn to rank.
        let y = x.mapv(|v: f64| if v >= 0.0 { 1.0 } else { -1.0 });
        let cfg = TrainConfig {
            epochs: 400,
            ..TrainConfig::default()
        };
        let ll = LossHeadConfig::default();
        let (params, head, _) =
            train_member_with_head(&spec, 4, x.view(), y.view(), &cfg, &ll).unwrap();
        let cache = forward_cache(&params, &spec, x.view(), None).unwrap();
        let truth = per_sample_losses(cache.output(), y.view());
        let (pred, _) = head_forward(&head, &spec, &cache).unwrap();
        let n = truth.len();
        let mut agree = 0usize;
        let mut total = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if truth[i] == truth[j] {
                    continue;
                }
                total += 1;
                if (truth[i] - truth[j]).signum() == (pred[i] - pred[j]).signum() {
                    agree += 1;
                }
            }
        }
        assert!(
            agree as f64 > 0.55 * total as f64,
            "pairwise agreement {agree}/{total}"
        );
    }

    #[test]
    fn predict_loss_is_deterministic() {
        let spec = head_spec();
        let params = Parameters::init(&spec, 1);
        let head = AuxHeadParams::init(&spec, 2).unwrap();
        let a = predict_loss(&spec, &params, &head, &[0.3]).unwrap();
        let b = predict_loss(&spec, &params, &head, &[0.3]).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }
}
