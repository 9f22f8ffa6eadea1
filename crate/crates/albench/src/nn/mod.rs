//! Minimal fully-connected network engine.
//!
//! Everything the acquisition functions need from a regressor lives here:
//! deterministic forward passes, exact backpropagation (for both the training
//! loss and per-parameter output gradients), MC-dropout passes, and
//! full-batch Adam training with a plateau learning-rate schedule.

mod aux_head;
mod train;

pub use aux_head::{predict_loss, train_member_with_head, AuxHeadParams, LossHeadConfig};
pub use train::{train_ensemble, train_member, TrainConfig};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// Auxiliary loss-prediction head layout: which hidden layers are tapped and
/// the width of the per-tap fully-connected block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxHeadSpec {
    /// Hidden-layer indices (0-based) whose activations feed the head.
    pub tap_layers: Vec<usize>,
    pub tap_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input dim, hidden widths, output dim.
    pub layer_widths: Vec<usize>,
    pub hidden_activation: Activation,
    /// Applied to hidden layers; 0 except for MC-dropout models.
    pub dropout_rate: f64,
    pub aux_head: Option<AuxHeadSpec>,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>) -> Self {
        NetworkSpec {
            layer_widths,
            hidden_activation: Activation::Relu,
            dropout_rate: 0.0,
            aux_head: None,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidInput(
                "layer_widths needs at least input and output".into(),
            ));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidInput("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidInput(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if let Some(head) = &self.aux_head {
            let hidden = self.num_hidden();
            if head.tap_width == 0 || head.tap_layers.is_empty() {
                return Err(Error::InvalidInput("empty aux head".into()));
            }
            if head.tap_layers.iter().any(|&t| t >= hidden) {
                return Err(Error::InvalidInput("aux head tap out of range".into()));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Number of hidden (activated) layers.
    pub fn num_hidden(&self) -> usize {
        self.layer_widths.len() - 2
    }

    /// Analytic count of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// One weight layer: `weights` is (out, in), `biases` is (out,).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl Layer {
    pub fn zeros(out: usize, input: usize) -> Self {
        Layer {
            weights: Array2::zeros((out, input)),
            biases: Array1::zeros(out),
        }
    }
}

/// All parameters of one network, layer-major with the output layer last.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub layers: Vec<Layer>,
}

impl Parameters {
    /// He-style uniform fan-in initialization, biases zero.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
                Layer {
                    weights,
                    biases: Array1::zeros(fan_out),
                }
            })
            .collect();
        Parameters { layers }
    }

    pub fn zeros_like(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| Layer::zeros(w[1], w[0]))
            .collect();
        Parameters { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Flat view: per layer, weights row-major then biases; output layer last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.biases.iter());
        }
        out
    }

    pub fn unflatten(spec: &NetworkSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::InvalidInput(format!(
                "flat length {} != param count {}",
                flat.len(),
                spec.param_count()
            )));
        }
        let mut layers = Vec::with_capacity(spec.num_layers());
        let mut off = 0;
        for w in spec.layer_widths.windows(2) {
            let (input, out) = (w[0], w[1]);
            let weights =
                Array2::from_shape_vec((out, input), flat[off..off + out * input].to_vec())
                    .expect("shape checked");
            off += out * input;
            let biases = Array1::from_vec(flat[off..off + out].to_vec());
            off += out;
            layers.push(Layer { weights, biases });
        }
        Ok(Parameters { layers })
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|w| w * w).sum::<f64>()
                    + l.biases.iter().map(|b| b * b).sum::<f64>()
            })
            .sum()
    }
}

/// Serialization container: flat parameter values plus their spec header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedParameters {
    pub spec: NetworkSpec,
    pub values: Vec<f64>,
}

impl SavedParameters {
    pub fn save(spec: &NetworkSpec, params: &Parameters) -> Self {
        SavedParameters {
            spec: spec.clone(),
            values: params.flatten(),
        }
    }

    pub fn restore(&self) -> Result<Parameters> {
        Parameters::unflatten(&self.spec, &self.values)
    }
}

/// Forward-pass cache retained for backpropagation.
pub struct ForwardCache {
    /// acts[0] is the input batch, acts[i] the (possibly masked) activation
    /// after hidden layer i-1, acts[num_layers] the linear output.
    pub acts: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pub pre: Vec<Array2<f64>>,
    /// Inverted-dropout multipliers per hidden layer (0 or 1/(1-rate)).
    pub masks: Option<Vec<Array2<f64>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().unwrap()
    }

    /// Post-activation output of hidden layer `i`.
    pub fn hidden_act(&self, i: usize) -> &Array2<f64> {
        &self.acts[i + 1]
    }
}

fn check_input(spec: &NetworkSpec, cols: usize) -> Result<()> {
    if cols != spec.input_dim() {
        return Err(Error::InvalidInput(format!(
            "input width {} != network input dim {}",
            cols,
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Batched forward pass with cache. `masks`, when present, must hold one
/// multiplier matrix per hidden layer matching the batch shape.
pub fn forward_cache(
    params: &Parameters,
    spec: &NetworkSpec,
    x: ArrayView2<f64>,
    masks: Option<Vec<Array2<f64>>>,
) -> Result<ForwardCache> {
    check_input(spec, x.ncols())?;
    let num_layers = spec.num_layers();
    let mut acts = Vec::with_capacity(num_layers + 1);
    let mut pre = Vec::with_capacity(spec.num_hidden());
    acts.push(x.to_owned());
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = acts[l].dot(&layer.weights.t());
        z += &layer.biases;
        if l < num_layers - 1 {
            let mut a = z.mapv(|v| v.max(0.0));
            if let Some(ms) = &masks {
                a *= &ms[l];
            }
            pre.push(z);
            acts.push(a);
        } else {
            acts.push(z);
        }
    }
    Ok(ForwardCache { acts, pre, masks })
}

/// Batched forward pass, dropout disabled.
pub fn forward_batch(
    params: &Parameters,
    spec: &NetworkSpec,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    Ok(forward_cache(params, spec, x, None)?.acts.pop().unwrap())
}

/// Single-sample forward pass, dropout disabled.
pub fn forward(params: &Parameters, spec: &NetworkSpec, x: &[f64]) -> Result<Vec<f64>> {
    let xa = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let y = forward_batch(params, spec, xa.view())?;
    Ok(y.row(0).to_vec())
}

fn sample_masks(spec: &NetworkSpec, n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    let keep_scale = 1.0 / (1.0 - rate);
    spec.layer_widths[1..spec.layer_widths.len() - 1]
        .iter()
        .map(|&w| {
            Array2::from_shape_fn((n, w), |_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
        })
        .collect()
}

/// MC-dropout forward passes. Each pass draws fresh unit masks and rescales
/// survivors by 1/(1-rate).
pub fn forward_mc_dropout(
    params: &Parameters,
    spec: &NetworkSpec,
    x: &[f64],
    passes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if spec.dropout_rate <= 0.0 {
        return Err(Error::Misuse(
            "forward_mc_dropout requires dropout_rate > 0".into(),
        ));
    }
    forward_mc_dropout_with_rate(params, spec, x, passes, spec.dropout_rate, rng)
}

/// Test hook: MC-dropout with an explicit rate (rate 0 degenerates to the
/// plain forward pass).
pub fn forward_mc_dropout_with_rate(
    params: &Parameters,
    spec: &NetworkSpec,
    x: &[f64],
    passes: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if passes < 1 {
        return Err(Error::Misuse("passes must be >= 1".into()));
    }
    let xa = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut out = Vec::with_capacity(passes);
    for _ in 0..passes {
        let masks = if rate > 0.0 {
            Some(sample_masks(spec, 1, rate, rng))
        } else {
            None
        };
        let cache = forward_cache(params, spec, xa.view(), masks)?;
        out.push(cache.output().row(0).to_vec());
    }
    Ok(out)
}

/// Exact backpropagation from an output cotangent. `inject`, when present,
/// adds extra gradient at each hidden layer's (post-mask) activation; the
/// loss-head training path uses it.
pub fn backward(
    params: &Parameters,
    spec: &NetworkSpec,
    cache: &ForwardCache,
    dout: Array2<f64>,
    inject: Option<&[Option<Array2<f64>>]>,
) -> Parameters {
    let num_layers = spec.num_layers();
    let mut grads: Vec<Layer> = (0..num_layers).map(|_| Layer::zeros(0, 0)).collect();
    let mut delta = dout;
    for l in (0..num_layers).rev() {
        let gw = delta.t().dot(&cache.acts[l]);
        let gb = delta.sum_axis(Axis(0));
        grads[l] = Layer {
            weights: gw,
            biases: gb,
        };
        if l > 0 {
            let hidden = l - 1;
            let mut da = delta.dot(&params.layers[l].weights);
            if let Some(extra) = inject {
                if let Some(g) = &extra[hidden] {
                    da += g;
                }
            }
            if let Some(masks) = &cache.masks {
                da *= &masks[hidden];
            }
            // ReLU derivative from the stored pre-activation.
            ndarray::Zip::from(&mut da)
                .and(&cache.pre[hidden])
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            delta = da;
        }
    }
    Parameters { layers: grads }
}

/// Mean-squared-error over batch and output dims, plus its output cotangent.
pub fn mse_and_cotangent(pred: &Array2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let dy = pred.ncols() as f64;
    let resid = pred - &target;
    let loss = resid.iter().map(|r| r * r).sum::<f64>() / (n * dy);
    let cot = resid.mapv(|r| 2.0 * r / (n * dy));
    (loss, cot)
}

/// Exact gradient of batch MSE plus the L2 term `weight_decay * ||params||^2`,
/// in flat-view ordering.
pub fn loss_gradient(
    params: &Parameters,
    spec: &NetworkSpec,
    batch_x: ArrayView2<f64>,
    batch_y: ArrayView2<f64>,
    weight_decay: f64,
) -> Result<Vec<f64>> {
    if batch_x.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if batch_y.nrows() != batch_x.nrows() || batch_y.ncols() != spec.output_dim() {
        return Err(Error::InvalidInput("batch shape mismatch".into()));
    }
    let cache = forward_cache(params, spec, batch_x, None)?;
    let (_, cot) = mse_and_cotangent(cache.output(), batch_y);
    let grads = backward(params, spec, &cache, cot, None);
    let mut flat = grads.flatten();
    if weight_decay != 0.0 {
        for (g, p) in flat.iter_mut().zip(params.flatten()) {
            *g += 2.0 * weight_decay * p;
        }
    }
    Ok(flat)
}

/// Exact gradient of the sum of outputs with respect to the parameters,
/// restricted to `param_subset` (flat-view indices, in the given order).
pub fn output_gradient(
    params: &Parameters,
    spec: &NetworkSpec,
    x: &[f64],
    param_subset: &[usize],
) -> Result<Vec<f64>> {
    if param_subset.is_empty() {
        return Err(Error::Misuse("empty parameter subset".into()));
    }
    let xa = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let cache = forward_cache(params, spec, xa.view(), None)?;
    let dout = Array2::ones((1, spec.output_dim()));
    let flat = backward(params, spec, &cache, dout, None).flatten();
    param_subset
        .iter()
        .map(|&i| {
            flat.get(i)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("parameter index {i} out of range")))
        })
        .collect()
}

/// N independently initialized regressors sharing one spec.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub spec: NetworkSpec,
    pub seed_base: u64,
    pub members: Vec<Parameters>,
    /// Loss-prediction heads, present only after `train_member_with_head`.
    pub aux_heads: Option<Vec<AuxHeadParams>>,
    pub trained: bool,
}

impl EnsembleModel {
    /// Fresh untrained ensemble; member i is initialized from a seed derived
    /// from `seed_base`.
    pub fn init(spec: NetworkSpec, seed_base: u64, n_members: usize) -> Result<Self> {
        spec.validate()?;
        if n_members == 0 {
            return Err(Error::InvalidInput("ensemble needs >= 1 member".into()));
        }
        let members = (0..n_members)
            .map(|i| Parameters::init(&spec, Self::member_seed(seed_base, i)))
            .collect();
        Ok(EnsembleModel {
            spec,
            seed_base,
            members,
            aux_heads: None,
            trained: false,
        })
    }

    pub fn member_seed(seed_base: u64, index: usize) -> u64 {
        derive_seed(seed_base, &format!("member{index}"))
    }

    /// Ensemble mean and per-member outputs at one point.
    pub fn predict(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let per_member: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| forward(m, &self.spec, x))
            .collect::<Result<_>>()?;
        let dy = self.spec.output_dim();
        let mut mean = vec![0.0; dy];
        for out in &per_member {
            for (m, v) in mean.iter_mut().zip(out) {
                *m += v;
            }
        }
        let n = per_member.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok((mean, per_member))
    }

    /// Per-member predictions over a batch; one (n, dy) matrix per member.
    pub fn predict_members_batch(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.members
            .iter()
            .map(|m| forward_batch(m, &self.spec, x))
            .collect()
    }

    /// Ensemble-mean predictions over a batch.
    pub fn predict_mean_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let per = self.predict_members_batch(x)?;
        let mut mean = Array2::zeros(per[0].raw_dim());
        for p in &per {
            mean += p;
        }
        mean /= per.len() as f64;
        Ok(mean)
    }
}

/// Central finite-difference gradient of an arbitrary scalar function of the
/// flat parameters. Test oracle; kept here so both unit and acceptance tests
/// share one implementation.
pub fn finite_difference<F>(flat: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; flat.len()];
    let mut work = flat.to_vec();
    for i in 0..flat.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

pub fn as_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    if rows.is_empty() {
        return Array2::zeros((0, 0));
    }
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), dim), flat).expect("ragged rows")
}

pub fn mean_row(m: ArrayView2<f64>) -> Vec<f64> {
    m.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn linear_1_1(w: f64, b: f64) -> (NetworkSpec, Parameters) {
        let spec = NetworkSpec::new(vec![1, 1]);
        let params = Parameters {
            layers: vec![Layer {
                weights: array![[w]],
                biases: array![b],
            }],
        };
        (spec, params)
    }

    #[test]
    fn forward_single_linear_layer() {
        let (spec, params) = linear_1_1(2.0, 1.0);
        assert_eq!(forward(&params, &spec, &[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn forward_hand_computed_2_2_1() {
        // Hidden: z = [1*1 + 0*2, -1*1 + 1*2] = [1, 1]; relu -> [1, 1].
        // Output: 3*1 + (-1)*1 + 0.5 = 2.5.
        let spec = NetworkSpec::new(vec![2, 2, 1]);
        let params = Parameters {
            layers: vec![
                Layer {
                    weights: array![[1.0, 0.0], [-1.0, 1.0]],
                    biases: array![0.0, 0.0],
                },
                Layer {
                    weights: array![[3.0, -1.0]],
                    biases: array![0.5],
                },
            ],
        };
        assert_eq!(forward(&params, &spec, &[1.0, 2.0]).unwrap(), vec![2.5]);
    }

    #[test]
    fn relu_clamps_negative_preactivations() {
        let spec = NetworkSpec::new(vec![1, 1, 1]);
        let params = Parameters {
            layers: vec![
                Layer {
                    weights: array![[1.0]],
                    biases: array![0.0],
                },
                Layer {
                    weights: array![[5.0]],
                    biases: array![0.25],
                },
            ],
        };
        // Negative input is clamped to 0 before the output layer.
        assert_eq!(forward(&params, &spec, &[-2.0]).unwrap(), vec![0.25]);
        assert_eq!(forward(&params, &spec, &[2.0]).unwrap(), vec![10.25]);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let spec = NetworkSpec::new(vec![3, 4, 2]);
        let params = Parameters::zeros_like(&spec);
        assert_eq!(forward(&params, &spec, &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let (spec, params) = linear_1_1(1.0, 0.0);
        assert!(forward(&params, &spec, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn init_is_deterministic_bounded_and_zero_biased() {
        let spec = NetworkSpec::new(vec![3, 8, 2]);
        let a = Parameters::init(&spec, 7);
        let b = Parameters::init(&spec, 7);
        let c = Parameters::init(&spec, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (layer, w) in a.layers.iter().zip(spec.layer_widths.windows(2)) {
            let limit = (6.0 / w[0] as f64).sqrt();
            assert!(layer.weights.iter().all(|v| v.abs() < limit));
            assert!(layer.biases.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(vec![1]).validate().is_err());
        assert!(NetworkSpec::new(vec![1, 0, 1]).validate().is_err());
        assert!(NetworkSpec::new(vec![1, 1]).with_dropout(1.0).validate().is_err());
        assert!(NetworkSpec::new(vec![1, 1]).with_dropout(0.5).validate().is_ok());
        let mut with_head = NetworkSpec::new(vec![1, 4, 4, 1]);
        with_head.aux_head = Some(AuxHeadSpec { tap_layers: vec![0, 1], tap_width: 3 });
        assert!(with_head.validate().is_ok());
        with_head.aux_head = Some(AuxHeadSpec { tap_layers: vec![2], tap_width: 3 });
        assert!(with_head.validate().is_err());
    }

    #[test]
    fn param_count_matches_flatten() {
        let spec = NetworkSpec::new(vec![4, 7, 3, 2]);
        let params = Parameters::init(&spec, 1);
        assert_eq!(spec.param_count(), params.flatten().len());
        assert_eq!(spec.param_count(), 4 * 7 + 7 + 7 * 3 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn saved_parameters_round_trip_through_json() {
        let spec = NetworkSpec::new(vec![2, 5, 1]);
        let params = Parameters::init(&spec, 3);
        let saved = SavedParameters::save(&spec, &params);
        let text = serde_json::to_string(&saved).unwrap();
        let back: SavedParameters = serde_json::from_str(&text).unwrap();
        assert_eq!(back.restore().unwrap(), params);
    }

    #[test]
    fn mc_dropout_rate_zero_matches_plain_forward() {
        let spec = NetworkSpec::new(vec![2, 6, 1]);
        let params = Parameters::init(&spec, 11);
        let x = [0.3, -0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let passes = forward_mc_dropout_with_rate(&params, &spec, &x, 4, 0.0, &mut rng).unwrap();
        let plain = forward(&params, &spec, &x).unwrap();
        for p in passes {
            assert_eq!(p, plain);
        }
    }

    #[test]
    fn mc_dropout_requires_positive_rate() {
        let spec = NetworkSpec::new(vec![1, 4, 1]);
        let params = Parameters::init(&spec, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forward_mc_dropout(&params, &spec, &[0.5], 3, &mut rng).is_err());
    }

    #[test]
    fn mc_dropout_mask_statistics() {
        // With rate 0.5 the survivor multiplier is 2 and the keep frequency
        // should be near 1/2 (within 5% over many draws).
        let spec = NetworkSpec::new(vec![1, 50, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let masks = sample_masks(&spec, 200, 0.5, &mut rng);
        let m = &masks[0];
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let keep = m.iter().filter(|&&v| v != 0.0).count() as f64 / m.len() as f64;
        assert!((keep - 0.5).abs() < 0.05, "keep rate {keep}");
    }

    #[test]
    fn mc_dropout_with_known_single_mask() {
        // 1-2-1 net, identity-ish weights. Mask keeping only unit 0 with
        // rate 0.5 doubles unit 0 and zeroes unit 1.
        let spec = NetworkSpec::new(vec![1, 2, 1]);
        let params = Parameters {
            layers: vec![
                Layer {
                    weights: array![[1.0], [1.0]],
                    biases: array![0.0, 0.0],
                },
                Layer {
                    weights: array![[1.0, 1.0]],
                    biases: array![0.0],
                },
            ],
        };
        let x = array![[3.0]];
        let mask = vec![array![[2.0, 0.0]]];
        let out = forward_cache(&params, &spec, x.view(), Some(mask)).unwrap();
        assert_eq!(out.output()[[0, 0]], 6.0);
    }

    #[test]
    fn mse_and_cotangent_hand_case() {
        let pred = array![[1.0, 2.0], [3.0, 4.0]];
        let target = array![[0.0, 2.0], [3.0, 2.0]];
        let (loss, cot) = mse_and_cotangent(&pred, target.view());
        // Residuals 1,0,0,2 -> (1+4)/4.
        assert_relative_eq!(loss, 1.25);
        assert_relative_eq!(cot[[0, 0]], 2.0 * 1.0 / 4.0);
        assert_relative_eq!(cot[[1, 1]], 2.0 * 2.0 / 4.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let spec = NetworkSpec::new(vec![2, 5, 3, 1]);
        let params = Parameters::init(&spec, 21);
        let x = array![[0.2, -0.4], [0.9, 0.1], [-0.5, 0.7]];
        let y = array![[0.3], [-0.2], [0.8]];
        for wd in [0.0, 1e-2] {
            let grad = loss_gradient(&params, &spec, x.view(), y.view(), wd).unwrap();
            let fd = finite_difference(&params.flatten(), 1e-6, |flat| {
                let p = Parameters::unflatten(&spec, flat).unwrap();
                let pred = forward_batch(&p, &spec, x.view()).unwrap();
                let (l, _) = mse_and_cotangent(&pred, y.view());
                l + wd * p.squared_norm()
            });
            for (g, f) in grad.iter().zip(&fd) {
                assert!((g - f).abs() < 1e-5, "grad {g} vs fd {f}");
            }
        }
    }

    #[test]
    fn loss_gradient_rejects_bad_batches() {
        let spec = NetworkSpec::new(vec![1, 2, 1]);
        let params = Parameters::init(&spec, 0);
        let empty = Array2::<f64>::zeros((0, 1));
        assert!(loss_gradient(&params, &spec, empty.view(), empty.view(), 0.0).is_err());
        let x = array![[1.0]];
        let y = array![[1.0], [2.0]];
        assert!(loss_gradient(&params, &spec, x.view(), y.view(), 0.0).is_err());
    }

    #[test]
    fn output_gradient_linear_net_hand_case() {
        // y = w x + b at x = 3: dy/dw = 3, dy/db = 1.
        let (spec, params) = linear_1_1(2.0, 1.0);
        let grad = output_gradient(&params, &spec, &[3.0], &[0, 1]).unwrap();
        assert_eq!(grad, vec![3.0, 1.0]);
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let spec = NetworkSpec::new(vec![2, 4, 2]);
        let params = Parameters::init(&spec, 9);
        let x = [0.7, -0.3];
        let subset: Vec<usize> = (0..spec.param_count()).collect();
        let grad = output_gradient(&params, &spec, &x, &subset).unwrap();
        let fd = finite_difference(&params.flatten(), 1e-6, |flat| {
            let p = Parameters::unflatten(&spec, flat).unwrap();
            forward(&p, &spec, &x).unwrap().iter().sum()
        });
        for (g, f) in grad.iter().zip(&fd) {
            assert!((g - f).abs() < 1e-5);
        }
    }

    #[test]
    fn output_gradient_rejects_empty_subset() {
        let (spec, params) = linear_1_1(1.0, 0.0);
        assert!(output_gradient(&params, &spec, &[1.0], &[]).is_err());
    }

    #[test]
    fn ensemble_predict_mean_of_members() {
        let spec = NetworkSpec::new(vec![1, 1]);
        let mut model = EnsembleModel::init(spec, 0, 2).unwrap();
        model.members[0].layers[0].weights[[0, 0]] = 1.0;
        model.members[0].layers[0].biases[0] = 0.0;
        model.members[1].layers[0].weights[[0, 0]] = 3.0;
        model.members[1].layers[0].biases[0] = 0.0;
        let (mean, per) = model.predict(&[2.0]).unwrap();
        assert_eq!(per, vec![vec![2.0], vec![6.0]]);
        assert_eq!(mean, vec![4.0]);
        let batch = array![[2.0], [0.0]];
        let bm = model.predict_mean_batch(batch.view()).unwrap();
        assert_eq!(bm, array![[4.0], [0.0]]);
    }

    #[test]
    fn ensemble_member_seeds_are_distinct() {
        let spec = NetworkSpec::new(vec![1, 4, 1]);
        let model = EnsembleModel::init(spec, 3, 5).unwrap();
        for i in 0..model.members.len() {
            for j in i + 1..model.members.len() {
                assert_ne!(model.members[i], model.members[j]);
            }
        }
    }

    #[test]
    fn finite_difference_on_known_quadratic() {
        // f(v) = v0^2 + 3 v1 -> grad (2 v0, 3).
        let grad = finite_difference(&[2.0, 5.0], 1e-6, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((grad[0] - 4.0).abs() < 1e-6);
        assert!((grad[1] - 3.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(
            widths in proptest::collection::vec(1usize..6, 2..5),
            seed in 0u64..1000,
        ) {
            let spec = NetworkSpec::new(widths);
            let params = Parameters::init(&spec, seed);
            let flat = params.flatten();
            prop_assert_eq!(flat.len(), spec.param_count());
            let back = Parameters::unflatten(&spec, &flat).unwrap();
            prop_assert_eq!(back, params);
        }

        #[test]
        fn forward_batch_matches_per_sample(
            seed in 0u64..200,
        ) {
            let spec = NetworkSpec::new(vec![2, 3, 2]);
            let params = Parameters::init(&spec, seed);
            let x = array![[0.1, -0.2], [0.5, 0.9], [-1.0, 0.0]];
            let batch = forward_batch(&params, &spec, x.view()).unwrap();
            for (i, row) in x.outer_iter().enumerate() {
                let single = forward(&params, &spec, row.as_slice().unwrap()).unwrap();
                for (a, b) in batch.row(i).iter().zip(&single) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
