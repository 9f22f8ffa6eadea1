//! The acquisition functions q(x) and their batch-selection semantics.
//!
//! Q-dependent criteria (the greedy-sampling family and the combined QBC
//! variants) select sequentially: after each pick the candidate joins the
//! in-flight query set Q with its prediction frozen, and remaining scores
//! refresh. Pointwise criteria select top-k in a single pass.

use std::cell::RefCell;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, forward_mc_dropout, loss_gradient, output_gradient, EnsembleModel, NetworkSpec,
    Parameters,
};
use crate::oracles::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Random,
    Gsx,
    Gsy,
    Gsxy,
    Qbc,
    QbcDiv,
    QbcDivDen,
    Bald,
    Emoc,
    LearningLoss,
    Mse,
}

pub const ALL_STRATEGIES: [StrategyKind; 11] = [
    StrategyKind::Random,
    StrategyKind::Gsx,
    StrategyKind::Gsy,
    StrategyKind::Gsxy,
    StrategyKind::Qbc,
    StrategyKind::QbcDiv,
    StrategyKind::QbcDivDen,
    StrategyKind::Bald,
    StrategyKind::Emoc,
    StrategyKind::LearningLoss,
    StrategyKind::Mse,
];

impl StrategyKind {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "random" => StrategyKind::Random,
            "gsx" => StrategyKind::Gsx,
            "gsy" => StrategyKind::Gsy,
            "gsxy" => StrategyKind::Gsxy,
            "qbc" => StrategyKind::Qbc,
            "qbcdiv" => StrategyKind::QbcDiv,
            "qbcdivden" => StrategyKind::QbcDivDen,
            "bald" => StrategyKind::Bald,
            "emoc" => StrategyKind::Emoc,
            "learningloss" | "ll" => StrategyKind::LearningLoss,
            "mse" => StrategyKind::Mse,
            other => return Err(Error::Config(format!("unknown strategy '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::Gsx => "gsx",
            StrategyKind::Gsy => "gsy",
            StrategyKind::Gsxy => "gsxy",
            StrategyKind::Qbc => "qbc",
            StrategyKind::QbcDiv => "qbcdiv",
            StrategyKind::QbcDivDen => "qbcdivden",
            StrategyKind::Bald => "bald",
            StrategyKind::Emoc => "emoc",
            StrategyKind::LearningLoss => "learningloss",
            StrategyKind::Mse => "mse",
        }
    }

    /// Q-dependent criteria refresh scores after every pick.
    pub fn is_greedy(&self) -> bool {
        matches!(
            self,
            StrategyKind::Gsx
                | StrategyKind::Gsy
                | StrategyKind::Gsxy
                | StrategyKind::QbcDiv
                | StrategyKind::QbcDivDen
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Diversity weight of QBCDiv.
    pub alpha: f64,
    /// (diversity, density) weights of QBCDivDen.
    pub alpha_beta: (f64, f64),
    /// Neighborhood size of the density term.
    pub density_k: usize,
    pub bald_passes: usize,
    pub bald_dropout: f64,
    pub emoc_param_cap: usize,
    pub ll_weight: f64,
    pub ll_joint_fraction: f64,
    pub ll_tap_width: usize,
    pub ll_margin: f64,
    /// Min-max normalize the terms of combined criteria per selection round.
    pub normalize_terms: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            kind: StrategyKind::Random,
            alpha: 0.5,
            alpha_beta: (1.0 / 3.0, 1.0 / 3.0),
            density_k: 10,
            bald_passes: 25,
            bald_dropout: 0.5,
            emoc_param_cap: 50_000,
            ll_weight: 0.001,
            ll_joint_fraction: 0.6,
            ll_tap_width: 10,
            ll_margin: 1.0,
            normalize_terms: true,
        }
    }
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        StrategyConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.alpha_beta;
        if !(0.0..=1.0).contains(&self.alpha)
            || !(0.0..=1.0).contains(&a)
            || !(0.0..=1.0).contains(&b)
            || a + b > 1.0 + 1e-12
        {
            return Err(Error::InvalidInput("criterion weights outside [0,1]".into()));
        }
        if self.density_k == 0 || self.bald_passes < 2 || self.ll_tap_width == 0 {
            return Err(Error::InvalidInput("non-positive strategy count".into()));
        }
        Ok(())
    }
}

/// Everything an acquisition function may read while scoring one pool.
pub struct AcquisitionContext<'a> {
    pub labeled_x: &'a [Vec<f64>],
    pub labeled_y: &'a [Vec<f64>],
    /// In-flight query inputs (Q) with their frozen predicted labels.
    pub selected_x: Vec<Vec<f64>>,
    pub selected_y: Vec<Vec<f64>>,
    pub pool: &'a [Vec<f64>],
    pub ensemble: &'a EnsembleModel,
    /// Separate MC-dropout scoring model (BALD only).
    pub dropout_model: Option<&'a (NetworkSpec, Parameters)>,
    /// Oracle handle, used only by the infeasible MSE strategy.
    pub oracle: Option<&'a ProblemSpec>,
    /// The original uniformly sampled points (EMOC expectation set).
    pub initial_x: &'a [Vec<f64>],
    /// Input bounds, used to normalize coordinates for cosine similarity.
    pub bounds: &'a [[f64; 2]],
    pub rng: RefCell<ChaCha8Rng>,
    /// Per-member pool predictions, one (N_U, dim_y) matrix per member.
    pub member_preds: Vec<Array2<f64>>,
    /// Ensemble-mean pool predictions.
    pub pool_mean: Vec<Vec<f64>>,
}

impl<'a> AcquisitionContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        labeled_x: &'a [Vec<f64>],
        labeled_y: &'a [Vec<f64>],
        pool: &'a [Vec<f64>],
        ensemble: &'a EnsembleModel,
        dropout_model: Option<&'a (NetworkSpec, Parameters)>,
        oracle: Option<&'a ProblemSpec>,
        initial_x: &'a [Vec<f64>],
        bounds: &'a [[f64; 2]],
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        let pool_matrix = nn::as_matrix(pool);
        let member_preds = if pool.is_empty() {
            Vec::new()
        } else {
            ensemble.predict_members_batch(pool_matrix.view())?
        };
        let n_members = member_preds.len().max(1) as f64;
        let pool_mean: Vec<Vec<f64>> = (0..pool.len())
            .map(|i| {
                let mut mean = vec![0.0; ensemble.spec.output_dim()];
                for p in &member_preds {
                    for (m, v) in mean.iter_mut().zip(p.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n_members);
                mean
            })
            .collect();
        Ok(AcquisitionContext {
            labeled_x,
            labeled_y,
            selected_x: Vec::new(),
            selected_y: Vec::new(),
            pool,
            ensemble,
            dropout_model,
            oracle,
            initial_x,
            bounds,
            rng: RefCell::new(rng),
            member_preds,
            pool_mean,
        })
    }

    fn normalized_coord(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.bounds)
            .map(|(v, b)| {
                if b[1] == b[0] {
                    0.0
                } else {
                    2.0 * (v - b[0]) / (b[1] - b[0]) - 1.0
                }
            })
            .collect()
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Distance to the nearest member of L (in x) and Q.
pub fn score_gsx(ctx: &AcquisitionContext, candidate: usize) -> Result<f64> {
    let x = &ctx.pool[candidate];
    let best = ctx
        .labeled_x
        .iter()
        .chain(&ctx.selected_x)
        .map(|other| euclid(x, other))
        .fold(f64::INFINITY, f64::min);
    if best.is_infinite() {
        return Err(Error::Misuse("GSx needs a non-empty L or Q".into()));
    }
    Ok(best)
}

/// Distance from the predicted label to the nearest known/frozen label.
pub fn score_gsy(ctx: &AcquisitionContext, candidate: usize) -> Result<f64> {
    let pred = &ctx.pool_mean[candidate];
    let best = ctx
        .labeled_y
        .iter()
        .chain(&ctx.selected_y)
        .map(|y| euclid(pred, y))
        .fold(f64::INFINITY, f64::min);
    if best.is_infinite() {
        return Err(Error::Misuse("GSy needs a non-empty L or Q".into()));
    }
    Ok(best)
}

/// Min over paired (x, y) of dist_x * dist_y (pairing preserved).
pub fn score_gsxy(ctx: &AcquisitionContext, candidate: usize) -> Result<f64> {
    let x = &ctx.pool[candidate];
    let pred = &ctx.pool_mean[candidate];
    let best = ctx
        .labeled_x
        .iter()
        .zip(ctx.labeled_y)
        .chain(ctx.selected_x.iter().zip(&ctx.selected_y))
        .map(|(ox, oy)| euclid(x, ox) * euclid(pred, oy))
        .fold(f64::INFINITY, f64::min);
    if best.is_infinite() {
        return Err(Error::Misuse("GSxy needs a non-empty L or Q".into()));
    }
    Ok(best)
}

/// Ensemble variance, averaged over output dimensions.
pub fn score_qbc(ctx: &AcquisitionContext, candidate: usize) -> Result<f64> {
    let mean = &ctx.pool_mean[candidate];
    let n = ctx.member_preds.len() as f64;
    let dy = mean.len() as f64;
    let mut var = 0.0;
    for p in &ctx.member_preds {
        for (v, m) in p.row(candidate).iter().zip(mean) {
            var += (v - m) * (v - m);
        }
    }
    Ok(var / n / dy)
}

fn min_max_normalize(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn combined_terms(
    ctx: &AcquisitionContext,
    cfg: &StrategyConfig,
    candidates: &[usize],
    with_density: bool,
    density: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let qbc_raw: Vec<f64> = candidates
        .iter()
        .map(|&i| score_qbc(ctx, i))
        .collect::<Result<_>>()?;
    let div_raw: Vec<f64> = candidates
        .iter()
        .map(|&i| score_gsx(ctx, i))
        .collect::<Result<_>>()?;
    let den_raw: Vec<f64> = if with_density {
        match density {
            Some(d) => candidates.iter().map(|&i| d[i]).collect(),
            None => {
                let all = density_scores(ctx, cfg)?;
                candidates.iter().map(|&i| all[i]).collect()
            }
        }
    } else {
        Vec::new()
    };
    let (qbc, div, den) = if cfg.normalize_terms {
        (
            min_max_normalize(&qbc_raw),
            min_max_normalize(&div_raw),
            min_max_normalize(&den_raw),
        )
    } else {
        (qbc_raw, div_raw, den_raw)
    };
    let scores = if with_density {
        let (a, b) = cfg.alpha_beta;
        (0..candidates.len())
            .map(|j| (1.0 - a - b) * qbc[j] + a * div[j] + b * den[j])
            .collect()
    } else {
        (0..candidates.len())
            .map(|j| (1.0 - cfg.alpha) * qbc[j] + cfg.alpha * div[j])
            .collect()
    };
    Ok(scores)
}

/// Weighted mix of pool-normalized QBC variance and GSx diversity.
pub fn score_qbc_div(ctx: &AcquisitionContext, cfg: &StrategyConfig, candidate: usize) -> Result<f64> {
    let all: Vec<usize> = (0..ctx.pool.len()).collect();
    let scores = combined_terms(ctx, cfg, &all, false, None)?;
    Ok(scores[candidate])
}

/// QBCDiv plus a k-NN cosine-similarity density term.
pub fn score_qbc_div_den(
    ctx: &AcquisitionContext,
    cfg: &StrategyConfig,
    candidate: usize,
) -> Result<f64> {
    let all: Vec<usize> = (0..ctx.pool.len()).collect();
    let scores = combined_terms(ctx, cfg, &all, true, None)?;
    Ok(scores[candidate])
}

/// Mean cosine similarity to the `density_k` nearest pool points, on
/// bounds-normalized coordinates. Candidate-set independent of Q, so it is
/// computed once per pool.
pub fn density_scores(ctx: &AcquisitionContext, cfg: &StrategyConfig) -> Result<Vec<f64>> {
    let coords: Vec<Vec<f64>> = ctx.pool.iter().map(|x| ctx.normalized_coord(x)).collect();
    let n = coords.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclid(&coords[i], &coords[j]), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let k = cfg.density_k.min(dists.len());
        if k == 0 {
            out.push(0.0);
            continue;
        }
        let sim: f64 = dists
            .iter()
            .take(k)
            .map(|&(_, j)| cosine_similarity(&coords[i], &coords[j]))
            .sum();
        out.push(sim / k as f64);
    }
    Ok(out)
}

/// Variance across MC-dropout passes of the dedicated dropout model.
pub fn score_bald(ctx: &AcquisitionContext, cfg: &StrategyConfig, candidate: usize) -> Result<f64> {
    let (spec, params) = ctx
        .dropout_model
        .ok_or_else(|| Error::Misuse("BALD requires a dropout model".into()))?;
    let mut rng = ctx.rng.borrow_mut();
    let passes = forward_mc_dropout(params, spec, &ctx.pool[candidate], cfg.bald_passes, &mut rng)?;
    let dy = spec.output_dim() as f64;
    let n = passes.len() as f64;
    let mut mean = vec![0.0; spec.output_dim()];
    for p in &passes {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = 0.0;
    for p in &passes {
        for (v, m) in p.iter().zip(&mean) {
            var += (v - m) * (v - m);
        }
    }
    Ok(var / n / dy)
}

/// Precomputed candidate-independent pieces of the EMOC score.
pub struct EmocSetup {
    /// Flat parameter indices, output layer backwards up to the cap.
    pub subset: Vec<usize>,
    /// Output gradients of the first member at each initial point, restricted
    /// to the subset.
    pub init_grads: Vec<Vec<f64>>,
    /// Pool-mean pseudo-label.
    pub pseudo_label: Vec<f64>,
}

/// Flat indices taken from the output layer backwards until `cap` is reached.
pub fn emoc_param_subset(spec: &NetworkSpec, cap: usize) -> Vec<usize> {
    let mut ranges = Vec::new();
    let mut offset = 0usize;
    for w in spec.layer_widths.windows(2) {
        let len = w[0] * w[1] + w[1];
        ranges.push(offset..offset + len);
        offset += len;
    }
    let mut subset = Vec::new();
    let mut remaining = cap.min(offset);
    for range in ranges.into_iter().rev() {
        if remaining == 0 {
            break;
        }
        let take = remaining.min(range.len());
        // Keep the indices adjacent to the output side of this layer.
        subset.extend(range.end - take..range.end);
        remaining -= take;
    }
    subset.sort_unstable();
    subset
}

pub fn emoc_setup(ctx: &AcquisitionContext, cfg: &StrategyConfig) -> Result<EmocSetup> {
    if !ctx.ensemble.trained {
        return Err(Error::Misuse("EMOC requires a trained ensemble".into()));
    }
    if ctx.initial_x.is_empty() {
        return Err(Error::Misuse("EMOC requires the initial point set".into()));
    }
    let spec = &ctx.ensemble.spec;
    let member = &ctx.ensemble.members[0];
    let subset = emoc_param_subset(spec, cfg.emoc_param_cap);
    let init_grads = ctx
        .initial_x
        .iter()
        .map(|x| output_gradient(member, spec, x, &subset))
        .collect::<Result<_>>()?;
    let dy = spec.output_dim();
    let mut pseudo = vec![0.0; dy];
    for m in &ctx.pool_mean {
        for (p, v) in pseudo.iter_mut().zip(m) {
            *p += v;
        }
    }
    let n = ctx.pool_mean.len().max(1) as f64;
    pseudo.iter_mut().for_each(|p| *p /= n);
    Ok(EmocSetup {
        subset,
        init_grads,
        pseudo_label: pseudo,
    })
}

/// EMOC score of one candidate given the precomputed setup.
pub fn emoc_score_with_setup(
    ctx: &AcquisitionContext,
    setup: &EmocSetup,
    candidate: usize,
) -> Result<f64> {
    let spec = &ctx.ensemble.spec;
    let member = &ctx.ensemble.members[0];
    let bx = nn::as_matrix(std::slice::from_ref(&ctx.pool[candidate]));
    let by = nn::as_matrix(std::slice::from_ref(&setup.pseudo_label));
    let g_loss = loss_gradient(member, spec, bx.view(), by.view(), 0.0)?;
    let mut total = 0.0;
    for row in &setup.init_grads {
        let mut l1 = 0.0;
        for (g_out, &idx) in row.iter().zip(&setup.subset) {
            l1 += (g_out * g_loss[idx]).abs();
        }
        total += l1;
    }
    Ok(total / setup.init_grads.len() as f64)
}

/// Anticipated model-output change if the candidate were labeled with the
/// pool-mean pseudo-label. First ensemble member only.
pub fn score_emoc(ctx: &AcquisitionContext, cfg: &StrategyConfig, candidate: usize) -> Result<f64> {
    let setup = emoc_setup(ctx, cfg)?;
    emoc_score_with_setup(ctx, &setup, candidate)
}

/// Auxiliary head's predicted loss (first member's head).
pub fn score_learning_loss(ctx: &AcquisitionContext, candidate: usize) -> Result<f64> {
    let heads = ctx
        .ensemble
        .aux_heads
        .as_ref()
        .ok_or_else(|| Error::Misuse("LearningLoss requires trained loss heads".into()))?;
    nn::predict_loss(
        &ctx.ensemble.spec,
        &ctx.ensemble.members[0],
        &heads[0],
        &ctx.pool[candidate],
    )
}

/// Infeasible-in-practice reference: true MSE against the oracle.
pub fn score_true_mse(ctx: &AcquisitionContext, candidate: usize) -> Result<f64> {
    let problem = ctx
        .oracle
        .ok_or_else(|| Error::Misuse("MSE strategy requires an oracle handle".into()))?;
    let truth = problem.label(&ctx.pool[candidate])?;
    let pred = &ctx.pool_mean[candidate];
    let dy = truth.len() as f64;
    Ok(truth
        .iter()
        .zip(pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / dy)
}

fn argmax_lowest_index(scores: &[f64], candidates: &[usize]) -> usize {
    let mut best_j = 0;
    for j in 1..scores.len() {
        if scores[j] > scores[best_j] {
            best_j = j;
        }
    }
    candidates[best_j]
}

/// Selects k pool indices under the strategy's batch semantics.
pub fn select_batch(
    ctx: &mut AcquisitionContext,
    cfg: &StrategyConfig,
    k: usize,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    let n = ctx.pool.len();
    if n < k {
        return Err(Error::InvalidPool(format!("pool size {n} < batch size {k}")));
    }
    match cfg.kind {
        // The pool is an i.i.d. uniform draw, so its first k entries are a
        // uniform sample without replacement; taking them keeps random
        // selection identical across pool ratios for a matched seed stream.
        StrategyKind::Random => Ok((0..k).collect()),
        StrategyKind::Qbc | StrategyKind::Bald | StrategyKind::Emoc
        | StrategyKind::LearningLoss | StrategyKind::Mse => {
            let scores: Vec<f64> = match cfg.kind {
                StrategyKind::Qbc => (0..n).map(|i| score_qbc(ctx, i)).collect::<Result<_>>()?,
                StrategyKind::Bald => (0..n)
                    .map(|i| score_bald(ctx, cfg, i))
                    .collect::<Result<_>>()?,
                StrategyKind::Emoc => {
                    let setup = emoc_setup(ctx, cfg)?;
                    (0..n)
                        .map(|i| emoc_score_with_setup(ctx, &setup, i))
                        .collect::<Result<_>>()?
                }
                StrategyKind::LearningLoss => (0..n)
                    .map(|i| score_learning_loss(ctx, i))
                    .collect::<Result<_>>()?,
                StrategyKind::Mse => (0..n)
                    .map(|i| score_true_mse(ctx, i))
                    .collect::<Result<_>>()?,
                _ => unreachable!(),
            };
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.truncate(k);
            Ok(order)
        }
        _ => {
            // Greedy sequential selection with frozen predicted labels.
            let density = if cfg.kind == StrategyKind::QbcDivDen {
                Some(density_scores(ctx, cfg)?)
            } else {
                None
            };
            let mut remaining: Vec<usize> = (0..n).collect();
            let mut picked = Vec::with_capacity(k);
            for _ in 0..k {
                let scores: Vec<f64> = match cfg.kind {
                    StrategyKind::Gsx => remaining
                        .iter()
                        .map(|&i| score_gsx(ctx, i))
                        .collect::<Result<_>>()?,
                    StrategyKind::Gsy => remaining
                        .iter()
                        .map(|&i| score_gsy(ctx, i))
                        .collect::<Result<_>>()?,
                    StrategyKind::Gsxy => remaining
                        .iter()
                        .map(|&i| score_gsxy(ctx, i))
                        .collect::<Result<_>>()?,
                    StrategyKind::QbcDiv => {
                        combined_terms(ctx, cfg, &remaining, false, None)?
                    }
                    StrategyKind::QbcDivDen => {
                        combined_terms(ctx, cfg, &remaining, true, density.as_deref())?
                    }
                    _ => unreachable!(),
                };
                let choice = argmax_lowest_index(&scores, &remaining);
                ctx.selected_x.push(ctx.pool[choice].clone());
                ctx.selected_y.push(ctx.pool_mean[choice].clone());
                picked.push(choice);
                remaining.retain(|&i| i != choice);
            }
            Ok(picked)
        }
    }
}
