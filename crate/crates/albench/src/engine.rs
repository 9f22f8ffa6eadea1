//! The active-learning loop: initialize, iterate (train, pool, score, label,
//! append), record.

use std::time::Instant;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{select_batch, AcquisitionContext, StrategyConfig, StrategyKind};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{
    self, train_member, train_member_with_head, AuxHeadSpec, EnsembleModel, LossHeadConfig,
    NetworkSpec, Parameters, TrainConfig,
};
use crate::oracles::ProblemSpec;
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub problem: String,
    pub strategy: StrategyConfig,
    /// Pool ratio; the per-step pool holds k * gamma points.
    pub gamma: usize,
    /// Points labeled per step.
    pub k: usize,
    /// Number of AL steps.
    pub steps: usize,
    pub n_initial: usize,
    pub n_test: usize,
    pub ensemble_size: usize,
    /// Shrinks hidden widths (desk-scale runs).
    pub hidden_scale: f64,
    /// Upper bound on hidden widths after scaling (desk-scale runs cap the
    /// widest problem networks).
    #[serde(default)]
    pub hidden_width_cap: Option<usize>,
    pub train: TrainConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(problem: &str, strategy: StrategyConfig, gamma: usize, seed: u64) -> Self {
        RunConfig {
            problem: problem.into(),
            strategy,
            gamma,
            k: 40,
            steps: 50,
            n_initial: 80,
            n_test: 4000,
            ensemble_size: 10,
            hidden_scale: 1.0,
            hidden_width_cap: None,
            train: TrainConfig::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma == 0 || self.k == 0 || self.n_initial == 0 || self.n_test == 0 {
            return Err(Error::InvalidInput("counts must be positive".into()));
        }
        if self.ensemble_size == 0 || self.hidden_scale <= 0.0 {
            return Err(Error::InvalidInput("bad ensemble or width scale".into()));
        }
        if self.hidden_width_cap == Some(0) {
            return Err(Error::InvalidInput("hidden_width_cap must be positive".into()));
        }
        self.train.validate()?;
        self.strategy.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// |L| at the start of the step (= n_initial + step * k).
    pub n_labeled: usize,
    pub test_mse: f64,
    /// Mean nearest-neighbor distance within the step's query batch.
    pub batch_div: f64,
    pub pool_seed: u64,
    pub sample_time_s: f64,
    pub train_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    Failed { step: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub code_version: String,
    pub normalize_terms: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub steps: Vec<StepRecord>,
    pub status: RunStatus,
    pub metadata: RunMetadata,
}

/// Mean squared error of the ensemble mean over a labeled test set.
pub fn evaluate(
    ensemble: &EnsembleModel,
    test_x: ArrayView2<f64>,
    test_y: ArrayView2<f64>,
) -> Result<f64> {
    let pred = ensemble.predict_mean_batch(test_x)?;
    let resid = &pred - &test_y;
    Ok(resid.iter().map(|r| r * r).sum::<f64>() / (test_y.nrows() as f64 * test_y.ncols() as f64))
}

/// The fixed test-set seed stream depends on the problem name only, so every
/// run of a problem shares one test set.
pub fn test_set_seed(problem: &str) -> u64 {
    derive_seed(0, &format!("test-set:{problem}"))
}

fn train_reporting_ensemble(
    spec: &NetworkSpec,
    cfg: &RunConfig,
    step: usize,
    lx: ArrayView2<f64>,
    ly: ArrayView2<f64>,
) -> Result<EnsembleModel> {
    let seed_base = derive_seed(cfg.seed, "members");
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(cfg.seed, &format!("train{step}"));
    let with_head = cfg.strategy.kind == StrategyKind::LearningLoss;
    if !with_head {
        let (ensemble, _) =
            nn::train_ensemble(spec, seed_base, cfg.ensemble_size, lx, ly, &train_cfg)?;
        return Ok(ensemble);
    }
    // LearningLoss: joint trunk+head training per member.
    let ll = LossHeadConfig {
        weight: cfg.strategy.ll_weight,
        joint_fraction: cfg.strategy.ll_joint_fraction,
        margin: cfg.strategy.ll_margin,
    };
    let results: Vec<(Parameters, nn::AuxHeadParams, Vec<f64>)> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|i| {
            train_member_with_head(
                spec,
                EnsembleModel::member_seed(seed_base, i),
                lx,
                ly,
                &train_cfg,
                &ll,
            )
        })
        .collect::<Result<_>>()?;
    let mut members = Vec::with_capacity(results.len());
    let mut heads = Vec::with_capacity(results.len());
    for (p, h, _) in results {
        members.push(p);
        heads.push(h);
    }
    Ok(EnsembleModel {
        spec: spec.clone(),
        seed_base,
        members,
        aux_heads: Some(heads),
        trained: true,
    })
}

/// One retry with a perturbed training seed before giving up on a step.
fn train_with_retry(
    spec: &NetworkSpec,
    cfg: &RunConfig,
    step: usize,
    lx: ArrayView2<f64>,
    ly: ArrayView2<f64>,
) -> Result<EnsembleModel> {
    match train_reporting_ensemble(spec, cfg, step, lx, ly) {
        Ok(e) => Ok(e),
        Err(Error::TrainingDiverged { .. }) => {
            let mut retry_cfg = cfg.clone();
            retry_cfg.seed = derive_seed(cfg.seed, "retry");
            train_reporting_ensemble(spec, &retry_cfg, step, lx, ly)
        }
        Err(e) => Err(e),
    }
}

/// The problem's architecture under the config's width scale and cap.
fn network_for(problem: &ProblemSpec, cfg: &RunConfig, dropout: f64) -> NetworkSpec {
    let mut spec = problem.network(cfg.hidden_scale, dropout);
    if let Some(cap) = cfg.hidden_width_cap {
        let last = spec.layer_widths.len() - 1;
        for w in &mut spec.layer_widths[1..last] {
            *w = (*w).min(cap);
        }
    }
    spec
}

fn train_dropout_scorer(
    problem: &ProblemSpec,
    cfg: &RunConfig,
    step: usize,
    lx: ArrayView2<f64>,
    ly: ArrayView2<f64>,
) -> Result<(NetworkSpec, Parameters)> {
    let spec = network_for(problem, cfg, cfg.strategy.bald_dropout);
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(cfg.seed, &format!("bald-train{step}"));
    let init_seed = derive_seed(cfg.seed, "bald-member");
    let (params, _) = train_member(&spec, init_seed, lx, ly, &train_cfg)?;
    Ok((spec, params))
}

/// Executes one full active-learning run. Deterministic given the config.
pub fn run(problem: &ProblemSpec, cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    if problem.name != cfg.problem {
        return Err(Error::Config(format!(
            "problem '{}' does not match config '{}'",
            problem.name, cfg.problem
        )));
    }
    let mut spec = network_for(problem, cfg, 0.0);
    if cfg.strategy.kind == StrategyKind::LearningLoss {
        let hidden = spec.num_hidden();
        let taps: Vec<usize> = (hidden.saturating_sub(3)..hidden).collect();
        spec.aux_head = Some(AuxHeadSpec {
            tap_layers: taps,
            tap_width: cfg.strategy.ll_tap_width,
        });
    }

    // Fixed test set, shared by every run of this problem.
    let mut test_rng = ChaCha8Rng::seed_from_u64(test_set_seed(&problem.name));
    let test_x = problem.sample_uniform(cfg.n_test, &mut test_rng);
    let test_y = problem.label_batch(&test_x)?;
    let (test_xm, test_ym) = (nn::as_matrix(&test_x), nn::as_matrix(&test_y));

    // Initial labeled set.
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "initial"));
    let initial_x = problem.sample_uniform(cfg.n_initial, &mut init_rng);
    let mut labeled_x = initial_x.clone();
    let mut labeled_y = problem.label_batch(&labeled_x)?;

    let metadata = RunMetadata {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        normalize_terms: cfg.strategy.normalize_terms,
    };
    let mut steps = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let n_labeled = labeled_x.len();
        let (lx, ly) = (nn::as_matrix(&labeled_x), nn::as_matrix(&labeled_y));

        let train_start = Instant::now();
        let ensemble = match train_with_retry(&spec, cfg, step, lx.view(), ly.view()) {
            Ok(e) => e,
            Err(e) => {
                return Ok(RunRecord {
                    config: cfg.clone(),
                    steps,
                    status: RunStatus::Failed {
                        step,
                        reason: e.to_string(),
                    },
                    metadata,
                })
            }
        };
        let dropout_model = if cfg.strategy.kind == StrategyKind::Bald {
            match train_dropout_scorer(problem, cfg, step, lx.view(), ly.view()) {
                Ok(m) => Some(m),
                Err(e) => {
                    return Ok(RunRecord {
                        config: cfg.clone(),
                        steps,
                        status: RunStatus::Failed {
                            step,
                            reason: e.to_string(),
                        },
                        metadata,
                    })
                }
            }
        } else {
            None
        };
        let train_time_s = train_start.elapsed().as_secs_f64();

        let test_mse = evaluate(&ensemble, test_xm.view(), test_ym.view())?;

        // Fresh pool, then greedy/top-k selection.
        let sample_start = Instant::now();
        let pool_seed = derive_seed(cfg.seed, &format!("pool{step}"));
        let mut pool_rng = ChaCha8Rng::seed_from_u64(pool_seed);
        let pool = problem.sample_uniform(cfg.k * cfg.gamma, &mut pool_rng);
        let acq_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("acq{step}")));
        let mut ctx = AcquisitionContext::new(
            &labeled_x,
            &labeled_y,
            &pool,
            &ensemble,
            dropout_model.as_ref(),
            Some(problem),
            &initial_x,
            &problem.bounds,
            acq_rng,
        )?;
        let picked = select_batch(&mut ctx, &cfg.strategy, cfg.k)?;
        let batch: Vec<Vec<f64>> = picked.iter().map(|&i| pool[i].clone()).collect();
        let sample_time_s = sample_start.elapsed().as_secs_f64();

        let batch_div = if batch.len() >= 2 {
            metrics::batch_div(&batch)?
        } else {
            0.0
        };

        let batch_y = problem.label_batch(&batch)?;
        labeled_x.extend(batch);
        labeled_y.extend(batch_y);

        steps.push(StepRecord {
            step,
            n_labeled,
            test_mse,
            batch_div,
            pool_seed,
            sample_time_s,
            train_time_s,
        });
    }

    Ok(RunRecord {
        config: cfg.clone(),
        steps,
        status: RunStatus::Completed,
        metadata,
    })
}

/// Per-run curve summary over the recorded trace.
pub fn summarize(record: &RunRecord) -> Result<metrics::CurveSummary> {
    let series: Vec<(f64, f64)> = record
        .steps
        .iter()
        .map(|s| (s.step as f64, s.test_mse))
        .collect();
    let auc_mse = metrics::auc_trapezoid(&series)?;
    let div = record.steps.iter().map(|s| s.batch_div).sum::<f64>() / record.steps.len() as f64;
    Ok(metrics::CurveSummary { auc_mse, div })
}
