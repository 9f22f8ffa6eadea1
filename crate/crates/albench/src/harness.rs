//! Experiment-grid execution: configuration, on-disk persistence with
//! resumption, and report generation (the plot-ready summary tables).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::{StrategyConfig, StrategyKind};
use crate::engine::{self, RunConfig, RunRecord, RunStatus};
use crate::error::{Error, Result};
use crate::metrics::{self, CurveSummary, NormalizedSummary};
use crate::nn::TrainConfig;
use crate::oracles::{ProblemSpec, BUILTIN_PROBLEMS, DATASET_PROBLEMS};
use crate::util::fnv1a64;

/// Environment variable overriding the configured base seed.
pub const BASE_SEED_ENV: &str = "ALBENCH_BASE_SEED";

fn default_gammas() -> Vec<usize> {
    vec![2, 4, 8, 16, 32, 64]
}

fn default_repeats() -> usize {
    5
}

fn default_one() -> f64 {
    1.0
}

fn default_k() -> usize {
    40
}

fn default_steps() -> usize {
    50
}

fn default_n_initial() -> usize {
    80
}

fn default_n_test() -> usize {
    4000
}

fn default_ensemble() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub problems: Vec<String>,
    pub strategies: Vec<StrategyKind>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<usize>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_n_initial")]
    pub n_initial: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default = "default_ensemble")]
    pub ensemble_size: usize,
    #[serde(default = "default_one")]
    pub hidden_scale: f64,
    #[serde(default)]
    pub hidden_width_cap: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub strategy_options: StrategyOptions,
    /// CSV table paths for the dataset-backed problems, keyed by problem name.
    #[serde(default)]
    pub datasets: BTreeMap<String, PathBuf>,
}

/// Strategy hyperparameters shared by every cell of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyOptions {
    pub alpha: Option<f64>,
    pub alpha_beta: Option<(f64, f64)>,
    pub density_k: Option<usize>,
    pub bald_passes: Option<usize>,
    pub bald_dropout: Option<f64>,
    pub emoc_param_cap: Option<usize>,
    pub ll_weight: Option<f64>,
    pub normalize_terms: Option<bool>,
}

impl StrategyOptions {
    fn apply(&self, mut cfg: StrategyConfig) -> StrategyConfig {
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.alpha_beta {
            cfg.alpha_beta = v;
        }
        if let Some(v) = self.density_k {
            cfg.density_k = v;
        }
        if let Some(v) = self.bald_passes {
            cfg.bald_passes = v;
        }
        if let Some(v) = self.bald_dropout {
            cfg.bald_dropout = v;
        }
        if let Some(v) = self.emoc_param_cap {
            cfg.emoc_param_cap = v;
        }
        if let Some(v) = self.ll_weight {
            cfg.ll_weight = v;
        }
        if let Some(v) = self.normalize_terms {
            cfg.normalize_terms = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Small widths and short loops for quick checks on a modest CPU.
    Desk,
    /// The full experimental scale.
    Full,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Preset> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    /// Overwrites the scale-related fields of a grid in place.
    pub fn apply(self, grid: &mut GridSpec) {
        match self {
            Preset::Full => {
                grid.steps = 50;
                grid.repeats = 5;
                grid.n_test = 4000;
                grid.hidden_width_cap = None;
                grid.train.learning_rate = 1e-3;
                grid.ensemble_size = 10;
                grid.hidden_scale = 1.0;
                grid.train.epochs = 500;
                grid.train.plateau_decay = 0.8;
            }
            Preset::Desk => {
                grid.steps = 10;
                grid.repeats = 3;
                grid.n_test = 1000;
                grid.ensemble_size = 5;
                grid.hidden_scale = 1.0;
                grid.hidden_width_cap = Some(32);
                grid.train.epochs = 2000;
                grid.train.learning_rate = 1e-2;
                grid.train.plateau_decay = 0.95;
            }
        }
    }
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<GridSpec> {
        let grid: GridSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<GridSpec> {
        GridSpec::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.problems.is_empty() || self.strategies.is_empty() || self.gammas.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        let known: BTreeSet<&str> = BUILTIN_PROBLEMS
            .iter()
            .chain(DATASET_PROBLEMS.iter())
            .copied()
            .collect();
        for p in &self.problems {
            if !known.contains(p.as_str()) {
                return Err(Error::Config(format!("unknown problem '{p}'")));
            }
            if DATASET_PROBLEMS.contains(&p.as_str()) && !self.datasets.contains_key(p) {
                return Err(Error::Config(format!(
                    "problem '{p}' needs a [datasets] entry with its CSV table"
                )));
            }
        }
        self.train.validate()
    }

    /// Base seed, honoring the environment override.
    pub fn effective_base_seed(&self) -> Result<u64> {
        match std::env::var(BASE_SEED_ENV) {
            Ok(v) => v
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{BASE_SEED_ENV} must be a u64"))),
            Err(_) => Ok(self.base_seed),
        }
    }

    pub fn load_problem(&self, name: &str) -> Result<ProblemSpec> {
        if BUILTIN_PROBLEMS.contains(&name) {
            return ProblemSpec::builtin(name);
        }
        let path = self
            .datasets
            .get(name)
            .ok_or_else(|| Error::Config(format!("no dataset table configured for '{name}'")))?;
        let table = crate::oracles::DatasetOracleTable::load_csv(path, crate::oracles::DEFAULT_KNN)?;
        ProblemSpec::dataset(name, table)
    }

    /// Enumerates every (problem, strategy, gamma, repeat) cell in a fixed
    /// order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let base = self.effective_base_seed()?;
        let mut cells = Vec::new();
        for problem in &self.problems {
            for &strategy in &self.strategies {
                for &gamma in &self.gammas {
                    for repeat in 0..self.repeats {
                        cells.push(Cell {
                            problem: problem.clone(),
                            strategy,
                            gamma,
                            repeat,
                            seed: cell_seed(base, problem, strategy, gamma, repeat),
                        });
                    }
                }
            }
        }
        Ok(cells)
    }

    pub fn run_config(&self, cell: &Cell) -> RunConfig {
        RunConfig {
            problem: cell.problem.clone(),
            strategy: self
                .strategy_options
                .apply(StrategyConfig::new(cell.strategy)),
            gamma: cell.gamma,
            k: self.k,
            steps: self.steps,
            n_initial: self.n_initial,
            n_test: self.n_test,
            ensemble_size: self.ensemble_size,
            hidden_scale: self.hidden_scale,
            hidden_width_cap: self.hidden_width_cap,
            train: self.train.clone(),
            seed: cell.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub problem: String,
    pub strategy: StrategyKind,
    pub gamma: usize,
    pub repeat: usize,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!(
            "{}/{}/g{}/r{}",
            self.problem,
            self.strategy.name(),
            self.gamma,
            self.repeat
        )
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(&self.problem)
            .join(self.strategy.name())
            .join(format!("g{}", self.gamma))
            .join(format!("r{}", self.repeat))
    }
}

/// Cell seed: 64-bit FNV-1a over the canonical cell name, XOR the base seed.
pub fn cell_seed(base: u64, problem: &str, strategy: StrategyKind, gamma: usize, repeat: usize) -> u64 {
    let name = format!("{problem}/{}/g{gamma}/r{repeat}", strategy.name());
    fnv1a64(name.as_bytes()) ^ base
}

#[derive(Debug, Serialize, Deserialize)]
struct SealedRecord {
    /// SHA-256 hex digest of the serialized record field.
    checksum: String,
    record: RunRecord,
}

fn record_checksum(record: &RunRecord) -> Result<String> {
    let bytes = serde_json::to_vec(record)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

pub fn save_record(dir: &Path, record: &RunRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sealed = SealedRecord {
        checksum: record_checksum(record)?,
        record: record.clone(),
    };
    let json = serde_json::to_vec_pretty(&sealed)?;
    fs::write(dir.join("run.json"), json)?;
    let mut csv = String::from("step,n_labeled,test_mse,batch_div,sample_time_s\n");
    for s in &record.steps {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.step, s.n_labeled, s.test_mse, s.batch_div, s.sample_time_s
        ));
    }
    fs::write(dir.join("trace.csv"), csv)?;
    Ok(())
}

/// Loads and checksum-verifies a record; corrupt files are a hard error, not
/// a silent skip.
pub fn load_record(dir: &Path) -> Result<RunRecord> {
    let path = dir.join("run.json");
    let bytes = fs::read(&path)?;
    let sealed: SealedRecord = serde_json::from_slice(&bytes)?;
    let expect = record_checksum(&sealed.record)?;
    if sealed.checksum != expect {
        return Err(Error::Config(format!(
            "checksum mismatch in {}",
            path.display()
        )));
    }
    Ok(sealed.record)
}

fn cell_complete(dir: &Path) -> bool {
    dir.join("run.json").exists()
}

/// Executes the whole grid, skipping cells whose record already exists on
/// disk. Returns all records (loaded or freshly computed) in cell order.
pub fn run_grid(grid: &GridSpec, out: &Path, workers: usize) -> Result<Vec<RunRecord>> {
    grid.validate()?;
    fs::create_dir_all(out)?;
    let cells = grid.cells()?;
    // Dataset tables load once per problem, not once per cell.
    let mut problems: BTreeMap<String, ProblemSpec> = BTreeMap::new();
    for p in &grid.problems {
        problems.insert(p.clone(), grid.load_problem(p)?);
    }

    let execute = |cell: &Cell| -> Result<RunRecord> {
        let dir = cell.dir(out);
        if cell_complete(&dir) {
            return load_record(&dir);
        }
        let cfg = grid.run_config(cell);
        let record = engine::run(&problems[&cell.problem], &cfg)?;
        save_record(&dir, &record)?;
        Ok(record)
    };

    if workers <= 1 {
        cells.iter().map(execute).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| cells.par_iter().map(execute).collect())
    }
}

/// Loads every sealed record under an output directory tree.
pub fn load_all_records(out: &Path) -> Result<Vec<RunRecord>> {
    let mut dirs = Vec::new();
    collect_record_dirs(out, &mut dirs)?;
    dirs.sort();
    dirs.iter().map(|d| load_record(d)).collect()
}

fn collect_record_dirs(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join("run.json").is_file() {
        acc.push(dir.to_path_buf());
        return Ok(());
    }
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                collect_record_dirs(&path, acc)?;
            }
        }
    }
    Ok(())
}

/// One completed cell with its curve summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub strategy: String,
    pub problem: String,
    pub gamma: usize,
    pub seed: u64,
    pub curve: CurveSummary,
    pub normalized: NormalizedSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailedCell {
    pub strategy: String,
    pub problem: String,
    pub gamma: usize,
    pub seed: u64,
    pub step: usize,
    pub reason: String,
}

/// Per-strategy nAUC range across pool ratios for one problem, plus the
/// value at the strategy's cross-problem best ratio (the γ-prior column).
#[derive(Debug, Clone, PartialEq)]
pub struct RangeRow {
    pub strategy: String,
    pub problem: String,
    pub min_nauc: f64,
    pub mean_nauc: f64,
    pub max_nauc: f64,
    pub gamma_prior: usize,
    pub gamma_prior_nauc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub summaries: Vec<CellSummary>,
    pub failed: Vec<FailedCell>,
    /// Fig 3 data: nAUC range over γ per (strategy, problem).
    pub ranges: Vec<RangeRow>,
    /// Fig 4 data: strategy -> γ -> count of problems where γ is best.
    pub best_gamma: BTreeMap<String, BTreeMap<usize, usize>>,
    /// Fig 5 data: (strategy, problem, γ) -> mean nDiv.
    pub ndiv_table: BTreeMap<(String, String, usize), f64>,
    /// Strategy -> (mean sampling s/step, mean training s/step).
    pub timing: BTreeMap<String, (f64, f64)>,
}

/// Mean per-step sampling seconds grouped by strategy.
pub fn timing_table(records: &[RunRecord]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums
            .entry(r.config.strategy.kind.name().to_string())
            .or_insert((0.0, 0));
        for s in &r.steps {
            e.0 += s.sample_time_s;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(k, (t, n))| (k, t / n as f64))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Builds every aggregate table from a set of run records.
pub fn report(records: &[RunRecord]) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to report on".into()));
    }
    let mut failed = Vec::new();
    let mut completed: Vec<(&RunRecord, CurveSummary)> = Vec::new();
    for r in records {
        match &r.status {
            RunStatus::Completed => completed.push((r, engine::summarize(r)?)),
            RunStatus::Failed { step, reason } => failed.push(FailedCell {
                strategy: r.config.strategy.kind.name().to_string(),
                problem: r.config.problem.clone(),
                gamma: r.config.gamma,
                seed: r.config.seed,
                step: *step,
                reason: reason.clone(),
            }),
        }
    }
    if completed.is_empty() {
        return Err(Error::InvalidInput("all records failed".into()));
    }

    // Random normalizer per problem, pooled over γ and repeats.
    let mut random_by_problem: BTreeMap<String, Vec<CurveSummary>> = BTreeMap::new();
    for (r, c) in &completed {
        if r.config.strategy.kind == StrategyKind::Random {
            random_by_problem
                .entry(r.config.problem.clone())
                .or_default()
                .push(c.clone());
        }
    }

    let mut summaries = Vec::new();
    for (r, curve) in &completed {
        let rand = random_by_problem.get(&r.config.problem).ok_or_else(|| {
            Error::InvalidInput(format!(
                "no Random baseline runs for problem '{}'",
                r.config.problem
            ))
        })?;
        let normalized = metrics::normalize(std::slice::from_ref(curve), rand)?[0];
        summaries.push(CellSummary {
            strategy: r.config.strategy.kind.name().to_string(),
            problem: r.config.problem.clone(),
            gamma: r.config.gamma,
            seed: r.config.seed,
            curve: curve.clone(),
            normalized,
        });
    }
    summaries.sort_by(|a, b| {
        (&a.strategy, &a.problem, a.gamma, a.seed).cmp(&(&b.strategy, &b.problem, b.gamma, b.seed))
    });

    // Mean nAUC / nDiv over repeats per (strategy, problem, γ).
    let mut nauc_cell: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    let mut ndiv_cell: BTreeMap<(String, String, usize), Vec<f64>> = BTreeMap::new();
    for s in &summaries {
        let key = (s.strategy.clone(), s.problem.clone(), s.gamma);
        nauc_cell
            .entry(key.clone())
            .or_default()
            .push(s.normalized.nauc_mse);
        ndiv_cell.entry(key).or_default().push(s.normalized.ndiv);
    }
    let mean_nauc: BTreeMap<(String, String, usize), f64> = nauc_cell
        .iter()
        .map(|(k, v)| (k.clone(), mean(v)))
        .collect();
    let ndiv_table: BTreeMap<(String, String, usize), f64> = ndiv_cell
        .iter()
        .map(|(k, v)| (k.clone(), mean(v)))
        .collect();

    // Best γ per (strategy, problem) feeds the histogram.
    let hist_input: Vec<(String, String, usize, f64)> = mean_nauc
        .iter()
        .map(|((s, p, g), v)| (s.clone(), p.clone(), *g, *v))
        .collect();
    let best_gamma = metrics::best_gamma_histogram(&hist_input);

    // γ-prior: the γ minimizing the cross-problem mean nAUC per strategy.
    let mut cross: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for ((s, _, g), v) in &mean_nauc {
        cross.entry((s.clone(), *g)).or_default().push(*v);
    }
    let mut gamma_prior: BTreeMap<String, usize> = BTreeMap::new();
    for ((s, g), v) in &cross {
        let m = mean(v);
        match gamma_prior.get(s) {
            Some(&best_g) => {
                let best = mean(&cross[&(s.clone(), best_g)]);
                if m < best {
                    gamma_prior.insert(s.clone(), *g);
                }
            }
            None => {
                gamma_prior.insert(s.clone(), *g);
            }
        }
    }

    let mut ranges = Vec::new();
    let pairs: BTreeSet<(String, String)> = mean_nauc
        .keys()
        .map(|(s, p, _)| (s.clone(), p.clone()))
        .collect();
    for (s, p) in pairs {
        let vals: Vec<f64> = mean_nauc
            .iter()
            .filter(|((ks, kp, _), _)| *ks == s && *kp == p)
            .map(|(_, v)| *v)
            .collect();
        let prior_g = gamma_prior[&s];
        let prior_nauc = mean_nauc
            .get(&(s.clone(), p.clone(), prior_g))
            .copied()
            .unwrap_or(f64::NAN);
        ranges.push(RangeRow {
            strategy: s,
            problem: p,
            min_nauc: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            mean_nauc: mean(&vals),
            max_nauc: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            gamma_prior: prior_g,
            gamma_prior_nauc: prior_nauc,
        });
    }

    // Timing split: sampling vs training, reported separately.
    let mut timing = BTreeMap::new();
    let sample_means = timing_table(records);
    let mut train_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = train_sums
            .entry(r.config.strategy.kind.name().to_string())
            .or_insert((0.0, 0));
        for s in &r.steps {
            e.0 += s.train_time_s;
            e.1 += 1;
        }
    }
    for (k, sample) in sample_means {
        let (t, n) = train_sums[&k];
        timing.insert(k, (sample, t / n as f64));
    }

    Ok(ReportBundle {
        summaries,
        failed,
        ranges,
        best_gamma,
        ndiv_table,
        timing,
    })
}

/// Writes the bundle as CSV files. Pure function of the bundle: identical
/// inputs give byte-identical files.
pub fn emit_report(bundle: &ReportBundle, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut summary = String::from("strategy,problem,gamma,seed,auc_mse,nauc_mse,div,ndiv\n");
    for s in &bundle.summaries {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.strategy,
            s.problem,
            s.gamma,
            s.seed,
            s.curve.auc_mse,
            s.normalized.nauc_mse,
            s.curve.div,
            s.normalized.ndiv
        ));
    }
    write_file(out, "summary.csv", &summary)?;

    let mut ranges = String::from(
        "strategy,problem,min_nauc,mean_nauc,max_nauc,gamma_prior,gamma_prior_nauc\n",
    );
    for r in &bundle.ranges {
        ranges.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.strategy,
            r.problem,
            r.min_nauc,
            r.mean_nauc,
            r.max_nauc,
            r.gamma_prior,
            r.gamma_prior_nauc
        ));
    }
    write_file(out, "nauc_ranges.csv", &ranges)?;

    let mut hist = String::from("strategy,gamma,count\n");
    for (s, gs) in &bundle.best_gamma {
        for (g, c) in gs {
            hist.push_str(&format!("{s},{g},{c}\n"));
        }
    }
    write_file(out, "best_gamma_histogram.csv", &hist)?;

    let mut ndiv = String::from("strategy,problem,gamma,ndiv\n");
    for ((s, p, g), v) in &bundle.ndiv_table {
        ndiv.push_str(&format!("{s},{p},{g},{v}\n"));
    }
    write_file(out, "ndiv_by_gamma.csv", &ndiv)?;

    let mut timing = String::from("strategy,sample_s_per_step,train_s_per_step\n");
    for (s, (sample, train)) in &bundle.timing {
        timing.push_str(&format!("{s},{sample},{train}\n"));
    }
    write_file(out, "timing.csv", &timing)?;

    let mut failed = String::from("strategy,problem,gamma,seed,step,reason\n");
    for f in &bundle.failed {
        failed.push_str(&format!(
            "{},{},{},{},{},{}\n",
            f.strategy,
            f.problem,
            f.gamma,
            f.seed,
            f.step,
            f.reason.replace(',', ";")
        ));
    }
    write_file(out, "failed.csv", &failed)?;
    Ok(())
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<()> {
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{RunMetadata, StepRecord};

    fn fake_record(strategy: StrategyKind, problem: &str, gamma: usize, seed: u64, mses: &[f64], divs: &[f64]) -> RunRecord {
        let steps = mses
            .iter()
            .zip(divs)
            .enumerate()
            .map(|(i, (&m, &d))| StepRecord {
                step: i,
                n_labeled: 80 + i * 40,
                test_mse: m,
                batch_div: d,
                pool_seed: 0,
                sample_time_s: 2.0,
                train_time_s: 1.0,
            })
            .collect();
        RunRecord {
            config: RunConfig {
                problem: problem.into(),
                strategy: StrategyConfig::new(strategy),
                gamma,
                k: 40,
                steps: mses.len(),
                n_initial: 80,
                n_test: 10,
                ensemble_size: 1,
                hidden_scale: 1.0,
                hidden_width_cap: None,
                train: TrainConfig::default(),
                seed,
            },
            steps,
            status: RunStatus::Completed,
            metadata: RunMetadata {
                code_version: "test".into(),
                normalize_terms: true,
            },
        }
    }

    #[test]
    fn cell_seeds_distinct_for_large_grid() {
        // 8 problems x 11 strategies x 6 gammas x 5 repeats < 10^4 cells.
        let mut seen = BTreeSet::new();
        for p in BUILTIN_PROBLEMS.iter().chain(DATASET_PROBLEMS.iter()) {
            for s in crate::acquisition::ALL_STRATEGIES {
                for g in [2usize, 4, 8, 16, 32, 64] {
                    for r in 0..5 {
                        assert!(seen.insert(cell_seed(42, p, s, g, r)));
                    }
                }
            }
        }
        assert_eq!(seen.len(), 8 * 11 * 6 * 5);
    }

    #[test]
    fn grid_enumeration_counts_and_distinct_seeds() {
        let grid = GridSpec {
            problems: vec!["sine".into()],
            strategies: vec![StrategyKind::Random, StrategyKind::Gsx],
            gammas: vec![2, 4],
            repeats: 2,
            base_seed: 7,
            k: 2,
            steps: 1,
            n_initial: 4,
            n_test: 8,
            ensemble_size: 1,
            hidden_scale: 0.1,
            hidden_width_cap: None,
            train: TrainConfig::default(),
            strategy_options: StrategyOptions::default(),
            datasets: BTreeMap::new(),
        };
        let cells = grid.cells().unwrap();
        assert_eq!(cells.len(), 8);
        let seeds: BTreeSet<u64> = cells.iter().map(|c| c.seed).collect();
        assert_eq!(seeds.len(), 8);
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let grid = GridSpec::from_toml(
            "problems = [\"sine\"]\nstrategies = [\"random\", \"qbc\"]\n",
        )
        .unwrap();
        assert_eq!(grid.gammas, vec![2, 4, 8, 16, 32, 64]);
        assert_eq!(grid.repeats, 5);
        assert_eq!(grid.steps, 50);
        assert_eq!(grid.train.epochs, 500);
    }

    #[test]
    fn config_rejects_bad_grid() {
        assert!(GridSpec::from_toml("problems = []\nstrategies = [\"random\"]\n").is_err());
        assert!(GridSpec::from_toml("problems = [\"nope\"]\nstrategies = [\"random\"]\n").is_err());
        // Dataset problem without a table path.
        assert!(GridSpec::from_toml("problems = [\"foil\"]\nstrategies = [\"random\"]\n").is_err());
    }

    #[test]
    fn timing_table_examples() {
        let one = fake_record(StrategyKind::Qbc, "sine", 2, 1, &[1.0, 1.0], &[0.5, 0.5]);
        let t = timing_table(&[one.clone()]);
        assert_eq!(t["qbc"], 2.0);
        // Two records with per-step sampling times 1 and 3 average to 2.
        let mut a = one.clone();
        a.steps.iter_mut().for_each(|s| s.sample_time_s = 1.0);
        let mut b = one;
        b.steps.iter_mut().for_each(|s| s.sample_time_s = 3.0);
        let t = timing_table(&[a, b]);
        assert_eq!(t["qbc"], 2.0);
    }

    #[test]
    fn report_random_only_is_unity() {
        let recs = vec![
            fake_record(StrategyKind::Random, "sine", 2, 1, &[2.0, 2.0], &[0.5, 0.5]),
            fake_record(StrategyKind::Random, "sine", 4, 2, &[2.0, 2.0], &[0.5, 0.5]),
        ];
        let bundle = report(&recs).unwrap();
        for s in &bundle.summaries {
            assert!((s.normalized.nauc_mse - 1.0).abs() < 1e-12);
            assert!((s.normalized.ndiv - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn report_hand_built_two_cell_bundle() {
        let recs = vec![
            fake_record(StrategyKind::Random, "sine", 2, 1, &[4.0, 4.0], &[1.0, 1.0]),
            fake_record(StrategyKind::Gsx, "sine", 2, 2, &[2.0, 2.0], &[2.0, 2.0]),
        ];
        let bundle = report(&recs).unwrap();
        let gsx = bundle
            .summaries
            .iter()
            .find(|s| s.strategy == "gsx")
            .unwrap();
        assert!((gsx.normalized.nauc_mse - 0.5).abs() < 1e-12);
        assert!((gsx.normalized.ndiv - 2.0).abs() < 1e-12);
        // Single gamma -> degenerate histogram at that gamma.
        assert_eq!(bundle.best_gamma["gsx"][&2], 1);
        assert_eq!(bundle.ndiv_table[&("gsx".into(), "sine".into(), 2)], 2.0);
    }

    #[test]
    fn report_rejects_empty() {
        assert!(report(&[]).is_err());
    }

    #[test]
    fn emit_report_is_byte_deterministic() {
        let recs = vec![
            fake_record(StrategyKind::Random, "sine", 2, 1, &[4.0, 3.0], &[1.0, 1.5]),
            fake_record(StrategyKind::Gsx, "sine", 2, 2, &[2.0, 1.0], &[2.0, 2.5]),
        ];
        let bundle = report(&recs).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        emit_report(&bundle, d1.path()).unwrap();
        emit_report(&bundle, d2.path()).unwrap();
        for name in [
            "summary.csv",
            "nauc_ranges.csv",
            "best_gamma_histogram.csv",
            "ndiv_by_gamma.csv",
            "timing.csv",
            "failed.csv",
        ] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
            assert!(!a.is_empty());
        }
    }

    #[test]
    fn sealed_record_round_trip_and_corruption_detection() {
        let rec = fake_record(StrategyKind::Qbc, "sine", 2, 9, &[1.0, 0.5], &[0.2, 0.3]);
        let dir = tempfile::tempdir().unwrap();
        save_record(dir.path(), &rec).unwrap();
        let back = load_record(dir.path()).unwrap();
        assert_eq!(back, rec);
        // Flip a byte inside the record payload.
        let path = dir.path().join("run.json");
        let text = fs::read_to_string(&path).unwrap();
        let bad = text.replacen("\"gamma\": 2", "\"gamma\": 3", 1);
        assert_ne!(text, bad);
        fs::write(&path, bad).unwrap();
        assert!(load_record(dir.path()).is_err());
    }
}
