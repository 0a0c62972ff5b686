//! Experiment orchestration: run configs, splits, training with early
//! stopping, ATE and dose-curve metrics, replication tables, β sweeps and
//! convergence-rate studies.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisConfig;
use crate::dgp::{generate, synthetic_covariates, Dataset, Dgp, DgpSpec, OracleValue, Scenario};
use crate::edf::FamilySpec;
use crate::error::{Error, Result};
use crate::estimators::{estimate_report, psi_dr, psi_plugin, CorruptedNuisance, EstimateReport, Nuisance, OracleNuisance};
use crate::model::{Batch, Model, ModelConfig, TreatmentKind};
use crate::netcore::{Activation, OptimState, OptimizerConfig};
use crate::objective::{evaluate, polish_eps, LossConfig, PolishReport};
use crate::seeds::{rep_stream, sha256_hex, substream};

pub const RUN_SCHEMA_VERSION: u32 = 1;
pub const TABLE_SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "EF_TARGET_THREADS";

/// Network shape; the treatment kind, family and input width come from the
/// data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_rep_dims")]
    pub rep_dims: Vec<usize>,
    #[serde(default = "default_outcome_dims")]
    pub outcome_dims: Vec<usize>,
    #[serde(default)]
    pub density_dims: Vec<usize>,
    #[serde(default = "default_density_grid")]
    pub density_grid: usize,
    #[serde(default)]
    pub outcome_basis: Option<BasisConfig>,
    #[serde(default)]
    pub eps_basis: Option<BasisConfig>,
    #[serde(default = "default_hidden")]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub outcome_activation: Option<Activation>,
    #[serde(default)]
    pub density_stop_grad: bool,
}

fn default_rep_dims() -> Vec<usize> {
    vec![50, 50]
}
fn default_outcome_dims() -> Vec<usize> {
    vec![50]
}
fn default_density_grid() -> usize {
    10
}
fn default_hidden() -> Activation {
    Activation::Relu
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            rep_dims: default_rep_dims(),
            outcome_dims: default_outcome_dims(),
            density_dims: Vec::new(),
            density_grid: default_density_grid(),
            outcome_basis: None,
            eps_basis: None,
            hidden_activation: default_hidden(),
            outcome_activation: None,
            density_stop_grad: false,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, treatment: TreatmentKind, family: FamilySpec, input_dim: usize) -> ModelConfig {
        ModelConfig {
            treatment,
            family,
            input_dim,
            rep_dims: self.rep_dims.clone(),
            outcome_dims: self.outcome_dims.clone(),
            density_dims: self.density_dims.clone(),
            density_grid: self.density_grid,
            outcome_basis: self.outcome_basis,
            eps_basis: self.eps_basis,
            hidden_activation: self.hidden_activation,
            outcome_activation: self.outcome_activation,
            density_stop_grad: self.density_stop_grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Minibatch size; defaults to 500 above 2000 training rows, else the
    /// full training set.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Gradient tolerance of the final `ε` refit.
    #[serde(default = "default_polish_tol")]
    pub polish_tol: f64,
    #[serde(default = "default_polish_iter")]
    pub polish_max_iter: usize,
}

fn default_epochs() -> usize {
    800
}
fn default_patience() -> usize {
    50
}
fn default_polish_tol() -> f64 {
    1e-8
}
fn default_polish_iter() -> usize {
    100
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            patience: default_patience(),
            batch_size: None,
            optimizer: OptimizerConfig::default(),
            polish_tol: default_polish_tol(),
            polish_max_iter: default_polish_iter(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size_for(&self, n_train: usize) -> usize {
        self.batch_size.unwrap_or(if n_train > 2000 { 500 } else { n_train }).clamp(1, n_train.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const SYNTHETIC: SplitFractions = SplitFractions { train: 0.6, val: 0.2, test: 0.2 };
    pub const SEMI_SYNTHETIC: SplitFractions = SplitFractions { train: 0.67, val: 0.23, test: 0.1 };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must lie in [0, 1] and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of equally spaced doses on which dose curves are estimated.
    #[serde(default = "default_dose_grid")]
    pub dose_grid: usize,
    /// Covariate rows of the Monte-Carlo ATE oracle (synthetic scenario).
    #[serde(default = "default_ate_rows")]
    pub ate_oracle_rows: usize,
    /// Covariate rows of the Monte-Carlo dose-curve oracle (synthetic scenario).
    #[serde(default = "default_curve_rows")]
    pub curve_oracle_rows: usize,
}

fn default_dose_grid() -> usize {
    101
}
fn default_ate_rows() -> usize {
    1_000_000
}
fn default_curve_rows() -> usize {
    10_000
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { dose_grid: default_dose_grid(), ate_oracle_rows: default_ate_rows(), curve_oracle_rows: default_curve_rows() }
    }
}

impl EvalConfig {
    pub fn doses(&self) -> Vec<f64> {
        let k = self.dose_grid;
        (0..k).map(|i| i as f64 / (k - 1) as f64).collect()
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub label: String,
    pub dgp: DgpSpec,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Defaults to 60/20/20 (synthetic) or 67/23/10 (semi-synthetic).
    #[serde(default)]
    pub split: Option<SplitFractions>,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_schema() -> u32 {
    RUN_SCHEMA_VERSION
}
fn default_reps() -> usize {
    5
}

impl RunConfig {
    pub fn new(dgp: DgpSpec) -> Self {
        RunConfig {
            schema_version: RUN_SCHEMA_VERSION,
            label: String::new(),
            dgp,
            model: ArchConfig::default(),
            loss: LossConfig::default(),
            split: None,
            replications: default_reps(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported run schema_version {}", self.schema_version)));
        }
        self.dgp.validate()?;
        self.loss.validate()?;
        self.fractions().validate()?;
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(self.train.optimizer.lr > 0.0) {
            return Err(Error::Config("train.optimizer.lr must be positive".into()));
        }
        if self.eval.dose_grid < 2 {
            return Err(Error::Config("eval.dose_grid must be >= 2".into()));
        }
        if self.eval.ate_oracle_rows == 0 || self.eval.curve_oracle_rows == 0 {
            return Err(Error::Config("eval oracle rows must be >= 1".into()));
        }
        self.model.model_config(self.dgp.treatment, self.dgp.family, 1).resolved(100).validate()
    }

    pub fn fractions(&self) -> SplitFractions {
        self.split.unwrap_or(match self.dgp.scenario {
            Scenario::Synthetic { .. } => SplitFractions::SYNTHETIC,
            Scenario::SemiSynthetic(_) => SplitFractions::SEMI_SYNTHETIC,
        })
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Seed of replication `rep`.
    pub fn rep_seed(&self, rep: usize) -> u64 {
        rep_stream(self.seed, "replication", rep).next_u64()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded permutation split into train/validation/test index sets.
pub fn split(n: usize, fractions: SplitFractions, seed: u64) -> Result<Split> {
    fractions.validate()?;
    let n_train = (n as f64 * fractions.train).round() as usize;
    let n_val = (n as f64 * fractions.val).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!("split of {n} rows leaves an empty part")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(seed, "split"));
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split { train: idx, val, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_total: f64,
    pub val_base: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub polish: Option<PolishReport>,
}

/// Optimize the training objective on the training rows, stop early on the
/// validation base loss, restore the best parameters, then refit `ε` to
/// stationarity on `estimation` (when the regularizer is active).
pub fn train(run: &RunConfig, loss: &LossConfig, data: &Dataset, split: &Split, estimation: &Batch, seed: u64) -> Result<TrainOutcome> {
    loss.validate()?;
    let cfg = run.model.model_config(run.dgp.treatment, run.dgp.family, data.dim()).resolved(split.train.len());
    let mut model = Model::initialized(cfg, &mut substream(seed, "init"))?;
    let full = data.batch();
    let train_b = full.rows(&split.train);
    let val_b = full.rows(&split.val);
    let base_only = LossConfig { treg_enabled: false, ..*loss };
    let bs = run.train.batch_size_for(train_b.len());
    let mut opt = OptimState::new(run.train.optimizer, model.params().len());
    let mut order: Vec<usize> = (0..train_b.len()).collect();
    let mut batch_rng = substream(seed, "batches");

    let mut best = (f64::INFINITY, model.params().to_vec(), 0usize);
    let mut since_best = 0;
    let mut history = Vec::new();
    for epoch in 1..=run.train.epochs {
        order.shuffle(&mut batch_rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let b = train_b.rows(chunk);
            let (parts, grad) = evaluate(&model, model.params(), &b, loss, true)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: non-finite training loss")));
            }
            total += parts.total * chunk.len() as f64;
            opt.step(model.params_mut(), &grad.expect("gradient requested"))?;
        }
        let (vp, _) = evaluate(&model, model.params(), &val_b, &base_only, false)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
        history.push(EpochLog { epoch, train_total: total / train_b.len() as f64, val_base: vp.base });
        if vp.base < best.0 {
            best = (vp.base, model.params().to_vec(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= run.train.patience {
                break;
            }
        }
    }
    let last = *history.last().expect("at least one epoch");
    model.set_params(best.1)?;
    model.meta.seed = seed;
    model.meta.epochs_run = last.epoch;
    model.meta.best_epoch = best.2;
    model.meta.best_val_base_loss = best.0;
    model.meta.final_train_loss = last.train_total;
    let polish = if loss.treg_active() {
        Some(polish_eps(&mut model, estimation, loss, run.train.polish_tol, run.train.polish_max_iter)?)
    } else {
        None
    };
    Ok(TrainOutcome { model, history, polish })
}

pub fn mae_ate(estimate: f64, oracle: f64) -> f64 {
    (estimate - oracle).abs()
}

/// Piecewise-linear interpolation of `values` given on the sorted `grid`.
pub fn interpolate(grid: &[f64], values: &[f64], a: f64) -> f64 {
    let j = grid.partition_point(|&g| g <= a).clamp(1, grid.len() - 1);
    let (g0, g1) = (grid[j - 1], grid[j]);
    let u = ((a - g0) / (g1 - g0)).clamp(0.0, 1.0);
    values[j - 1] + u * (values[j] - values[j - 1])
}

/// Mean squared error of an estimated dose curve at the observed test doses.
pub fn amse_adcf(grid: &[f64], curve: &[f64], test_doses: &[f64], oracle: &[f64]) -> f64 {
    let s: f64 = test_doses.iter().zip(oracle).map(|(&a, &o)| (interpolate(grid, curve, a) - o).powi(2)).sum();
    s / test_doses.len() as f64
}

/// Covariates over which population oracles are averaged: fresh synthetic
/// draws, or the dataset's own rows for semi-synthetic covariates.
pub fn oracle_covariates(run: &RunConfig, data: &Dataset, rows: usize) -> Array2<f64> {
    match run.dgp.scenario {
        Scenario::Synthetic { .. } => synthetic_covariates(rows, &mut substream(run.seed, "mc")),
        Scenario::SemiSynthetic(_) => data.x.clone(),
    }
}

/// Oracle `ψ(a)` at each dose.
pub fn oracle_curve(dgp: &Dgp, x: ArrayView2<f64>, doses: &[f64]) -> Vec<f64> {
    doses.iter().map(|&a| dgp.adcf(x, a, 0).value).collect()
}

/// One end-to-end replication.
#[derive(Debug, Clone)]
pub struct RepOutcome {
    pub rep: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub report: EstimateReport,
    pub model: Model,
    /// The β = 0 model, when it differs from `model`.
    pub baseline: Option<Model>,
}

/// Train, estimate and score one replication. The plug-in metric comes from
/// a model trained with β = 0; when the regularizer is detached from the
/// nuisance heads that model's nuisance parameters coincide bitwise with
/// the targeted model's, so it is not retrained.
pub fn run_replication(run: &RunConfig, rep: usize) -> Result<RepOutcome> {
    replication(run, rep, true)
}

/// With `want_baseline = false` a joint-mode run skips the β = 0 retrain and
/// reports no plug-in metric.
fn replication(run: &RunConfig, rep: usize, want_baseline: bool) -> Result<RepOutcome> {
    let seed = run.rep_seed(rep);
    let (dgp, data) = generate(&run.dgp, seed)?;
    let sp = split(data.len(), run.fractions(), seed)?;
    let est = data.batch();
    let out = train(run, &run.loss, &data, &sp, &est, seed)?;
    let doses = run.eval.doses();
    let clamp = run.loss.overlap_clamp;
    let report = estimate_report(&out.model, &data, &doses, clamp)?;
    let shared = run.loss.detach_nuisances_in_treg || !run.loss.treg_active();
    let baseline = if shared || !want_baseline {
        None
    } else {
        let l0 = LossConfig { beta: 0.0, ..run.loss };
        Some(train(run, &l0, &data, &sp, &est, seed)?.model)
    };
    let base_report = match &baseline {
        Some(m) => estimate_report(m, &data, &doses, clamp)?,
        None => report.clone(),
    };

    let mut metrics = BTreeMap::new();
    match run.dgp.treatment {
        TreatmentKind::Binary => {
            let xo = oracle_covariates(run, &data, run.eval.ate_oracle_rows);
            let truth = dgp.ate(xo.view(), run.seed).value;
            let ate = report.ate.as_ref().expect("binary report has an ATE");
            let ate0 = base_report.ate.as_ref().expect("binary report has an ATE");
            if shared || want_baseline {
                metrics.insert("plugin".into(), mae_ate(ate0.plugin, truth));
            }
            metrics.insert("tr".into(), mae_ate(ate.tr, truth));
            metrics.insert("dr".into(), mae_ate(ate.dr, truth));
        }
        TreatmentKind::Continuous => {
            let xo = oracle_covariates(run, &data, run.eval.curve_oracle_rows);
            let test_doses: Vec<f64> = sp.test.iter().map(|&i| data.a[i]).collect();
            let truth = oracle_curve(&dgp, xo.view(), &test_doses);
            let curve = |r: &EstimateReport, tr: bool| -> Vec<f64> {
                r.doses.iter().map(|d| if tr { d.psi_tr } else { d.psi_plugin }).collect()
            };
            if shared || want_baseline {
                metrics.insert("plugin".into(), amse_adcf(&doses, &curve(&base_report, false), &test_doses, &truth));
            }
            metrics.insert("tr".into(), amse_adcf(&doses, &curve(&report, true), &test_doses, &truth));
        }
    }
    Ok(RepOutcome { rep, seed, metrics, report, model: out.model, baseline })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    /// `None` when the replication failed.
    pub error: Option<String>,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub estimator: String,
    pub mean: f64,
    pub std: f64,
    pub completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema_version: u32,
    pub label: String,
    pub metric: String,
    pub config_hash: String,
    pub reps: Vec<RepRecord>,
    pub summary: Vec<Summary>,
    /// Wall-clock seconds; the only field that differs between reruns.
    pub runtime_secs: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

impl ResultTable {
    pub fn from_records(label: &str, metric: &str, config_hash: String, reps: Vec<RepRecord>, runtime_secs: f64) -> Self {
        let mut names: Vec<String> = reps.iter().flat_map(|r| r.values.keys().cloned()).collect();
        names.sort();
        names.dedup();
        let summary = names
            .into_iter()
            .map(|name| {
                let v: Vec<f64> = reps.iter().filter_map(|r| r.values.get(&name).copied()).collect();
                let (mean, std) = if v.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&v) };
                Summary { estimator: name, mean, std, completed: v.len() }
            })
            .collect();
        ResultTable { schema_version: TABLE_SCHEMA_VERSION, label: label.into(), metric: metric.into(), config_hash, reps, summary, runtime_secs }
    }

    pub fn summary_of(&self, estimator: &str) -> Option<&Summary> {
        self.summary.iter().find(|s| s.estimator == estimator)
    }

    /// Per-replication values of one estimator, in replication order.
    pub fn values_of(&self, estimator: &str) -> Vec<f64> {
        self.reps.iter().filter_map(|r| r.values.get(estimator).copied()).collect()
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let names: Vec<&str> = self.summary.iter().map(|s| s.estimator.as_str()).collect();
        let mut out = format!("{} ({})  config {}\n", self.label, self.metric, &self.config_hash[..12.min(self.config_hash.len())]);
        out.push_str(&format!("{:>5} {:>20}", "rep", "seed"));
        for n in &names {
            out.push_str(&format!(" {n:>12}"));
        }
        out.push('\n');
        for r in &self.reps {
            out.push_str(&format!("{:>5} {:>20}", r.rep, r.seed));
            match &r.error {
                Some(e) => out.push_str(&format!("  failed: {e}")),
                None => {
                    for n in &names {
                        out.push_str(&format!(" {:>12.6}", r.values.get(*n).copied().unwrap_or(f64::NAN)));
                    }
                }
            }
            out.push('\n');
        }
        for (label, pick) in [("mean", 0), ("std", 1)] {
            out.push_str(&format!("{label:>5} {:>20}", ""));
            for s in &self.summary {
                out.push_str(&format!(" {:>12.6}", if pick == 0 { s.mean } else { s.std }));
            }
            out.push('\n');
        }
        out
    }
}

/// Thread pool sized by [`THREADS_ENV`] (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(e.to_string()))
}

/// Run every replication, keeping failures as marked records.
pub fn replicate_detailed(run: &RunConfig) -> Result<Vec<std::result::Result<RepOutcome, (usize, u64, String)>>> {
    run.validate()?;
    let pool = worker_pool()?;
    Ok(pool.install(|| {
        (0..run.replications)
            .into_par_iter()
            .map(|r| run_replication(run, r).map_err(|e| (r, run.rep_seed(r), e.to_string())))
            .collect()
    }))
}

fn metric_name(run: &RunConfig) -> &'static str {
    match run.dgp.treatment {
        TreatmentKind::Binary => "mae_ate",
        TreatmentKind::Continuous => "amse_adcf",
    }
}

fn records(outs: &[std::result::Result<RepOutcome, (usize, u64, String)>]) -> Vec<RepRecord> {
    outs.iter()
        .map(|o| match o {
            Ok(o) => RepRecord { rep: o.rep, seed: o.seed, error: None, values: o.metrics.clone() },
            Err((rep, seed, e)) => RepRecord { rep: *rep, seed: *seed, error: Some(e.clone()), values: BTreeMap::new() },
        })
        .collect()
}

/// Replicated plug-in / targeted (/ doubly robust) comparison.
pub fn replicate(run: &RunConfig) -> Result<ResultTable> {
    let t0 = Instant::now();
    let outs = replicate_detailed(run)?;
    Ok(ResultTable::from_records(&run.label, metric_name(run), run.hash(), records(&outs), t0.elapsed().as_secs_f64()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub schema_version: u32,
    pub label: String,
    pub metric: String,
    pub config_hash: String,
    pub betas: Vec<f64>,
    /// One table per β holding the targeted metric; β = 0 holds the plug-in.
    pub tables: Vec<ResultTable>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{} ({}) beta sweep  config {}\n", self.label, self.metric, &self.config_hash[..12.min(self.config_hash.len())]);
        out.push_str(&format!("{:>8} {:>12} {:>12} {:>5}\n", "beta", "mean", "std", "n"));
        for (b, t) in self.betas.iter().zip(&self.tables) {
            let s = t.summary_of("value").expect("sweep tables hold one column");
            out.push_str(&format!("{b:>8} {:>12.6} {:>12.6} {:>5}\n", s.mean, s.std, s.completed));
        }
        out
    }
}

/// Paired sweep over β: every β reuses the same replication seeds, hence the
/// same data, split and initialization.
pub fn beta_sweep(run: &RunConfig, betas: &[f64]) -> Result<SweepTable> {
    run.validate()?;
    if betas.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(Error::Config("sweep betas must be finite and >= 0".into()));
    }
    let pool = worker_pool()?;
    let mut tables = Vec::with_capacity(betas.len());
    for &beta in betas {
        let t0 = Instant::now();
        let mut r = run.clone();
        r.loss.beta = beta;
        let outs: Vec<_> = pool.install(|| {
            (0..run.replications)
                .into_par_iter()
                .map(|rep| replication(&r, rep, false).map_err(|e| (rep, r.rep_seed(rep), e.to_string())))
                .collect()
        });
        let key = if beta == 0.0 || !r.loss.treg_enabled { "plugin" } else { "tr" };
        let recs = records(&outs)
            .into_iter()
            .map(|mut rec| {
                let v = rec.values.get(key).copied();
                rec.values = v.map(|v| BTreeMap::from([("value".to_string(), v)])).unwrap_or_default();
                rec
            })
            .collect();
        tables.push(ResultTable::from_records(&format!("{} beta={beta}", run.label), metric_name(run), r.hash(), recs, t0.elapsed().as_secs_f64()));
    }
    Ok(SweepTable {
        schema_version: TABLE_SCHEMA_VERSION,
        label: run.label.clone(),
        metric: metric_name(run).into(),
        config_hash: run.hash(),
        betas: betas.to_vec(),
        tables,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateEstimator {
    DrOracle,
    PluginOracle,
    PluginCorruptedMu,
    DrCorruptedPi,
    DrCorruptedMu,
}

impl RateEstimator {
    pub const ALL: [RateEstimator; 5] = [
        RateEstimator::DrOracle,
        RateEstimator::PluginOracle,
        RateEstimator::PluginCorruptedMu,
        RateEstimator::DrCorruptedPi,
        RateEstimator::DrCorruptedMu,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub dgp: DgpSpec,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_rate_reps")]
    pub replications: usize,
    #[serde(default = "default_arm")]
    pub arm: f64,
    /// Shift of the canonical parameter in the corrupted outcome model.
    #[serde(default = "default_shift")]
    pub theta_shift: f64,
    /// Constant `P(A = 1 | x)` of the corrupted propensity.
    #[serde(default = "default_pi_const")]
    pub pi_const: f64,
    #[serde(default = "default_boot")]
    pub bootstrap: usize,
    #[serde(default = "default_rate_oracle_rows")]
    pub oracle_rows: usize,
    #[serde(default = "default_rate_estimators")]
    pub estimators: Vec<RateEstimator>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_clamp")]
    pub overlap_clamp: f64,
}

fn default_rate_reps() -> usize {
    10
}
fn default_arm() -> f64 {
    1.0
}
fn default_shift() -> f64 {
    0.5
}
fn default_pi_const() -> f64 {
    0.5
}
fn default_boot() -> usize {
    1000
}
fn default_rate_oracle_rows() -> usize {
    1_000_000
}
fn default_rate_estimators() -> Vec<RateEstimator> {
    RateEstimator::ALL.to_vec()
}
fn default_clamp() -> f64 {
    crate::objective::OVERLAP_CLAMP
}

impl RateConfig {
    pub fn new(dgp: DgpSpec, n_grid: Vec<usize>) -> Self {
        RateConfig {
            dgp,
            n_grid,
            replications: default_rate_reps(),
            arm: default_arm(),
            theta_shift: default_shift(),
            pi_const: default_pi_const(),
            bootstrap: default_boot(),
            oracle_rows: default_rate_oracle_rows(),
            estimators: default_rate_estimators(),
            seed: 0,
            overlap_clamp: default_clamp(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.dgp.treatment != TreatmentKind::Binary || !matches!(self.dgp.scenario, Scenario::Synthetic { .. }) {
            return Err(Error::Config("rate studies use the synthetic binary scenario".into()));
        }
        if self.n_grid.len() < 4 {
            return Err(Error::Config("n_grid needs at least 4 sample sizes".into()));
        }
        let r0 = self.n_grid[1] as f64 / self.n_grid[0] as f64;
        let geometric = r0 > 1.0
            && self.n_grid.windows(2).all(|w| ((w[1] as f64 / w[0] as f64) - r0).abs() <= 1e-9 * r0);
        if !geometric {
            return Err(Error::Config("n_grid must be an increasing geometric sequence".into()));
        }
        if self.replications < 10 {
            return Err(Error::Config("rate studies need >= 10 replications per sample size".into()));
        }
        if self.arm != 0.0 && self.arm != 1.0 {
            return Err(Error::Config("arm must be 0 or 1".into()));
        }
        if !(self.pi_const > 0.0 && self.pi_const < 1.0) {
            return Err(Error::Config("pi_const must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub estimator: RateEstimator,
    pub n_grid: Vec<usize>,
    pub mean_abs_err: Vec<f64>,
    pub slope: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub oracle: OracleValue,
    pub rows: Vec<RateRow>,
}

impl RateReport {
    pub fn row(&self, e: RateEstimator) -> Option<&RateRow> {
        self.rows.iter().find(|r| r.estimator == e)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("estimator            ");
        if let Some(r) = self.rows.first() {
            for n in &r.n_grid {
                out.push_str(&format!(" {:>10}", format!("n={n}")));
            }
        }
        out.push_str(&format!(" {:>8} {:>18}\n", "slope", "95% CI"));
        for r in &self.rows {
            out.push_str(&format!("{:<21}", format!("{:?}", r.estimator)));
            for e in &r.mean_abs_err {
                out.push_str(&format!(" {e:>10.5}"));
            }
            match (r.slope, r.ci) {
                (Some(s), Some((lo, hi))) => out.push_str(&format!(" {s:>8.3} [{lo:>7.3}, {hi:>7.3}]\n")),
                _ => out.push_str(&format!("  skipped: {}\n", r.skipped.as_deref().unwrap_or(""))),
            }
        }
        out
    }
}

/// Least-squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Slope of `log(mean |error|)` against `log n` with a percentile bootstrap
/// over replications. `errors[j]` holds the replications at `ns[j]`. Returns
/// `Err(reason)` when every mean error sits at or below `floor`.
pub fn fit_rate(ns: &[usize], errors: &[Vec<f64>], floor: f64, bootstrap: usize, seed: u64) -> std::result::Result<(f64, (f64, f64)), String> {
    let means: Vec<f64> = errors.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect();
    if means.iter().all(|&m| m <= floor) {
        return Err(format!("errors at the Monte-Carlo oracle floor ({floor:.3e})"));
    }
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let slope = ols_slope(&lx, &means.iter().map(|m| m.max(f64::MIN_POSITIVE).ln()).collect::<Vec<_>>());
    let mut rng = substream(seed, "bootstrap");
    let mut boots: Vec<f64> = (0..bootstrap)
        .map(|_| {
            let ly: Vec<f64> = errors
                .iter()
                .map(|e| {
                    let m = (0..e.len()).map(|_| e[rng.random_range(0..e.len())]).sum::<f64>() / e.len() as f64;
                    m.max(f64::MIN_POSITIVE).ln()
                })
                .collect();
            ols_slope(&lx, &ly)
        })
        .collect();
    boots.sort_by(f64::total_cmp);
    let ci = if boots.is_empty() {
        (slope, slope)
    } else {
        let q = |p: f64| boots[((p * (boots.len() - 1) as f64).round()) as usize];
        (q(0.025), q(0.975))
    };
    Ok((slope, ci))
}

/// Error of each estimator on one dataset.
fn rate_errors(cfg: &RateConfig, dgp: &Dgp, data: &Dataset, truth: f64) -> Result<Vec<f64>> {
    let oracle = OracleNuisance { dgp };
    let bad_mu = CorruptedNuisance { inner: &oracle, theta_shift: cfg.theta_shift, pi_const: None };
    let bad_pi = CorruptedNuisance { inner: &oracle, theta_shift: 0.0, pi_const: Some(cfg.pi_const) };
    let c = cfg.overlap_clamp;
    cfg.estimators
        .iter()
        .map(|e| {
            let v = match e {
                RateEstimator::DrOracle => psi_dr(&oracle, data, cfg.arm, c)?.value,
                RateEstimator::PluginOracle => psi_plugin(&oracle, data.x.view(), cfg.arm)?,
                RateEstimator::PluginCorruptedMu => psi_plugin(&bad_mu as &dyn Nuisance, data.x.view(), cfg.arm)?,
                RateEstimator::DrCorruptedPi => psi_dr(&bad_pi, data, cfg.arm, c)?.value,
                RateEstimator::DrCorruptedMu => psi_dr(&bad_mu, data, cfg.arm, c)?.value,
            };
            Ok((v - truth).abs())
        })
        .collect()
}

/// Error-versus-sample-size study of estimators built on oracle and
/// corrupted nuisances.
pub fn rate_study(cfg: &RateConfig) -> Result<RateReport> {
    cfg.validate()?;
    let dgp = Dgp::from_spec(cfg.dgp.clone())?;
    let xo = synthetic_covariates(cfg.oracle_rows, &mut substream(cfg.seed, "mc"));
    let oracle = dgp.adcf(xo.view(), cfg.arm, cfg.seed);
    let pool = worker_pool()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.n_grid.len()).flat_map(|j| (0..cfg.replications).map(move |r| (j, r))).collect();
    let errs: Vec<Vec<f64>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(j, r)| {
                let n = cfg.n_grid[j];
                let seed = rep_stream(cfg.seed, &format!("rate/{n}"), r).next_u64();
                let data = dgp.generate_synthetic(n, seed)?;
                rate_errors(cfg, &dgp, &data, oracle.value)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let floor = 3.0 * oracle.mc_se;
    let rows = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(k, &e)| {
            let per_n: Vec<Vec<f64>> = (0..cfg.n_grid.len())
                .map(|j| (0..cfg.replications).map(|r| errs[j * cfg.replications + r][k]).collect())
                .collect();
            let means = per_n.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
            let boot_seed = rep_stream(cfg.seed, "rate-boot", k).next_u64();
            match fit_rate(&cfg.n_grid, &per_n, floor, cfg.bootstrap, boot_seed) {
                Ok((s, ci)) => RateRow { estimator: e, n_grid: cfg.n_grid.clone(), mean_abs_err: means, slope: Some(s), ci: Some(ci), skipped: None },
                Err(why) => RateRow { estimator: e, n_grid: cfg.n_grid.clone(), mean_abs_err: means, slope: None, ci: None, skipped: Some(why) },
            }
        })
        .collect();
    Ok(RateReport {
        schema_version: TABLE_SCHEMA_VERSION,
        config_hash: sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes()),
        oracle,
        rows,
    })
}
