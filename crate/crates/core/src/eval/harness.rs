use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::evaluate::{evaluate, EvalOptions, Evaluation, Persistence};
use super::report::{ExperimentReport, ReportRow};
use crate::baselines::{fit_iptw_msm, forecaster_config, forecaster_train_config, MsmConfig, RecurrentArch};
use crate::dgp::{build_benchmark, Benchmark, DgpConfig, SplitSizes, UnitRecord};
use crate::error::{MsctError, Result};
use crate::model::{sequences, Backbone, MsctConfig, MsctModel};
use crate::training::{train_msct, Balancing, TrainConfig};

/// Every model the harnesses know how to train and score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "msct")]
    Msct,
    #[serde(rename = "lstm")]
    Lstm,
    #[serde(rename = "rnn")]
    Rnn,
    #[serde(rename = "msm")]
    Msm,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "w/o transf")]
    WithoutTransformer,
    #[serde(rename = "w/o ps")]
    WithoutPs,
    #[serde(rename = "w/o bl")]
    WithoutBalancing,
    #[serde(rename = "w/ gr")]
    GradientReversal,
}

pub const ABLATION_ROWS: [ModelKind; 5] = [
    ModelKind::Msct,
    ModelKind::WithoutTransformer,
    ModelKind::WithoutPs,
    ModelKind::WithoutBalancing,
    ModelKind::GradientReversal,
];

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Msct => "msct",
            ModelKind::Lstm => "lstm",
            ModelKind::Rnn => "rnn",
            ModelKind::Msm => "msm",
            ModelKind::Naive => "naive",
            ModelKind::WithoutTransformer => "w/o transf",
            ModelKind::WithoutPs => "w/o ps",
            ModelKind::WithoutBalancing => "w/o bl",
            ModelKind::GradientReversal => "w/ gr",
        }
    }

    /// Architecture and training settings for the neural kinds.
    pub fn neural_configs(self, model: &MsctConfig, train: &TrainConfig) -> Option<(MsctConfig, TrainConfig)> {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            ModelKind::Msct => {}
            ModelKind::Lstm => return Some((forecaster_config(RecurrentArch::Lstm, model), forecaster_train_config(train))),
            ModelKind::Rnn => return Some((forecaster_config(RecurrentArch::Rnn, model), forecaster_train_config(train))),
            ModelKind::WithoutTransformer => m.backbone = Backbone::Lstm,
            ModelKind::WithoutPs => {
                m.ps_pathway = false;
                t.ps_loss = false;
            }
            ModelKind::WithoutBalancing => {
                m.ps_pathway = false;
                m.hps_head = false;
                t.ps_loss = false;
                t.balancing = Balancing::Off;
            }
            ModelKind::GradientReversal => t.balancing = Balancing::GradientReversal,
            ModelKind::Msm | ModelKind::Naive => return None,
        }
        Some((m, t))
    }
}

/// Everything needed to generate data, train every listed model and score it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dgp: DgpConfig,
    pub sizes: SplitSizes,
    pub model: MsctConfig,
    pub train: TrainConfig,
    pub msm: MsmConfig,
    pub eval: EvalOptions,
    pub models: Vec<ModelKind>,
    /// Seed `s` shifts both the dataset master seed and the training seed by `s`.
    pub seeds: Vec<u64>,
    /// Worker threads for independent (point, seed) jobs.
    pub jobs: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dgp: DgpConfig::default(),
            sizes: SplitSizes::default(),
            model: MsctConfig::default(),
            train: TrainConfig::default(),
            msm: MsmConfig::default(),
            eval: EvalOptions::default(),
            models: vec![ModelKind::Msct, ModelKind::Lstm],
            seeds: vec![0, 1, 2],
            jobs: 1,
        }
    }
}

pub fn sha256_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(MsctError::Config("at least one seed is required".into()));
        }
        if self.models.is_empty() {
            return Err(MsctError::Config("at least one model is required".into()));
        }
        if self.model.tau_max != self.dgp.tau_max {
            return Err(MsctError::Config(format!(
                "model tau_max {} differs from dgp tau_max {}",
                self.model.tau_max, self.dgp.tau_max
            )));
        }
        Ok(())
    }

    /// Hash of everything that affects results; the worker count does not.
    pub fn hash(&self) -> String {
        sha256_json(&PipelineConfig { jobs: 1, ..self.clone() })
    }

    fn dgp_for(&self, seed: u64) -> DgpConfig {
        DgpConfig {
            seed: self.dgp.seed.wrapping_add(seed),
            ..self.dgp.clone()
        }
    }

    fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(seed),
            ..self.train.clone()
        }
    }
}

/// A trained neural model or its evaluation, for callers that need the model itself.
pub fn train_neural(kind: ModelKind, cfg: &PipelineConfig, train: &[UnitRecord], val: &[UnitRecord], seed: u64) -> Result<MsctModel> {
    let (mc, tc) = kind
        .neural_configs(&cfg.model, &cfg.train_for(seed))
        .ok_or_else(|| MsctError::Usage(format!("{} is not a neural model", kind.label())))?;
    let tr = sequences(train, mc.treatment_field, mc.k)?;
    let va = sequences(val, mc.treatment_field, mc.k)?;
    let mut model = MsctModel::new(mc, tc.seed)?;
    train_msct(&mut model, &tr, &va, &tc)?;
    Ok(model)
}

/// Trains (where needed) and scores one model on one dataset.
pub fn run_model(kind: ModelKind, cfg: &PipelineConfig, train: &[UnitRecord], val: &[UnitRecord], test: &[UnitRecord], seed: u64) -> Result<Evaluation> {
    let (k, tau_max) = (cfg.model.k, cfg.model.tau_max);
    let name = kind.label();
    match kind {
        ModelKind::Naive => evaluate(name, &Persistence, test, &cfg.model, &cfg.eval),
        ModelKind::Msm => {
            let seqs = sequences(train, cfg.model.treatment_field, k)?;
            let msm_cfg = MsmConfig {
                horizons: tau_max + 1,
                ..cfg.msm.clone()
            };
            let fit = fit_iptw_msm(&seqs, &msm_cfg)?;
            evaluate(name, &fit.msm, test, &cfg.model, &cfg.eval)
        }
        _ => {
            let model = train_neural(kind, cfg, train, val, seed)?;
            evaluate(name, &model, test, &model.cfg, &cfg.eval)
        }
    }
}

/// Runs `jobs` in a pool of `threads` workers, keeping input order.
fn run_jobs<T: Send, R: Send>(threads: usize, jobs: Vec<T>, f: impl Fn(T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| MsctError::Config(format!("thread pool: {e}")))?;
    pool.install(|| jobs.into_par_iter().map(f).collect())
}

struct PointResult {
    dataset_hash: String,
    evals: Vec<Evaluation>,
}

fn assemble(
    experiment: &str,
    axis: Option<&str>,
    cfg: &PipelineConfig,
    points: &[Option<f64>],
    models: &[ModelKind],
    results: Vec<PointResult>,
) -> Result<ExperimentReport> {
    let ns = cfg.seeds.len();
    let mut rows = Vec::new();
    for (pi, point) in points.iter().enumerate() {
        let chunk = &results[pi * ns..(pi + 1) * ns];
        for (mi, kind) in models.iter().enumerate() {
            rows.push(ReportRow::aggregate(
                kind.label(),
                *point,
                cfg.seeds.clone(),
                chunk.iter().map(|r| r.dataset_hash.clone()).collect(),
                chunk.iter().map(|r| r.evals[mi].clone()).collect(),
            )?);
        }
    }
    Ok(ExperimentReport {
        experiment: experiment.to_string(),
        axis: axis.map(str::to_string),
        config_hash: cfg.hash(),
        strategy_weighting: "equal".into(),
        factual_only: cfg.eval.factual_only,
        rows,
    })
}

/// Generates one benchmark per (point, seed) from `dgp_at(point)` and scores every model on it.
fn synthetic_experiment(
    experiment: &str,
    axis: Option<&str>,
    cfg: &PipelineConfig,
    points: &[Option<f64>],
    models: &[ModelKind],
    dgp_at: impl Fn(&DgpConfig, Option<f64>) -> DgpConfig + Sync + Send,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(Option<f64>, u64)> = points.iter().flat_map(|&p| cfg.seeds.iter().map(move |&s| (p, s))).collect();
    let results = run_jobs(cfg.jobs, jobs, |(point, seed)| {
        let dgp = dgp_at(&cfg.dgp_for(seed), point);
        let bench = build_benchmark(&dgp, cfg.sizes)?;
        let evals = models
            .iter()
            .map(|&m| run_model(m, cfg, &bench.train, &bench.val, &bench.test, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(PointResult {
            dataset_hash: sha256_json(&bench.meta),
            evals,
        })
    })?;
    assemble(experiment, axis, cfg, points, models, results)
}

/// Every configured model on the default benchmark, per seed.
pub fn benchmark_run(cfg: &PipelineConfig) -> Result<ExperimentReport> {
    synthetic_experiment("benchmark", None, cfg, &[None], &cfg.models, |d, _| d.clone())
}

/// One benchmark per confounding window, shared master seed across windows.
pub fn omega_sweep(omegas: &[usize], cfg: &PipelineConfig) -> Result<ExperimentReport> {
    if omegas.is_empty() || omegas.contains(&0) {
        return Err(MsctError::Config("omega values must be >= 1".into()));
    }
    let points: Vec<Option<f64>> = omegas.iter().map(|&w| Some(w as f64)).collect();
    synthetic_experiment("omega_sweep", Some("omega"), cfg, &points, &cfg.models, |d, p| DgpConfig {
        omega: p.expect("sweep point") as usize,
        ..d.clone()
    })
}

/// MSCT and its four variants on one benchmark per seed.
pub fn ablation_suite(cfg: &PipelineConfig) -> Result<ExperimentReport> {
    synthetic_experiment("ablation", None, cfg, &[None], &ABLATION_ROWS, |d, _| d.clone())
}

fn has_crash(r: &UnitRecord) -> bool {
    r.t.iter().any(|&t| t != 0)
}

/// Largest training set that can be drawn at every ratio.
pub fn feasible_units(records: &[UnitRecord], ratios: &[f64]) -> usize {
    let crash = records.iter().filter(|r| has_crash(r)).count();
    let clean = records.len() - crash;
    ratios
        .iter()
        .map(|&r| {
            if r <= 0.0 {
                clean
            } else if r >= 1.0 {
                crash
            } else {
                ((crash as f64 / r).floor() as usize).min((clean as f64 / (1.0 - r)).floor() as usize)
            }
        })
        .min()
        .unwrap_or(0)
}

/// Draws `units` records of which `round(ratio * units)` contain a crash.
/// The selection is seeded and keeps the original record order.
pub fn subsample_crash_ratio(records: &[UnitRecord], ratio: f64, units: usize, seed: u64) -> Result<Vec<UnitRecord>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MsctError::Config(format!("crash ratio {ratio} outside [0, 1]")));
    }
    let mut crash: Vec<usize> = (0..records.len()).filter(|&i| has_crash(&records[i])).collect();
    let mut clean: Vec<usize> = (0..records.len()).filter(|&i| !has_crash(&records[i])).collect();
    let want_crash = (ratio * units as f64).round() as usize;
    let want_clean = units - want_crash;
    if units == 0 || want_crash > crash.len() || want_clean > clean.len() {
        return Err(MsctError::Range(format!(
            "crash ratio {ratio} with {units} units needs {want_crash} crash and {want_clean} crash-free units; {} and {} available",
            crash.len(),
            clean.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crash.shuffle(&mut rng);
    clean.shuffle(&mut rng);
    let mut pick: Vec<usize> = crash[..want_crash].iter().chain(&clean[..want_clean]).copied().collect();
    pick.sort_unstable();
    Ok(pick.into_iter().map(|i| records[i].clone()).collect())
}

/// Trains on crash-ratio-controlled subsamples of `train` and scores on `test`.
/// Every ratio uses the same training-set size, the largest feasible for all
/// of them unless `units` is given.
pub fn crash_ratio_sweep(
    ratios: &[f64],
    train: &[UnitRecord],
    val: &[UnitRecord],
    test: &[UnitRecord],
    units: Option<usize>,
    cfg: &PipelineConfig,
) -> Result<ExperimentReport> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    if ratios.is_empty() || cfg.seeds.is_empty() {
        return Err(MsctError::Config("crash ratio sweep needs ratios and seeds".into()));
    }
    let units = units.unwrap_or_else(|| feasible_units(train, ratios));
    let data_hash = sha256_json(&(train, val, test));
    let jobs: Vec<(f64, u64)> = ratios.iter().flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s))).collect();
    let results = run_jobs(cfg.jobs, jobs, |(ratio, seed)| {
        let sub = subsample_crash_ratio(train, ratio, units, cfg.train.seed.wrapping_add(seed))?;
        let evals = cfg
            .models
            .iter()
            .map(|&m| run_model(m, cfg, &sub, val, test, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(PointResult {
            dataset_hash: data_hash.clone(),
            evals,
        })
    })?;
    let points: Vec<Option<f64>> = ratios.iter().map(|&r| Some(r)).collect();
    assemble("crash_ratio_sweep", Some("crash_ratio"), cfg, &points, &cfg.models, results)
}

/// Checks that consecutive sweep points never rise by more than the pooled
/// standard deviation of the two points.
pub fn non_increasing_within_noise(means: &[f64], stds: &[f64]) -> bool {
    means.windows(2).zip(stds.windows(2)).all(|(m, s)| {
        let pooled = ((s[0] * s[0] + s[1] * s[1]) / 2.0).sqrt();
        m[1] <= m[0] + pooled
    })
}

/// Convenience for callers holding a whole benchmark.
pub fn crash_ratio_sweep_benchmark(ratios: &[f64], bench: &Benchmark, units: Option<usize>, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    crash_ratio_sweep(ratios, &bench.train, &bench.val, &bench.test, units, cfg)
}
