use std::fs;
use std::path::{Path, PathBuf};

use msct_core::baselines::MsmConfig;
use msct_core::dgp::{DgpConfig, SplitSizes};
use msct_core::eval::{EvalOptions, ModelKind, PipelineConfig};
use msct_core::ingest::IngestConfig;
use msct_core::model::MsctConfig;
use msct_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Network fitted by `msct train`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrainModel {
    #[default]
    Msct,
    LstmBaseline,
    RnnBaseline,
}

impl TrainModel {
    /// Stem of the checkpoint and log files.
    pub fn label(self) -> &'static str {
        match self {
            TrainModel::Msct => "msct",
            TrainModel::LstmBaseline => "lstm",
            TrainModel::RnnBaseline => "rnn",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    #[default]
    Omega,
    CrashRatio,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Benchmark or ingested dataset directory.
    pub data: Option<PathBuf>,
    /// Real-world CSV for `ingest`.
    pub csv: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    /// Checkpoints scored by `evaluate`.
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub factual_only: bool,
    pub anchor_stride: usize,
    pub effect_strategy: String,
    /// Models trained and scored by sweeps; `evaluate` fits the non-neural ones
    /// next to its checkpoints.
    pub models: Vec<ModelKind>,
    /// Seed offsets averaged over by sweeps and ablations.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        let o = EvalOptions::default();
        EvalSection {
            factual_only: o.factual_only,
            anchor_stride: o.anchor_stride,
            effect_strategy: o.effect_strategy,
            models: vec![ModelKind::Msct, ModelKind::Lstm, ModelKind::Msm, ModelKind::Naive],
            seeds: vec![0, 1, 2],
        }
    }
}

impl EvalSection {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            factual_only: self.factual_only,
            anchor_stride: self.anchor_stride,
            effect_strategy: self.effect_strategy.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub kind: SweepKind,
    pub omegas: Vec<usize>,
    pub crash_ratios: Vec<f64>,
    /// Training units per crash ratio; unset uses the largest feasible count.
    pub units: Option<usize>,
    /// Horizon whose RMSE forms the sweep plot series.
    pub plot_horizon: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            kind: SweepKind::Omega,
            omegas: vec![1, 3, 5, 7, 10],
            crash_ratios: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            units: None,
            plot_horizon: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces both the dataset seed and the training seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub train_model: TrainModel,
    pub paths: Paths,
    pub dgp: DgpConfig,
    pub sizes: SplitSizes,
    pub model: MsctConfig,
    pub train: TrainConfig,
    pub msm: MsmConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub ingest: IngestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: None,
            jobs: 1,
            train_model: TrainModel::Msct,
            paths: Paths::default(),
            dgp: DgpConfig::default(),
            sizes: SplitSizes::default(),
            model: MsctConfig::default(),
            train: TrainConfig::default(),
            msm: MsmConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
            ingest: IngestConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Folds the top-level seed into the sections that consume it.
    pub fn resolve_seed(&mut self) {
        if let Some(s) = self.seed {
            self.dgp.seed = s;
            self.train.seed = s;
        }
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            dgp: self.dgp.clone(),
            sizes: self.sizes,
            model: self.model.clone(),
            train: self.train.clone(),
            msm: self.msm.clone(),
            eval: self.eval.options(),
            models: self.eval.models.clone(),
            seeds: self.eval.seeds.clone(),
            jobs: self.jobs,
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("config snapshot: {e}")))
    }
}
