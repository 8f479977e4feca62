use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use msct_core::baselines::{forecaster_config, forecaster_train_config, train_forecaster, RecurrentArch};
use msct_core::dgp::{build_benchmark, save_benchmark, SPLITS};
use msct_core::eval::{
    ablation_suite, crash_ratio_sweep, evaluate as score, omega_sweep, run_model, sha256_hex, ExperimentReport, ModelKind,
    ReportRow,
};
use msct_core::ingest::{ingest_file, save_ingested, INGEST_META};
use msct_core::model::{load_checkpoint, save_checkpoint, sequences, MsctModel, Sequence};
use msct_core::training::{train_decoder, train_encoder, train_msct, EpochLog, TrainReport};
use msct_core::{MsctError, Result};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SweepKind, TrainModel};
use crate::dataset;
use crate::CliError;

/// Creates the output directory and writes the resolved configuration
/// beside it. Re-running with `--config <dir>/<command>_config.toml`
/// repeats the run.
fn start(cfg: &RunConfig, command: &str) -> std::result::Result<Run, CliError> {
    let dir = cfg.out_dir()?.to_path_buf();
    let snapshot = cfg.to_toml()?;
    fs::create_dir_all(&dir).map_err(|e| MsctError::io(&dir, e))?;
    write(&dir.join(format!("{command}_config.toml")), snapshot.as_bytes())?;
    Ok(Run {
        command: command.to_string(),
        dir,
        started: now(),
    })
}

struct Run {
    command: String,
    dir: std::path::PathBuf,
    started: String,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    version: &'a str,
    started_at: &'a str,
    finished_at: &'a str,
}

impl Run {
    /// Timestamps go here and nowhere else, so every other output is
    /// byte-identical across reruns.
    fn finish(self) -> Result<()> {
        let meta = RunMeta {
            command: &self.command,
            version: env!("CARGO_PKG_VERSION"),
            started_at: &self.started,
            finished_at: &now(),
        };
        let path = self.dir.join(format!("{}_meta.json", self.command));
        let text = serde_json::to_string_pretty(&meta).map_err(|e| MsctError::json(&path, e))?;
        write(&path, (text + "\n").as_bytes())
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MsctError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| MsctError::json(path, e))?;
    write(path, (text + "\n").as_bytes())
}

#[derive(Serialize)]
struct Manifest {
    kind: &'static str,
    units: BTreeMap<String, usize>,
    sha256: BTreeMap<String, String>,
}

fn write_manifest(dir: &Path, kind: &'static str, meta_file: &str, units: [usize; 3]) -> Result<()> {
    let mut sha256 = BTreeMap::new();
    let files = std::iter::once(meta_file.to_string()).chain(SPLITS.iter().map(|s| format!("{s}.jsonl")));
    for f in files {
        let path = dir.join(&f);
        let bytes = fs::read(&path).map_err(|e| MsctError::io(&path, e))?;
        sha256.insert(f, sha256_hex(&bytes));
    }
    let units = SPLITS.iter().map(|s| s.to_string()).zip(units).collect();
    write_json(&dir.join("manifest.json"), &Manifest { kind, units, sha256 })
}

pub fn generate(cfg: RunConfig) -> std::result::Result<(), CliError> {
    cfg.dgp.validate()?;
    let run = start(&cfg, "generate")?;
    let bench = build_benchmark(&cfg.dgp, cfg.sizes)?;
    save_benchmark(&bench, &run.dir)?;
    write_manifest(&run.dir, "synthetic", "config.json", [bench.train.len(), bench.val.len(), bench.test.len()])?;
    log::info!("wrote {} units to {}", cfg.sizes.total(), run.dir.display());
    Ok(run.finish()?)
}

pub fn ingest(cfg: RunConfig) -> std::result::Result<(), CliError> {
    cfg.ingest.validate()?;
    let csv = cfg
        .paths
        .csv
        .clone()
        .ok_or_else(|| CliError::Config("no CSV given: pass --csv or set paths.csv".into()))?;
    let run = start(&cfg, "ingest")?;
    let ds = ingest_file(&csv, &cfg.ingest)?;
    save_ingested(&ds, &run.dir)?;
    write_manifest(&run.dir, "real", INGEST_META, [ds.train.len(), ds.val.len(), ds.test.len()])?;
    if ds.meta.skipped_windows > 0 {
        log::warn!("{} windows skipped over missing bins", ds.meta.skipped_windows);
    }
    Ok(run.finish()?)
}

fn data_dir(cfg: &RunConfig) -> std::result::Result<&Path, CliError> {
    cfg.paths
        .data
        .as_deref()
        .ok_or_else(|| CliError::Config("no dataset: pass --data or set paths.data".into()))
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    stage: String,
    #[serde(flatten)]
    log: EpochLog,
}

fn log_lines(stage: &str, logs: &[EpochLog], offset: usize) -> Vec<LogLine> {
    logs.iter()
        .map(|l| LogLine {
            stage: stage.into(),
            log: EpochLog {
                epoch: l.epoch + offset,
                ..*l
            },
        })
        .collect()
}

/// Continues a checkpoint: normalizer and weights are kept, both stages run
/// their configured epochs again, and epoch numbers carry on from the
/// checkpoint's counters.
fn resume(model: &mut MsctModel, prior: &[usize], tr: &[Sequence], va: &[Sequence], tc: &msct_core::training::TrainConfig) -> Result<Vec<LogLine>> {
    let (enc0, dec0) = (prior.first().copied().unwrap_or(0), prior.get(1).copied().unwrap_or(0));
    // a fresh stream, so resumed epochs do not replay the first run's batches
    let tc = msct_core::training::TrainConfig {
        seed: tc.seed.wrapping_add((enc0 + dec0) as u64),
        ..tc.clone()
    };
    let enc = train_encoder(model, tr, va, &tc)?;
    let tr_refs: Vec<&Sequence> = tr.iter().collect();
    let va_refs: Vec<&Sequence> = va.iter().collect();
    let tr_caches = model.encode_all(&tr_refs)?;
    let va_caches = model.encode_all(&va_refs)?;
    let dec = train_decoder(model, tr, &tr_caches, va, &va_caches, &tc)?;
    let mut lines = log_lines("encoder", &enc, enc0);
    lines.extend(log_lines("decoder", &dec, dec0));
    Ok(lines)
}

fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    if !path.is_file() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| MsctError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| MsctError::json(path, e)))
        .collect()
}

pub fn train(mut cfg: RunConfig) -> std::result::Result<(), CliError> {
    let ds = dataset::load(data_dir(&cfg)?)?;
    dataset::adapt(&mut cfg, &ds);
    cfg.model.validate()?;
    cfg.train.validate()?;
    let kind = cfg.train_model;
    let (mc, tc) = match kind {
        TrainModel::Msct => (cfg.model.clone(), cfg.train.clone()),
        TrainModel::LstmBaseline => (forecaster_config(RecurrentArch::Lstm, &cfg.model), forecaster_train_config(&cfg.train)),
        TrainModel::RnnBaseline => (forecaster_config(RecurrentArch::Rnn, &cfg.model), forecaster_train_config(&cfg.train)),
    };
    let run = start(&cfg, "train")?;
    let tr = sequences(&ds.train, mc.treatment_field, mc.k)?;
    let va = sequences(&ds.val, mc.treatment_field, mc.k)?;
    let label = kind.label();
    let (model, lines, epochs) = match &cfg.paths.resume {
        Some(path) => {
            let (mut model, header) = load_checkpoint(path)?;
            if header.config != mc {
                return Err(CliError::Config(format!(
                    "{} was trained with a different architecture than the [model] section describes",
                    path.display()
                )));
            }
            let mut lines = read_log(&path.with_file_name(format!("{label}_train_log.jsonl")))?;
            let new = resume(&mut model, &header.epochs, &tr, &va, &tc)?;
            let ran = |stage: &str| new.iter().filter(|l| l.stage == stage).count();
            let epochs = vec![
                header.epochs.first().copied().unwrap_or(0) + ran("encoder"),
                header.epochs.get(1).copied().unwrap_or(0) + ran("decoder"),
            ];
            lines.extend(new);
            (model, lines, epochs)
        }
        None => {
            let (model, report): (MsctModel, TrainReport) = match kind {
                TrainModel::Msct => {
                    let mut model = MsctModel::new(mc, tc.seed)?;
                    let report = train_msct(&mut model, &tr, &va, &tc)?;
                    (model, report)
                }
                TrainModel::LstmBaseline => train_forecaster(RecurrentArch::Lstm, &cfg.model, &tr, &va, &cfg.train)?,
                TrainModel::RnnBaseline => train_forecaster(RecurrentArch::Rnn, &cfg.model, &tr, &va, &cfg.train)?,
            };
            let epochs = vec![report.encoder.len(), report.decoder.len()];
            let mut lines = log_lines("encoder", &report.encoder, 0);
            lines.extend(log_lines("decoder", &report.decoder, 0));
            (model, lines, epochs)
        }
    };
    save_checkpoint(&run.dir.join(format!("{label}.ckpt")), &model, &tc.hash(), &epochs)?;
    let log_path = run.dir.join(format!("{label}_train_log.jsonl"));
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l).map_err(|e| MsctError::json(&log_path, e))?);
        text.push('\n');
    }
    write(&log_path, text.as_bytes())?;
    log::info!("{label}: encoder {} epochs, decoder {} epochs", epochs[0], epochs[1]);
    Ok(run.finish()?)
}

fn check_plot_horizon(cfg: &RunConfig) -> std::result::Result<(), CliError> {
    let h = cfg.sweep.plot_horizon;
    if h == 0 || h > cfg.model.tau_max + 1 {
        return Err(CliError::Config(format!(
            "sweep.plot_horizon {h} outside 1..={}",
            cfg.model.tau_max + 1
        )));
    }
    Ok(())
}

pub fn evaluate(mut cfg: RunConfig) -> std::result::Result<(), CliError> {
    let ds = dataset::load(data_dir(&cfg)?)?;
    dataset::adapt(&mut cfg, &ds);
    let pipeline = cfg.pipeline();
    pipeline.validate()?;
    check_plot_horizon(&cfg)?;
    let baselines: Vec<ModelKind> = cfg
        .eval
        .models
        .iter()
        .copied()
        .filter(|m| matches!(m, ModelKind::Msm | ModelKind::Naive))
        .collect();
    if cfg.paths.checkpoints.is_empty() && baselines.is_empty() {
        return Err(CliError::Config("nothing to evaluate: pass --checkpoint or list msm/naive in eval.models".into()));
    }
    let run = start(&cfg, "evaluate")?;
    let opts = cfg.eval.options();
    let mut rows = Vec::new();
    let mut push = |name: &str, e| -> Result<()> {
        rows.push(ReportRow::aggregate(name, None, vec![cfg.train.seed], vec![ds.hash.clone()], vec![e])?);
        Ok(())
    };
    for path in &cfg.paths.checkpoints {
        let (model, _) = load_checkpoint(path)?;
        if model.cfg.tau_max != cfg.model.tau_max {
            return Err(CliError::Config(format!(
                "{} predicts {} steps ahead but the config asks for {}",
                path.display(),
                model.cfg.tau_max,
                cfg.model.tau_max
            )));
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
        push(&name, score(&name, &model, &ds.test, &model.cfg, &opts)?)?;
    }
    for kind in baselines {
        push(kind.label(), run_model(kind, &pipeline, &ds.train, &ds.val, &ds.test, 0)?)?;
    }
    let report = ExperimentReport {
        experiment: "evaluate".into(),
        axis: None,
        config_hash: pipeline.hash(),
        strategy_weighting: "equal".into(),
        factual_only: opts.factual_only,
        rows,
    };
    report.write(&run.dir, "evaluate", cfg.sweep.plot_horizon)?;
    Ok(run.finish()?)
}

pub fn sweep(mut cfg: RunConfig) -> std::result::Result<(), CliError> {
    let (report, stem) = match cfg.sweep.kind {
        SweepKind::Omega => {
            let pipeline = cfg.pipeline();
            pipeline.validate()?;
            check_plot_horizon(&cfg)?;
            let run = start(&cfg, "sweep")?;
            (omega_sweep(&cfg.sweep.omegas, &pipeline)?, run)
        }
        SweepKind::CrashRatio => {
            let (train, val, test) = match cfg.paths.data.clone() {
                Some(dir) => {
                    let ds = dataset::load(&dir)?;
                    dataset::adapt(&mut cfg, &ds);
                    (ds.train, ds.val, ds.test)
                }
                None => {
                    cfg.dgp.validate()?;
                    let b = build_benchmark(&cfg.dgp, cfg.sizes)?;
                    (b.train, b.val, b.test)
                }
            };
            let pipeline = cfg.pipeline();
            pipeline.validate()?;
            check_plot_horizon(&cfg)?;
            let run = start(&cfg, "sweep")?;
            (crash_ratio_sweep(&cfg.sweep.crash_ratios, &train, &val, &test, cfg.sweep.units, &pipeline)?, run)
        }
    };
    let name = report.experiment.clone();
    report.write(&stem.dir, &name, cfg.sweep.plot_horizon)?;
    Ok(stem.finish()?)
}

pub fn ablate(cfg: RunConfig) -> std::result::Result<(), CliError> {
    let pipeline = cfg.pipeline();
    pipeline.validate()?;
    check_plot_horizon(&cfg)?;
    let run = start(&cfg, "ablate")?;
    let report = ablation_suite(&pipeline)?;
    report.write(&run.dir, "ablation", cfg.sweep.plot_horizon)?;
    Ok(run.finish()?)
}
