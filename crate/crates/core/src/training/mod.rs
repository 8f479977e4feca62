//! Losses and the staged encoder/decoder training procedure.

mod losses;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use losses::{confusion, cross_entropy, mse, total_loss, LossBreakdown, PROB_FLOOR};

use crate::error::{MsctError, Result};
use crate::layers::ForwardCtx;
use crate::model::{
    DecoderBatch, EncoderBatch, EncoderCache, Group, HpsInput, MsctModel, Normalizer, Sequence, Stage, GROUPS,
};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

/// How the HPS adversary is fitted when balancing by domain confusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HpsMode {
    /// The head is only pushed toward the uniform distribution.
    #[default]
    AsWritten,
    /// After the two updates, the head alone is also fitted to the true labels.
    AlternatingTrueLabel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balancing {
    #[default]
    DomainConfusion,
    GradientReversal,
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder_epochs: usize,
    pub decoder_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub seed: u64,
    pub hps_mode: HpsMode,
    pub balancing: Balancing,
    pub ps_loss: bool,
    /// Keep the outcome loss in the update that steps the treatment pathway.
    pub outcome_in_ps_update: bool,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub decoder_anchors_per_unit: usize,
    /// Every `val_anchor_stride`-th anchor is scored for decoder validation.
    pub val_anchor_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder_epochs: 100,
            decoder_epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            lambda: 1.0,
            dropout: 0.1,
            seed: 0,
            hps_mode: HpsMode::AsWritten,
            balancing: Balancing::DomainConfusion,
            ps_loss: true,
            outcome_in_ps_update: true,
            patience: 10,
            decoder_anchors_per_unit: 4,
            val_anchor_stride: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MsctError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if self.decoder_anchors_per_unit == 0 || self.val_anchor_stride == 0 {
            return bad("decoder_anchors_per_unit and val_anchor_stride must be >= 1");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_y: f64,
    pub l_ps: f64,
    pub l_hps: f64,
    pub total: f64,
    pub val_rmse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub encoder: Vec<EpochLog>,
    pub decoder: Vec<EpochLog>,
}

pub fn write_jsonl(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let file = File::create(path).map_err(|e| MsctError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for log in logs {
        serde_json::to_writer(&mut w, log).map_err(|e| MsctError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| MsctError::io(path, e))?;
    }
    w.flush().map_err(|e| MsctError::io(path, e))
}

/// Head outputs of one forward pass, as seen by the losses.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    pub y_hat: Var,
    pub ps: Option<Var>,
    pub hps: Option<Var>,
}

/// One Adam state per parameter group of a stage.
pub fn group_optimizers(model: &MsctModel, stage: Stage, lr: f64) -> BTreeMap<Group, Adam> {
    let cfg = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    GROUPS
        .iter()
        .filter_map(|&grp| {
            let ids = model.params_in(stage, &[grp]);
            (!ids.is_empty()).then(|| (grp, Adam::new(cfg, &model.store, &ids)))
        })
        .collect()
}

fn weighted_sum(g: &mut Graph, terms: &[(Option<Var>, f64)]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &(term, w) in terms {
        let Some(t) = term else { continue };
        let t = if w == 1.0 { t } else { g.scale(t, w)? };
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc)
}

fn step_groups(store: &mut ParamStore, opts: &mut BTreeMap<Group, Adam>, g: &Graph, loss: Option<Var>, groups: &[Group]) -> Result<()> {
    let Some(loss) = loss else { return Ok(()) };
    let grads = g.backward(loss)?;
    for grp in groups {
        if let Some(adam) = opts.get_mut(grp) {
            adam.step(store, &grads)?;
        }
    }
    Ok(())
}

/// The per-batch update sequence. With domain confusion (or no balancing) it
/// runs update (a) on `(R, T, Ps)` then update (b) on `(R, Y, Hps)`, each from
/// a fresh forward pass; gradient reversal runs a single update on all groups.
/// The returned breakdown is measured on the first forward pass.
pub fn train_step<F>(
    store: &mut ParamStore,
    opts: &mut BTreeMap<Group, Adam>,
    cfg: &TrainConfig,
    targets: &Tensor,
    classes: &[usize],
    seed: u64,
    forward: F,
) -> Result<LossBreakdown>
where
    F: Fn(&mut Graph, &ParamStore, HpsInput, &mut ForwardCtx) -> Result<Heads>,
{
    let lambda = cfg.lambda;
    let value = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    if cfg.balancing == Balancing::GradientReversal {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::train(cfg.dropout, seed)?;
        let h = forward(&mut g, store, HpsInput::Reversed(lambda), &mut ctx)?;
        let t = g.constant(targets.clone());
        let l_y = mse(&mut g, h.y_hat, t)?;
        let l_ps = match h.ps.filter(|_| cfg.ps_loss) {
            Some(p) => Some(cross_entropy(&mut g, p, classes)?),
            None => None,
        };
        let l_hps = match h.hps {
            Some(p) => Some(cross_entropy(&mut g, p, classes)?),
            None => None,
        };
        let loss = weighted_sum(&mut g, &[(Some(l_y), 1.0), (l_ps, lambda), (l_hps, 1.0)])?;
        let bd = LossBreakdown::new(g.value(l_y).item(), value(&g, l_ps), value(&g, l_hps), lambda);
        step_groups(store, opts, &g, loss, &GROUPS)?;
        return Ok(bd);
    }

    let confuse = cfg.balancing == Balancing::DomainConfusion;
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::train(cfg.dropout, seed)?;
    let h = forward(&mut g, store, HpsInput::Plain, &mut ctx)?;
    let t = g.constant(targets.clone());
    let l_y = mse(&mut g, h.y_hat, t)?;
    let l_ps = match h.ps.filter(|_| cfg.ps_loss) {
        Some(p) => Some(cross_entropy(&mut g, p, classes)?),
        None => None,
    };
    let l_hps = match h.hps.filter(|_| confuse) {
        Some(p) => Some(confusion(&mut g, p)?),
        None => None,
    };
    let bd = LossBreakdown::new(g.value(l_y).item(), value(&g, l_ps), value(&g, l_hps), lambda);
    let y_term = cfg.outcome_in_ps_update.then_some(l_y);
    let loss_a = weighted_sum(&mut g, &[(y_term, 1.0), (l_ps, lambda)])?;
    step_groups(store, opts, &g, loss_a, &[Group::R, Group::T, Group::Ps])?;

    let mut g = Graph::new();
    let mut ctx = ForwardCtx::train(cfg.dropout, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let h = forward(&mut g, store, HpsInput::Plain, &mut ctx)?;
    let t = g.constant(targets.clone());
    let l_y = mse(&mut g, h.y_hat, t)?;
    let l_hps = match h.hps.filter(|_| confuse) {
        Some(p) => Some(confusion(&mut g, p)?),
        None => None,
    };
    let loss_b = weighted_sum(&mut g, &[(Some(l_y), 1.0), (l_hps, lambda)])?;
    step_groups(store, opts, &g, loss_b, &[Group::R, Group::Y, Group::Hps])?;

    if confuse && cfg.hps_mode == HpsMode::AlternatingTrueLabel {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::train(cfg.dropout, seed ^ 0xbf58_476d_1ce4_e5b9)?;
        let h = forward(&mut g, store, HpsInput::Plain, &mut ctx)?;
        if let Some(p) = h.hps {
            let l = cross_entropy(&mut g, p, classes)?;
            step_groups(store, opts, &g, Some(l), &[Group::Hps])?;
        }
    }
    Ok(bd)
}

#[derive(Default)]
struct EpochAcc {
    n: usize,
    sum: LossBreakdown,
}

impl EpochAcc {
    fn add(&mut self, b: LossBreakdown) {
        self.n += 1;
        self.sum.l_y += b.l_y;
        self.sum.l_ps += b.l_ps;
        self.sum.l_hps += b.l_hps;
        self.sum.total += b.total;
    }

    fn finish(&self, epoch: usize, val_rmse: Option<f64>) -> EpochLog {
        let n = self.n.max(1) as f64;
        EpochLog {
            epoch,
            l_y: self.sum.l_y / n,
            l_ps: self.sum.l_ps / n,
            l_hps: self.sum.l_hps / n,
            total: self.sum.total / n,
            val_rmse,
        }
    }
}

/// Tracks the best validation score and the parameters that produced it.
struct EarlyStop {
    patience: usize,
    best: f64,
    since: usize,
    snapshot: Option<ParamStore>,
}

impl EarlyStop {
    fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            since: 0,
            snapshot: None,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, score: Option<f64>, store: &ParamStore) -> bool {
        let Some(s) = score else { return false };
        if s < self.best {
            self.best = s;
            self.since = 0;
            self.snapshot = Some(store.clone());
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }

    fn restore(self, store: &mut ParamStore) {
        if let Some(s) = self.snapshot {
            *store = s;
        }
    }
}

const ENCODER_SALT: u64 = 0x656e_636f_6465_7200;
const DECODER_SALT: u64 = 0x6465_636f_6465_7200;
const EVAL_CHUNK: usize = 64;

/// Fits the encoder groups on factual one-step targets.
pub fn train_encoder(model: &mut MsctModel, train: &[Sequence], val: &[Sequence], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MsctError::Usage("training split is empty".into()));
    }
    let mut opts = group_optimizers(model, Stage::Encoder, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ENCODER_SALT);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut logs = Vec::new();
    let k = model.cfg.k;
    for epoch in 0..cfg.encoder_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut acc = EpochAcc::default();
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<&Sequence> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = EncoderBatch::build(&seqs, &model.norm, k)?;
            let seed = rng.random::<u64>();
            let MsctModel { store, encoder, .. } = &mut *model;
            let bd = train_step(store, &mut opts, cfg, &batch.y_next, &batch.next_class, seed, |g, s, hps, ctx| {
                let o = encoder.forward(g, s, &batch, hps, ctx)?;
                Ok(Heads {
                    y_hat: o.y_hat,
                    ps: o.ps_probs,
                    hps: o.hps_probs,
                })
            })?;
            acc.add(bd);
        }
        let val_rmse = if val.is_empty() { None } else { Some(encoder_rmse(model, val)?) };
        let log = acc.finish(epoch, val_rmse);
        log::debug!("encoder epoch {epoch}: {log:?}");
        logs.push(log);
        if stop.observe(val_rmse, &model.store) {
            break;
        }
    }
    stop.restore(&mut model.store);
    Ok(logs)
}

/// Factual one-step RMSE in original units.
pub fn encoder_rmse(model: &MsctModel, seqs: &[Sequence]) -> Result<f64> {
    let mut sq = 0.0;
    let mut n = 0usize;
    let refs: Vec<&Sequence> = seqs.iter().collect();
    for chunk in refs.chunks(EVAL_CHUNK) {
        let batch = EncoderBatch::build(chunk, &model.norm, model.cfg.k)?;
        let mut g = Graph::new();
        let out = model
            .encoder
            .forward(&mut g, &model.store, &batch, HpsInput::Plain, &mut ForwardCtx::eval())?;
        for (p, t) in g.value(out.y_hat).data().iter().zip(batch.y_next.data()) {
            sq += (p - t).powi(2);
            n += 1;
        }
    }
    Ok(model.norm.std * (sq / n.max(1) as f64).sqrt())
}

fn anchor_count(seq: &Sequence, tau_max: usize) -> Result<usize> {
    (seq.len() >= tau_max + 2).then(|| seq.len() - tau_max - 1).ok_or_else(|| {
        MsctError::Range(format!("sequence length {} too short for tau_max {tau_max}", seq.len()))
    })
}

/// Fits the decoder groups on teacher-forced multi-step targets from cached
/// encoder outputs, sampling a few anchors per unit each epoch.
pub fn train_decoder(
    model: &mut MsctModel,
    train: &[Sequence],
    train_caches: &[EncoderCache],
    val: &[Sequence],
    val_caches: &[EncoderCache],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(MsctError::Usage("training split is empty".into()));
    }
    if train.len() != train_caches.len() || val.len() != val_caches.len() {
        return Err(MsctError::Usage("one encoder cache per sequence is required".into()));
    }
    if model.decoder.is_none() {
        return Ok(Vec::new());
    }
    let (k, tau_max) = (model.cfg.k, model.cfg.tau_max);
    let counts = train.iter().map(|s| anchor_count(s, tau_max)).collect::<Result<Vec<_>>>()?;
    let mut opts = group_optimizers(model, Stage::Decoder, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DECODER_SALT);
    let mut stop = EarlyStop::new(cfg.patience);
    let mut logs = Vec::new();
    for epoch in 0..cfg.decoder_epochs {
        let mut rows: Vec<(usize, usize)> = Vec::new();
        for (i, &c) in counts.iter().enumerate() {
            let m = cfg.decoder_anchors_per_unit.min(c);
            rows.extend(index::sample(&mut rng, c, m).into_iter().map(|a| (i, a)));
        }
        rows.shuffle(&mut rng);
        let mut acc = EpochAcc::default();
        for chunk in rows.chunks(cfg.batch_size) {
            let items: Vec<_> = chunk.iter().map(|&(i, a)| (&train[i], &train_caches[i], a)).collect();
            let batch = DecoderBatch::teacher_forced(&items, &model.norm, k, tau_max)?;
            let seed = rng.random::<u64>();
            let MsctModel { store, decoder, .. } = &mut *model;
            let decoder = decoder.as_ref().expect("checked above");
            let bd = train_step(store, &mut opts, cfg, &batch.targets, &batch.next_class, seed, |g, s, hps, ctx| {
                let o = decoder.forward(g, s, &batch, hps, ctx)?;
                Ok(Heads {
                    y_hat: o.y_hat,
                    ps: o.ps_probs,
                    hps: o.hps_probs,
                })
            })?;
            acc.add(bd);
        }
        let val_rmse = if val.is_empty() {
            None
        } else {
            Some(decoder_rmse(model, val, val_caches, cfg.val_anchor_stride)?)
        };
        let log = acc.finish(epoch, val_rmse);
        log::debug!("decoder epoch {epoch}: {log:?}");
        logs.push(log);
        if stop.observe(val_rmse, &model.store) {
            break;
        }
    }
    stop.restore(&mut model.store);
    Ok(logs)
}

/// Teacher-forced RMSE over decoder horizons, original units, on every
/// `stride`-th anchor.
pub fn decoder_rmse(model: &MsctModel, seqs: &[Sequence], caches: &[EncoderCache], stride: usize) -> Result<f64> {
    let decoder = model
        .decoder
        .as_ref()
        .ok_or_else(|| MsctError::Usage("model has no decoder".into()))?;
    let (k, tau_max) = (model.cfg.k, model.cfg.tau_max);
    let mut items = Vec::new();
    for (s, c) in seqs.iter().zip(caches) {
        let count = anchor_count(s, tau_max)?;
        items.extend((0..count).step_by(stride.max(1)).map(|a| (s, c, a)));
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for chunk in items.chunks(256) {
        let batch = DecoderBatch::teacher_forced(chunk, &model.norm, k, tau_max)?;
        let mut g = Graph::new();
        let out = decoder.forward(&mut g, &model.store, &batch, HpsInput::Plain, &mut ForwardCtx::eval())?;
        for (p, t) in g.value(out.y_hat).data().iter().zip(batch.targets.data()) {
            sq += (p - t).powi(2);
            n += 1;
        }
    }
    Ok(model.norm.std * (sq / n.max(1) as f64).sqrt())
}

/// Full procedure: normalizer from the training split, encoder, cache, decoder.
pub fn train_msct(model: &mut MsctModel, train: &[Sequence], val: &[Sequence], cfg: &TrainConfig) -> Result<TrainReport> {
    model.norm = Normalizer::fit(train)?;
    let encoder = train_encoder(model, train, val, cfg)?;
    if model.decoder.is_none() {
        return Ok(TrainReport {
            encoder,
            decoder: Vec::new(),
        });
    }
    let train_refs: Vec<&Sequence> = train.iter().collect();
    let val_refs: Vec<&Sequence> = val.iter().collect();
    let train_caches = model.encode_all(&train_refs)?;
    let val_caches = model.encode_all(&val_refs)?;
    let decoder = train_decoder(model, train, &train_caches, val, &val_caches, cfg)?;
    Ok(TrainReport { encoder, decoder })
}
