use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{crmse, rmse_per_horizon, EffectRecord};
use crate::baselines::MsmModel;
use crate::dgp::{sliding_strategies, UnitRecord};
use crate::error::{MsctError, Result};
use crate::model::{MsctConfig, MsctModel, RolloutRequest, Sequence};

/// One path to forecast: unit index, anchor, and the treatments at
/// `anchor+1..=anchor+len`. The forecast covers `len + 1` horizons.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathRequest {
    pub unit: usize,
    pub anchor: usize,
    pub treatments: Vec<u8>,
}

pub trait Forecaster {
    fn forecast(&self, seqs: &[Sequence], requests: &[PathRequest]) -> Result<Vec<Vec<f64>>>;
}

impl Forecaster for MsctModel {
    fn forecast(&self, seqs: &[Sequence], requests: &[PathRequest]) -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let caches = self.encode_all(&refs)?;
        let reqs: Vec<RolloutRequest> = requests
            .iter()
            .map(|r| RolloutRequest {
                seq: &seqs[r.unit],
                cache: &caches[r.unit],
                anchor: r.anchor,
                treatments: &r.treatments,
            })
            .collect();
        self.rollout(&reqs)
    }
}

impl Forecaster for MsmModel {
    fn forecast(&self, seqs: &[Sequence], requests: &[PathRequest]) -> Result<Vec<Vec<f64>>> {
        requests
            .iter()
            .map(|r| {
                let s = &seqs[r.unit];
                let history: Vec<u8> = s.t[..=r.anchor].iter().map(|&c| c as u8).collect();
                let mut tr = r.treatments.clone();
                tr.push(0);
                self.predict(&s.s, &history, &tr)
            })
            .collect()
    }
}

/// Predicts the last observed speed at every horizon.
#[derive(Clone, Copy, Debug, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn forecast(&self, seqs: &[Sequence], requests: &[PathRequest]) -> Result<Vec<Vec<f64>>> {
        Ok(requests
            .iter()
            .map(|r| vec![seqs[r.unit].y[r.anchor]; r.treatments.len() + 1])
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Score only factual futures even when counterfactual paths exist.
    pub factual_only: bool,
    /// Use every n-th anchor.
    pub anchor_stride: usize,
    /// Strategy whose difference from "zero" defines the crash effect.
    pub effect_strategy: String,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            factual_only: false,
            anchor_stride: 1,
            effect_strategy: "slide_0".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model: String,
    /// Horizons `1..=tau_max + 1`.
    pub rmse: Vec<Option<f64>>,
    /// Horizons `1..=tau_max`.
    pub crmse: Vec<Option<f64>>,
    pub crmse_used: usize,
    pub crmse_skipped: usize,
    /// Scored paths (factual plus every counterfactual strategy).
    pub paths: usize,
    /// Share of anchors whose horizon-1 prediction under the effect strategy is
    /// below the no-crash prediction.
    pub crash_below_zero: Option<f64>,
    /// Mean predicted and true path per strategy label.
    pub mean_pred: BTreeMap<String, Vec<f64>>,
    pub mean_true: BTreeMap<String, Vec<f64>>,
}

fn mean_paths(paths: &BTreeMap<String, Vec<&Vec<f64>>>) -> BTreeMap<String, Vec<f64>> {
    paths
        .iter()
        .map(|(label, rows)| {
            let len = rows[0].len();
            let m = (0..len)
                .map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64)
                .collect();
            (label.clone(), m)
        })
        .collect()
}

/// Scores `forecaster` on `records`. Counterfactual strategies and the factual
/// future are pooled with equal weight per path; records without
/// counterfactual paths (or with `factual_only`) contribute factual paths only.
/// `model` supplies the treatment field, class count and horizon.
pub fn evaluate(name: &str, forecaster: &dyn Forecaster, records: &[UnitRecord], model: &MsctConfig, opts: &EvalOptions) -> Result<Evaluation> {
    let (k, tau_max) = (model.k, model.tau_max);
    if opts.anchor_stride == 0 {
        return Err(MsctError::Config("anchor_stride must be >= 1".into()));
    }
    let seqs = crate::model::sequences(records, model.treatment_field, k)?;
    let strategies: BTreeMap<String, Vec<u8>> = sliding_strategies(tau_max)
        .into_iter()
        .map(|s| (s.label, s.treatments))
        .collect();
    let mut requests = Vec::new();
    let mut truths: Vec<Vec<f64>> = Vec::new();
    // (label, unit, anchor) per request; label None = factual
    let mut tags: Vec<(Option<String>, usize, usize)> = Vec::new();
    for (u, (rec, seq)) in records.iter().zip(&seqs).enumerate() {
        let n = seq.len();
        if n < tau_max + 2 {
            return Err(MsctError::Range(format!("unit {u} has {n} steps, fewer than tau_max + 2")));
        }
        for a in (0..n - tau_max - 1).step_by(opts.anchor_stride) {
            requests.push(PathRequest {
                unit: u,
                anchor: a,
                treatments: seq.t[a + 1..=a + tau_max].iter().map(|&c| c as u8).collect(),
            });
            // Forecast paths leave the step after the strategy untreated, so a
            // factual crash there has no matching prediction at that horizon.
            let last = if seq.t[a + tau_max + 1] == 0 { a + tau_max + 1 } else { a + tau_max };
            truths.push(seq.y[a + 1..=last].to_vec());
            tags.push((None, u, a));
            if opts.factual_only {
                continue;
            }
            let Some(branches) = rec.cf.get(&a) else { continue };
            for (label, path) in branches {
                let tr = strategies
                    .get(label)
                    .ok_or_else(|| MsctError::Data(format!("unknown strategy label {label}")))?;
                if path.len() != tau_max + 1 {
                    return Err(MsctError::shape("counterfactual_path", &[path.len()], &[tau_max + 1]));
                }
                requests.push(PathRequest {
                    unit: u,
                    anchor: a,
                    treatments: tr.clone(),
                });
                truths.push(path.clone());
                tags.push((Some(label.clone()), u, a));
            }
        }
    }
    let mut preds = forecaster.forecast(&seqs, &requests)?;
    if preds.len() != truths.len() {
        return Err(MsctError::shape("forecast", &[preds.len()], &[truths.len()]));
    }
    for (p, t) in preds.iter_mut().zip(&truths) {
        if p.len() < t.len() {
            return Err(MsctError::shape("forecast_path", &[p.len()], &[t.len()]));
        }
        p.truncate(t.len());
    }
    let rmse = rmse_per_horizon(&preds, &truths, tau_max + 1)?;

    let mut by_anchor: BTreeMap<(usize, usize), BTreeMap<&str, (&Vec<f64>, &Vec<f64>)>> = BTreeMap::new();
    let mut pred_by_label: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    let mut true_by_label: BTreeMap<String, Vec<&Vec<f64>>> = BTreeMap::new();
    for (((label, u, a), p), t) in tags.iter().zip(&preds).zip(&truths) {
        if let Some(l) = label {
            by_anchor.entry((*u, *a)).or_default().insert(l.as_str(), (p, t));
            pred_by_label.entry(l.clone()).or_default().push(p);
            true_by_label.entry(l.clone()).or_default().push(t);
        }
    }
    let effects: Vec<EffectRecord> = by_anchor
        .values()
        .map(|m| {
            let crash = m.get(opts.effect_strategy.as_str());
            let zero = m.get("zero");
            EffectRecord {
                true_crash: crash.map(|c| c.1[..tau_max].to_vec()),
                true_zero: zero.map(|z| z.1[..tau_max].to_vec()),
                pred_crash: crash.map(|c| c.0[..tau_max].to_vec()),
                pred_zero: zero.map(|z| z.0[..tau_max].to_vec()),
            }
        })
        .collect();
    let c = crmse(&effects, tau_max)?;
    let below: Vec<bool> = effects
        .iter()
        .filter_map(|e| Some(e.pred_crash.as_ref()?[0] < e.pred_zero.as_ref()?[0]))
        .collect();
    Ok(Evaluation {
        model: name.to_string(),
        rmse,
        crmse: c.per_horizon,
        crmse_used: c.used,
        crmse_skipped: c.skipped,
        paths: truths.len(),
        crash_below_zero: (!below.is_empty()).then(|| below.iter().filter(|&&b| b).count() as f64 / below.len() as f64),
        mean_pred: mean_paths(&pred_by_label),
        mean_true: mean_paths(&true_by_label),
    })
}
