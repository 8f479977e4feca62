use serde::{Deserialize, Serialize};

use crate::error::{MsctError, Result};

/// Per-horizon RMSE over aligned prediction/truth paths; index `i` of a path is
/// horizon `i + 1`. Horizons no path reaches come back as `None`.
pub fn rmse_per_horizon(preds: &[Vec<f64>], truths: &[Vec<f64>], horizons: usize) -> Result<Vec<Option<f64>>> {
    if preds.len() != truths.len() {
        return Err(MsctError::shape("rmse_per_horizon", &[preds.len()], &[truths.len()]));
    }
    let mut sq = vec![0.0; horizons];
    let mut n = vec![0usize; horizons];
    for (p, t) in preds.iter().zip(truths) {
        if p.len() != t.len() || p.len() > horizons {
            return Err(MsctError::shape("rmse_per_horizon", &[p.len(), horizons], &[t.len()]));
        }
        for (i, (a, b)) in p.iter().zip(t).enumerate() {
            sq[i] += (a - b).powi(2);
            n[i] += 1;
        }
    }
    Ok(sq.iter().zip(&n).map(|(s, &c)| (c > 0).then(|| (s / c as f64).sqrt())).collect())
}

/// Crash and no-crash branches for one anchor, true and predicted. Any branch
/// may be missing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EffectRecord {
    pub true_crash: Option<Vec<f64>>,
    pub true_zero: Option<Vec<f64>>,
    pub pred_crash: Option<Vec<f64>>,
    pub pred_zero: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crmse {
    pub per_horizon: Vec<Option<f64>>,
    /// Records with all four branches.
    pub used: usize,
    /// Records skipped for a missing branch.
    pub skipped: usize,
}

impl Crmse {
    pub fn coverage(&self) -> f64 {
        let total = self.used + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.used as f64 / total as f64
        }
    }
}

/// RMSE of the effect `crash - zero`, predicted against true, per horizon over
/// `1..=horizons`. Branches shorter than `horizons` contribute to the horizons
/// they cover.
pub fn crmse(records: &[EffectRecord], horizons: usize) -> Result<Crmse> {
    let mut sq = vec![0.0; horizons];
    let mut n = vec![0usize; horizons];
    let (mut used, mut skipped) = (0, 0);
    for r in records {
        let (Some(tc), Some(tz), Some(pc), Some(pz)) = (&r.true_crash, &r.true_zero, &r.pred_crash, &r.pred_zero) else {
            skipped += 1;
            continue;
        };
        let len = tc.len();
        if tz.len() != len || pc.len() != len || pz.len() != len {
            return Err(MsctError::shape("crmse", &[tc.len(), tz.len()], &[pc.len(), pz.len()]));
        }
        used += 1;
        for i in 0..len.min(horizons) {
            let err = (tc[i] - tz[i]) - (pc[i] - pz[i]);
            sq[i] += err * err;
            n[i] += 1;
        }
    }
    Ok(Crmse {
        per_horizon: sq.iter().zip(&n).map(|(s, &c)| (c > 0).then(|| (s / c as f64).sqrt())).collect(),
        used,
        skipped,
    })
}

/// Sample mean and standard deviation (n - 1) of the present values.
pub fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    (Some(m), Some(sd))
}
