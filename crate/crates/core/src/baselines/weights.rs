use serde::{Deserialize, Serialize};

use super::propensity::PropensityModel;
use crate::error::{MsctError, Result};
use crate::model::Sequence;

/// `SW(t, tau)` for every unit and every start step `t in 1..=n-1-tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilizedWeights {
    pub tau: usize,
    /// `weights[unit][t - 1]`.
    pub weights: Vec<Vec<f64>>,
    pub mean: f64,
    pub max: f64,
    /// Value weights were capped at, if a cap was applied.
    pub cap: Option<f64>,
    /// How many weights exceeded the cap.
    pub capped: usize,
}

impl StabilizedWeights {
    /// Weight of the window starting at step `t` (1-based steps).
    pub fn at(&self, unit: usize, t: usize) -> f64 {
        self.weights[unit][t - 1]
    }
}

/// Linear-interpolation percentile of unsorted values.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = pct.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Product over steps `t..=t+tau` of numerator over denominator probability of
/// the observed treatment. Weights above the `cap_percentile` percentile are
/// set to it; the reported mean and max are taken after capping.
pub fn stabilized_weights(
    numerator: &PropensityModel,
    denominator: &PropensityModel,
    seqs: &[Sequence],
    tau: usize,
    cap_percentile: Option<f64>,
) -> Result<StabilizedWeights> {
    let mut weights = Vec::with_capacity(seqs.len());
    for s in seqs {
        if s.len() < tau + 2 {
            return Err(MsctError::Range(format!("sequence length {} too short for tau {tau}", s.len())));
        }
        let ratios: Vec<f64> = (1..s.len())
            .map(|t| numerator.prob_observed(s, t) / denominator.prob_observed(s, t))
            .collect();
        let w: Vec<f64> = (1..s.len() - tau)
            .map(|t| ratios[t - 1..t + tau].iter().product())
            .collect();
        weights.push(w);
    }
    let flat: Vec<f64> = weights.iter().flatten().copied().collect();
    if flat.is_empty() {
        return Err(MsctError::Usage("no weights to compute".into()));
    }
    if let Some(bad) = flat.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(MsctError::Numerical {
            op: if *bad == 0.0 { "stabilized_weights_zero" } else { "stabilized_weights" },
        });
    }
    let (cap, capped) = match cap_percentile {
        Some(pct) => {
            let c = percentile(&flat, pct);
            let mut n = 0;
            for w in weights.iter_mut().flatten() {
                if *w > c {
                    *w = c;
                    n += 1;
                }
            }
            (Some(c), n)
        }
        None => (None, 0),
    };
    let flat: Vec<f64> = weights.iter().flatten().copied().collect();
    Ok(StabilizedWeights {
        tau,
        mean: flat.iter().sum::<f64>() / flat.len() as f64,
        max: flat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        weights,
        cap,
        capped,
    })
}
