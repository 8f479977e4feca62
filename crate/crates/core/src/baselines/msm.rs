use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::propensity::{fit_propensity, Conditioning, PropensityConfig, PropensityModel};
use super::weights::{stabilized_weights, StabilizedWeights};
use crate::error::{MsctError, Result};
use crate::model::Sequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsmConfig {
    /// Fits are made for horizons `1..=horizons`.
    pub horizons: usize,
    /// Treatments before the anchor entering the regression. The stabilized
    /// weight numerator conditions on the same lags, so they default to the
    /// propensity window.
    pub lags: usize,
    pub propensity: PropensityConfig,
    /// `None` leaves stabilized weights uncapped.
    pub cap_percentile: Option<f64>,
    /// Added to the normal equations only when they are not positive definite.
    pub fallback_ridge: f64,
}

impl Default for MsmConfig {
    fn default() -> Self {
        MsmConfig {
            horizons: 6,
            lags: 5,
            propensity: PropensityConfig::default(),
            cap_percentile: Some(99.0),
            fallback_ridge: 1e-6,
        }
    }
}

/// Coefficients of one horizon's outcome regression
/// `Y_{a+h} ~ b0 + b1 . T + bl . L + b2 . (S x T) + b3 . S` over the treatments
/// `T = T_{a+1..=a+h}`, the lagged treatments `L = T_a, T_{a-1}, ...` (all
/// binarized) and static features `S`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmReport {
    pub horizon: usize,
    pub beta0: f64,
    pub beta1: Vec<f64>,
    /// Most recent lag first.
    pub beta1_lagged: Vec<f64>,
    /// Static-feature-major: `beta2[i * horizon + j]` multiplies `S_i * T_{a+1+j}`.
    pub beta2: Vec<f64>,
    pub beta3: Vec<f64>,
    /// Standard errors of `beta1`.
    pub se_beta1: Vec<f64>,
    pub sw_mean: f64,
    pub sw_max: f64,
    pub rows: usize,
    pub ridge_used: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    pub d_s: usize,
    pub lags: usize,
    pub fits: Vec<MsmReport>,
}

fn binary(t: usize) -> f64 {
    if t != 0 {
        1.0
    } else {
        0.0
    }
}

fn design_row(s: &[f64], treatments: &[f64], lagged: &[f64]) -> Vec<f64> {
    let mut r = Vec::with_capacity(1 + treatments.len() * (1 + s.len()) + lagged.len() + s.len());
    r.push(1.0);
    r.extend_from_slice(treatments);
    r.extend_from_slice(lagged);
    for si in s {
        r.extend(treatments.iter().map(|t| si * t));
    }
    r.extend_from_slice(s);
    r
}

/// Weighted least squares for one horizon. `weights[h - 1]` must hold
/// `SW(., h - 1)`; with `None` every row gets weight 1.
fn fit_horizon(seqs: &[Sequence], h: usize, lags: usize, weights: Option<&StabilizedWeights>, ridge: f64) -> Result<MsmReport> {
    let d_s = seqs[0].s.len();
    let mut rows = Vec::new();
    let mut ys = Vec::new();
    let mut ws = Vec::new();
    for (u, seq) in seqs.iter().enumerate() {
        if seq.s.len() != d_s {
            return Err(MsctError::Data("static feature width differs between units".into()));
        }
        for a in 0..seq.len().saturating_sub(h) {
            let tr: Vec<f64> = (1..=h).map(|j| binary(seq.t[a + j])).collect();
            let lagged: Vec<f64> = (0..lags).map(|j| a.checked_sub(j).map_or(0.0, |i| binary(seq.t[i]))).collect();
            rows.push(design_row(&seq.s, &tr, &lagged));
            ys.push(seq.y[a + h]);
            ws.push(weights.map_or(1.0, |sw| sw.at(u, a + 1)));
        }
    }
    let p = 1 + h * (1 + d_s) + lags + d_s;
    let n = rows.len();
    if n <= p {
        return Err(MsctError::Range(format!("{n} rows cannot identify {p} coefficients at horizon {h}")));
    }
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let y = DVector::from_vec(ys);
    let w = DVector::from_vec(ws);
    let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]);
    let xtwx = x.transpose() * &xw;
    let xtwy = xw.transpose() * &y;
    let (chol, ridge_used) = match xtwx.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            log::warn!("weighted normal equations at horizon {h} are singular; adding ridge {ridge}");
            let mut m = xtwx;
            for j in 0..p {
                m[(j, j)] += ridge;
            }
            (m.cholesky().ok_or(MsctError::Numerical { op: "fit_msm" })?, true)
        }
    };
    let beta = chol.solve(&xtwy);
    let resid = &y - &x * &beta;
    let sigma2 = resid.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum::<f64>() / (n - p) as f64;
    let cov = chol.inverse() * sigma2;
    let b: Vec<f64> = beta.iter().copied().collect();
    let (sw_mean, sw_max) = match weights {
        Some(sw) => (sw.mean, sw.max),
        None => (1.0, 1.0),
    };
    Ok(MsmReport {
        horizon: h,
        beta0: b[0],
        beta1: b[1..1 + h].to_vec(),
        beta1_lagged: b[1 + h..1 + h + lags].to_vec(),
        beta2: b[1 + h + lags..1 + h + lags + h * d_s].to_vec(),
        beta3: b[1 + h + lags + h * d_s..].to_vec(),
        se_beta1: (1..1 + h).map(|j| cov[(j, j)].max(0.0).sqrt()).collect(),
        sw_mean,
        sw_max,
        rows: n,
        ridge_used,
    })
}

/// Fits horizons `1..=weights.len()` (weighted) or `1..=horizons` (unweighted when `weights` is `None`).
pub fn fit_msm(seqs: &[Sequence], horizons: usize, lags: usize, weights: Option<&[StabilizedWeights]>, ridge: f64) -> Result<MsmModel> {
    if seqs.is_empty() {
        return Err(MsctError::Usage("no sequences to fit a structural model on".into()));
    }
    if horizons == 0 {
        return Err(MsctError::Config("at least one horizon is required".into()));
    }
    if let Some(w) = weights {
        if w.len() < horizons {
            return Err(MsctError::Usage(format!("{} weight sets for {horizons} horizons", w.len())));
        }
        if let Some(bad) = w.iter().take(horizons).enumerate().find(|(i, sw)| sw.tau != *i) {
            return Err(MsctError::Usage(format!("weight set {} has tau {}", bad.0, bad.1.tau)));
        }
    }
    let fits = (1..=horizons)
        .map(|h| fit_horizon(seqs, h, lags, weights.map(|w| &w[h - 1]), ridge))
        .collect::<Result<Vec<_>>>()?;
    Ok(MsmModel {
        d_s: seqs[0].s.len(),
        lags,
        fits,
    })
}

/// Everything produced by the weighted pipeline.
#[derive(Clone, Debug)]
pub struct IptwFit {
    pub numerator: PropensityModel,
    pub denominator: PropensityModel,
    pub weights: Vec<StabilizedWeights>,
    pub msm: MsmModel,
}

/// Propensity models, stabilized weights per horizon, then the weighted regressions.
pub fn fit_iptw_msm(seqs: &[Sequence], cfg: &MsmConfig) -> Result<IptwFit> {
    let numerator = fit_propensity(seqs, Conditioning::TreatmentsOnly, &cfg.propensity)?;
    let denominator = fit_propensity(seqs, Conditioning::History, &cfg.propensity)?;
    let weights = (0..cfg.horizons)
        .map(|tau| stabilized_weights(&numerator, &denominator, seqs, tau, cfg.cap_percentile))
        .collect::<Result<Vec<_>>>()?;
    let msm = fit_msm(seqs, cfg.horizons, cfg.lags, Some(&weights), cfg.fallback_ridge)?;
    Ok(IptwFit {
        numerator,
        denominator,
        weights,
        msm,
    })
}

impl MsmModel {
    pub fn horizons(&self) -> usize {
        self.fits.len()
    }

    /// Predicted speed at horizons `1..=treatments.len()` for a unit with static
    /// features `s` receiving `treatments` at steps `a+1, a+2, ...`. `history`
    /// holds the treatments up to and including `a` in time order; missing
    /// older lags count as untreated.
    pub fn predict(&self, s: &[f64], history: &[u8], treatments: &[u8]) -> Result<Vec<f64>> {
        if s.len() != self.d_s {
            return Err(MsctError::shape("msm_predict", &[self.d_s], &[s.len()]));
        }
        if treatments.len() > self.fits.len() {
            return Err(MsctError::Range(format!(
                "{} horizons requested, {} fitted",
                treatments.len(),
                self.fits.len()
            )));
        }
        let lagged: Vec<f64> = (0..self.lags)
            .map(|j| history.len().checked_sub(j + 1).map_or(0.0, |i| binary(history[i] as usize)))
            .collect();
        Ok((1..=treatments.len())
            .map(|h| {
                let tr: Vec<f64> = treatments[..h].iter().map(|&t| binary(t as usize)).collect();
                let f = &self.fits[h - 1];
                let coef: Vec<f64> = std::iter::once(f.beta0)
                    .chain(f.beta1.iter().copied())
                    .chain(f.beta1_lagged.iter().copied())
                    .chain(f.beta2.iter().copied())
                    .chain(f.beta3.iter().copied())
                    .collect();
                design_row(s, &tr, &lagged).iter().zip(&coef).map(|(a, b)| a * b).sum()
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.fits).map_err(|e| MsctError::json("<msm report>", e))
    }
}
