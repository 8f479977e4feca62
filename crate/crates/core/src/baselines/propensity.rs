use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsctError, Result};
use crate::model::Sequence;

/// What a propensity model may condition on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Lagged treatments only (the numerator of the stabilized weight).
    TreatmentsOnly,
    /// Lagged treatments, covariates up to `t`, lagged outcomes and static features.
    History,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropensityConfig {
    pub window: usize,
    pub clamp: f64,
    pub ridge: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            window: 5,
            clamp: 1e-3,
            ridge: 1e-6,
            max_iter: 100,
            tol: 1e-10,
        }
    }
}

/// Logistic model for `pr(T_t != 0 | features)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub conditioning: Conditioning,
    pub window: usize,
    pub clamp: f64,
    /// Intercept first, then one weight per standardized feature.
    pub coef: Vec<f64>,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    pub iterations: usize,
    /// Set when the fit did not settle, typically because the classes separate.
    pub separated: bool,
}

fn features(seq: &Sequence, t: usize, cond: Conditioning, window: usize) -> Vec<f64> {
    let mut f = Vec::new();
    for j in 1..=window {
        f.push(if t >= j && seq.t[t - j] != 0 { 1.0 } else { 0.0 });
    }
    if cond == Conditioning::History {
        for j in 0..window {
            match t.checked_sub(j) {
                Some(i) => f.extend_from_slice(seq.x_row(i)),
                None => f.extend(std::iter::repeat_n(0.0, seq.d_x)),
            }
        }
        for j in 1..=window {
            f.push(seq.y[t.saturating_sub(j)]);
        }
        f.extend_from_slice(&seq.s);
    }
    f
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl PropensityModel {
    /// Probability of any treatment at step `t`, clamped to `[clamp, 1 - clamp]`.
    pub fn prob(&self, seq: &Sequence, t: usize) -> f64 {
        let f = features(seq, t, self.conditioning, self.window);
        let mut z = self.coef[0];
        for (i, v) in f.iter().enumerate() {
            z += self.coef[i + 1] * (v - self.feat_mean[i]) / self.feat_std[i];
        }
        sigmoid(z).clamp(self.clamp, 1.0 - self.clamp)
    }

    /// Probability of the treatment actually observed at `t`.
    pub fn prob_observed(&self, seq: &Sequence, t: usize) -> f64 {
        let p = self.prob(seq, t);
        if seq.t[t] != 0 {
            p
        } else {
            1.0 - p
        }
    }
}

pub(crate) struct LogisticFit {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub max_abs_logit: f64,
}

/// Newton-Raphson (IRLS) for a ridge-penalized logistic regression; `x`
/// carries its own intercept column.
pub(crate) fn fit_logistic(x: &DMatrix<f64>, labels: &[f64], ridge: f64, max_iter: usize, tol: f64) -> Result<LogisticFit> {
    let (n, p) = x.shape();
    let y = DVector::from_column_slice(labels);
    let mut beta = DVector::zeros(p);
    let mut iterations = 0;
    let mut converged = false;
    for it in 0..max_iter {
        iterations = it + 1;
        let prob = (x * &beta).map(sigmoid);
        let w = prob.map(|v| (v * (1.0 - v)).max(1e-10));
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]);
        let mut h = x.transpose() * xw;
        for j in 0..p {
            h[(j, j)] += ridge;
        }
        let grad = x.transpose() * (&y - &prob) - &beta * ridge;
        let step = h
            .cholesky()
            .ok_or(MsctError::Numerical { op: "fit_logistic" })?
            .solve(&grad);
        beta += &step;
        if step.amax() < tol {
            converged = true;
            break;
        }
    }
    Ok(LogisticFit {
        max_abs_logit: (x * &beta).amax(),
        coef: beta.iter().copied().collect(),
        iterations,
        converged,
    })
}

/// Fits by iteratively reweighted least squares over steps `1..n` of every
/// sequence (step 0 has no history).
pub fn fit_propensity(seqs: &[Sequence], conditioning: Conditioning, cfg: &PropensityConfig) -> Result<PropensityModel> {
    if cfg.window == 0 || !(0.0..0.5).contains(&cfg.clamp) {
        return Err(MsctError::Config("propensity window must be >= 1 and clamp in [0, 0.5)".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for s in seqs {
        for t in 1..s.len() {
            rows.push(features(s, t, conditioning, cfg.window));
            labels.push(if s.t[t] != 0 { 1.0 } else { 0.0 });
        }
    }
    if rows.is_empty() {
        return Err(MsctError::Usage("no steps to fit a propensity model on".into()));
    }
    let (n, d) = (rows.len(), rows[0].len());
    let mut feat_mean = vec![0.0; d];
    let mut feat_std = vec![0.0; d];
    for r in &rows {
        for (m, v) in feat_mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    for r in &rows {
        for ((s, v), m) in feat_std.iter_mut().zip(r).zip(&feat_mean) {
            *s += (v - m).powi(2) / n as f64;
        }
    }
    for s in &mut feat_std {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let x = DMatrix::from_fn(n, d + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (rows[i][j - 1] - feat_mean[j - 1]) / feat_std[j - 1]
        }
    });
    let fit = fit_logistic(&x, &labels, cfg.ridge, cfg.max_iter, cfg.tol)?;
    let separated = !fit.converged || fit.max_abs_logit > 30.0;
    if separated {
        log::warn!("propensity fit ({conditioning:?}) looks separated; probabilities are clamped at {}", cfg.clamp);
    }
    Ok(PropensityModel {
        conditioning,
        window: cfg.window,
        clamp: cfg.clamp,
        coef: fit.coef,
        feat_mean,
        feat_std,
        iterations: fit.iterations,
        separated,
    })
}
