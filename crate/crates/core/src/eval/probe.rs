use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_logistic;
use crate::error::{MsctError, Result};
use crate::model::{MsctModel, Sequence};

/// How well a linear classifier on the frozen representation recovers the
/// factual next treatment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Mean of the per-class recalls, so a constant guess scores 0.5.
    pub balanced_accuracy: f64,
    /// Treated share in the probe's training rows; also the decision threshold.
    pub prevalence: f64,
    pub train_rows: usize,
    pub test_rows: usize,
}

fn rows(model: &MsctModel, seqs: &[Sequence]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let refs: Vec<&Sequence> = seqs.iter().collect();
    let caches = model.encode_all(&refs)?;
    let d_h = model.cfg.d_h;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (s, c) in seqs.iter().zip(&caches) {
        let phi = c.phi.data();
        for p in 0..c.len() {
            x.push(phi[p * d_h..(p + 1) * d_h].to_vec());
            y.push(if s.t[p + 1] != 0 { 1.0 } else { 0.0 });
        }
    }
    Ok((x, y))
}

/// Fits a ridge logistic probe on `train` representations and scores it on `test`.
pub fn probe_treatment(model: &MsctModel, train: &[Sequence], test: &[Sequence]) -> Result<ProbeResult> {
    let (xtr, ytr) = rows(model, train)?;
    let (xte, yte) = rows(model, test)?;
    if xtr.is_empty() || xte.is_empty() {
        return Err(MsctError::Usage("probe needs non-empty train and test sets".into()));
    }
    let prevalence = ytr.iter().sum::<f64>() / ytr.len() as f64;
    if prevalence == 0.0 || prevalence == 1.0 {
        return Err(MsctError::Data("probe training rows contain a single treatment class".into()));
    }
    let d = xtr[0].len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for r in &xtr {
        for j in 0..d {
            mean[j] += r[j] / xtr.len() as f64;
        }
    }
    for r in &xtr {
        for j in 0..d {
            sd[j] += (r[j] - mean[j]).powi(2) / xtr.len() as f64;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    let design = |rows: &[Vec<f64>]| {
        DMatrix::from_fn(rows.len(), d + 1, |i, j| if j == 0 { 1.0 } else { (rows[i][j - 1] - mean[j - 1]) / sd[j - 1] })
    };
    let fit = fit_logistic(&design(&xtr), &ytr, 1e-2, 100, 1e-10)?;
    let logits = design(&xte) * nalgebra::DVector::from_vec(fit.coef);
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (z, &y) in logits.iter().zip(&yte) {
        let guess = crate::baselines::sigmoid(*z) >= prevalence;
        if y == 1.0 {
            pos += 1;
            tp += guess as usize;
        } else {
            neg += 1;
            tn += (!guess) as usize;
        }
    }
    let recall = |hit: usize, n: usize| if n == 0 { 0.5 } else { hit as f64 / n as f64 };
    Ok(ProbeResult {
        accuracy: (tp + tn) as f64 / yte.len() as f64,
        balanced_accuracy: (recall(tp, pos) + recall(tn, neg)) / 2.0,
        prevalence,
        train_rows: xtr.len(),
        test_rows: xte.len(),
    })
}
