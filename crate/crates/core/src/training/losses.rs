use serde::{Deserialize, Serialize};

use crate::error::{MsctError, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean squared error over all elements.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(MsctError::shape("mse", g.shape(pred), g.shape(target)));
    }
    let d = g.sub(pred, target)?;
    let sq = g.square(d)?;
    g.mean(sq)
}

fn rows_and_k(g: &Graph, probs: Var) -> (usize, usize) {
    let s = g.shape(probs);
    let k = *s.last().unwrap_or(&0);
    (s.iter().product::<usize>() / k.max(1), k)
}

/// Mean over rows of `-ln p[true class]`.
pub fn cross_entropy(g: &mut Graph, probs: Var, classes: &[usize]) -> Result<Var> {
    let (rows, k) = rows_and_k(g, probs);
    if classes.len() != rows {
        return Err(MsctError::shape("cross_entropy", g.shape(probs), &[classes.len()]));
    }
    let mut onehot = vec![0.0; rows * k];
    for (r, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(MsctError::Data(format!("class {c} outside 0..{k}")));
        }
        onehot[r * k + c] = 1.0;
    }
    let w = g.constant(Tensor::new(g.shape(probs).to_vec(), onehot)?);
    weighted_nll(g, probs, w, rows)
}

/// Cross-entropy against the uniform distribution, `-(1/K) sum_k ln p_k`, averaged over rows.
pub fn confusion(g: &mut Graph, probs: Var) -> Result<Var> {
    let (rows, k) = rows_and_k(g, probs);
    let w = g.constant(Tensor::full(g.shape(probs), 1.0 / k as f64));
    weighted_nll(g, probs, w, rows)
}

fn weighted_nll(g: &mut Graph, probs: Var, weights: Var, rows: usize) -> Result<Var> {
    let p = g.clamp_min(probs, PROB_FLOOR)?;
    let lp = g.ln(p)?;
    let wl = g.mul(lp, weights)?;
    let s = g.sum(wl)?;
    g.scale(s, -1.0 / rows as f64)
}

/// Per-batch loss parts and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_y: f64,
    pub l_ps: f64,
    pub l_hps: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_y: f64, l_ps: f64, l_hps: f64, lambda: f64) -> Self {
        LossBreakdown {
            l_y,
            l_ps,
            l_hps,
            total: total_loss(l_y, l_ps, l_hps, lambda),
        }
    }
}

pub fn total_loss(l_y: f64, l_ps: f64, l_hps: f64, lambda: f64) -> f64 {
    l_y + lambda * (l_ps + l_hps)
}
