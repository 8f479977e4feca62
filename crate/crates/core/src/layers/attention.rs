use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ForwardCtx;
use crate::error::{MsctError, Result};
use crate::tensor::{AttnMask, Graph, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_h: usize,
    pub d_a: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d_a == 0 || self.heads == 0 {
            return Err(MsctError::Config(format!(
                "attention dims must be >= 1 (d_h={}, d_a={}, heads={})",
                self.d_h, self.d_a, self.heads
            )));
        }
        Ok(())
    }
}

/// `softmax(q k^T / sqrt(d_a)) v` over `[B, Tq, d_a] x [B, Tk, d_a] x [B, Tk, d_v]`.
///
/// Returns the output and the attention weights. `weight_dropout`, when given,
/// multiplies the weights after the softmax.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttnMask>,
    weight_dropout: Option<Var>,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sk.len() != 3 || sq[2] != sk[2] || sq[0] != sk[0] {
        return Err(MsctError::shape("scaled_dot_attention", &sq, &sk));
    }
    if sv.len() != 3 || sv[0] != sk[0] || sv[1] != sk[1] {
        return Err(MsctError::shape("scaled_dot_attention", &sk, &sv));
    }
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (sq[2] as f64).sqrt())?;
    let weights = g.softmax(scores, mask)?;
    let used = match weight_dropout {
        Some(m) => g.mul(weights, m)?,
        None => weights,
    };
    let out = g.bmm(used, v, false)?;
    Ok((out, weights))
}

/// Per-head query/key maps of width `d_a`, value maps of width `d_h`, and an
/// output projection from the concatenated heads (`heads * d_h`) back to `d_h`.
/// The per-head maps are stored fused; head `j` owns columns `j*d_a..(j+1)*d_a`
/// of `wq`/`wk` and `j*d_h..(j+1)*d_h` of `wv`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let AttentionConfig { d_h, d_a, heads, .. } = cfg;
        Ok(MultiHeadAttention {
            cfg,
            wq: store.add_uniform(format!("{name}.wq"), &[d_h, heads * d_a], d_h, rng),
            wk: store.add_uniform(format!("{name}.wk"), &[d_h, heads * d_a], d_h, rng),
            wv: store.add_uniform(format!("{name}.wv"), &[d_h, heads * d_h], d_h, rng),
            wo: store.add_uniform(format!("{name}.wo"), &[heads * d_h, d_h], heads * d_h, rng),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }

    /// Self-attention when `context` is `None`, otherwise queries from `h` and
    /// keys/values from `context`. A causal config builds its own mask; any
    /// other masking comes through `key_mask`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        context: Option<Var>,
        key_mask: Option<&AttnMask>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(g, store, h, context, key_mask, ctx)?.0)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        context: Option<Var>,
        key_mask: Option<&AttnMask>,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Vec<Var>)> {
        let AttentionConfig { d_h, d_a, heads, causal } = self.cfg;
        let sh = g.shape(h).to_vec();
        if sh.len() != 3 || sh[2] != d_h {
            return Err(MsctError::shape("multi_head_attention", &sh, &[d_h]));
        }
        let src = match context {
            Some(c) => {
                let sc = g.shape(c);
                if sc.len() != 3 || sc[2] != d_h || sc[0] != sh[0] {
                    return Err(MsctError::shape("multi_head_attention", &sh, sc));
                }
                c
            }
            None => h,
        };
        let (batch, tq, tk) = (sh[0], sh[1], g.shape(src)[1]);
        let causal_mask;
        let mask = match (causal, key_mask) {
            (true, Some(_)) => {
                return Err(MsctError::Usage("causal attention takes no extra key mask".into()))
            }
            (true, None) => {
                if tq != tk {
                    return Err(MsctError::shape("causal_attention", &[tq], &[tk]));
                }
                causal_mask = AttnMask::causal(tq);
                Some(&causal_mask)
            }
            (false, m) => m,
        };
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let q_all = g.matmul(h, wq)?;
        let k_all = g.matmul(src, wk)?;
        let v_all = g.matmul(src, wv)?;
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for j in 0..heads {
            let q = g.narrow(q_all, 2, j * d_a, d_a)?;
            let k = g.narrow(k_all, 2, j * d_a, d_a)?;
            let v = g.narrow(v_all, 2, j * d_h, d_h)?;
            let drop = ctx.mask(g, &[batch, 1, tk]);
            let (o, w) = scaled_dot_attention(g, q, k, v, mask, drop)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 2)? };
        let wo = g.param(store, self.wo);
        Ok((g.matmul(cat, wo)?, weights))
    }
}
