use rand::Rng;

use crate::error::{MsctError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map on the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), &[d_out], d_in, rng));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gain, self.bias]
    }
}

/// `LayerNorm(alpha + sublayer_out)`.
pub fn add_norm(
    g: &mut Graph,
    store: &ParamStore,
    ln: &LayerNormParams,
    alpha: Var,
    sublayer_out: Var,
) -> Result<Var> {
    if g.shape(alpha) != g.shape(sublayer_out) {
        return Err(MsctError::shape("add_norm", g.shape(alpha), g.shape(sublayer_out)));
    }
    let s = g.add(alpha, sublayer_out)?;
    ln.forward(g, store, s)
}

/// `Linear(ReLU(Linear(x)))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_h: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), d_h, d_ff, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), d_ff, d_h, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let d = *g.shape(x).last().unwrap_or(&0);
        if d != self.inner.d_in {
            return Err(MsctError::shape("feed_forward", g.shape(x), &[self.inner.d_in]));
        }
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.inner.params();
        p.extend(self.outer.params());
        p
    }
}

/// Two-layer head `Linear -> ELU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, true, rng),
            out: Linear::new(store, &format!("{name}.out"), d_hidden, d_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, store, x)?;
        let h = g.elu(h)?;
        self.out.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params();
        p.extend(self.out.params());
        p
    }
}
