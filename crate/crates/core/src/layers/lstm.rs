use rand::Rng;

use super::ForwardCtx;
use crate::error::{MsctError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Gate maps stacked as `[input | forget | candidate | output]` along the last axis.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let w_x = store.add_uniform(format!("{name}.w_x"), &[d_in, 4 * hidden], hidden, rng);
        let w_h = store.add_uniform(format!("{name}.w_h"), &[hidden, 4 * hidden], hidden, rng);
        let mut bias = Tensor::zeros(&[4 * hidden]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = store.add(format!("{name}.b"), bias);
        LstmParams { w_x, w_h, b, d_in, hidden }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_x, self.w_h, self.b]
    }
}

/// Hidden and cell states for every step, shaped `[B, T, H]`, plus the final pair `[B, H]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmOutput {
    pub hidden: Var,
    pub cells: Var,
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Debug)]
pub struct Lstm {
    pub params: LstmParams,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Lstm {
            params: LstmParams::new(store, name, d_in, hidden, rng),
        }
    }

    /// Run over `x: [B, T, d_in]` from `init` (zeros if absent). In training
    /// mode one input mask and one recurrent mask are drawn per call and reused
    /// at every step.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        init: Option<(Var, Var)>,
        ctx: &mut ForwardCtx,
    ) -> Result<LstmOutput> {
        let p = &self.params;
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != p.d_in || s[1] == 0 {
            return Err(MsctError::shape("lstm_forward", &s, &[p.d_in]));
        }
        let (batch, steps, hd) = (s[0], s[1], p.hidden);
        let (mut h, mut c) = match init {
            Some((h0, c0)) => {
                for v in [h0, c0] {
                    if g.shape(v) != [batch, hd] {
                        return Err(MsctError::shape("lstm_init", g.shape(v), &[batch, hd]));
                    }
                }
                (h0, c0)
            }
            None => {
                let z = g.constant(Tensor::zeros(&[batch, hd]));
                (z, z)
            }
        };
        let x = ctx.apply(g, x, &[batch, 1, p.d_in])?;
        let rec_mask = ctx.mask(g, &[batch, hd]);
        let w_x = g.param(store, p.w_x);
        let w_h = g.param(store, p.w_h);
        let b = g.param(store, p.b);
        let xw = g.matmul(x, w_x)?;
        let xw = g.add(xw, b)?;
        let mut hs = Vec::with_capacity(steps);
        let mut cs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.narrow(xw, 1, t, 1)?;
            let xt = g.reshape(xt, &[batch, 4 * hd])?;
            let hin = match rec_mask {
                Some(m) => g.mul(h, m)?,
                None => h,
            };
            let hw = g.matmul(hin, w_h)?;
            let z = g.add(xt, hw)?;
            let zi = g.narrow(z, 1, 0, hd)?;
            let zf = g.narrow(z, 1, hd, hd)?;
            let zg = g.narrow(z, 1, 2 * hd, hd)?;
            let zo = g.narrow(z, 1, 3 * hd, hd)?;
            let i = g.sigmoid(zi)?;
            let f = g.sigmoid(zf)?;
            let cand = g.tanh(zg)?;
            let o = g.sigmoid(zo)?;
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c)?;
            h = g.mul(o, tc)?;
            hs.push(g.reshape(h, &[batch, 1, hd])?);
            cs.push(g.reshape(c, &[batch, 1, hd])?);
        }
        let (hidden, cells) = if steps == 1 {
            (hs[0], cs[0])
        } else {
            (g.concat(&hs, 1)?, g.concat(&cs, 1)?)
        };
        Ok(LstmOutput { hidden, cells, h, c })
    }
}

/// Layers of LSTMs, each fed the hidden sequence of the one below.
#[derive(Clone, Debug)]
pub struct LstmStack {
    pub layers: Vec<Lstm>,
}

impl LstmStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| {
                let d = if l == 0 { d_in } else { hidden };
                Lstm::new(store, &format!("{name}.{l}"), d, hidden, rng)
            })
            .collect();
        LstmStack { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, |l| l.params.hidden)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params.params()).collect()
    }

    /// One output per layer; `init`, if given, supplies one state pair per layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        init: Option<&[(Var, Var)]>,
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<LstmOutput>> {
        if let Some(i) = init {
            if i.len() != self.layers.len() {
                return Err(MsctError::shape("lstm_stack_init", &[i.len()], &[self.layers.len()]));
            }
        }
        let mut outs: Vec<LstmOutput> = Vec::with_capacity(self.layers.len());
        let mut input = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let o = layer.forward(g, store, input, init.map(|i| i[l]), ctx)?;
            input = o.hidden;
            outs.push(o);
        }
        Ok(outs)
    }
}
