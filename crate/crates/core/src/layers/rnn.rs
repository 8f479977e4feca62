use rand::Rng;

use super::{ForwardCtx, LstmOutput, LstmStack};
use crate::error::{MsctError, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Elman cell, `h_t = tanh(x_t W_x + h_{t-1} W_h + b)`.
#[derive(Clone, Debug)]
pub struct Rnn {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl Rnn {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Rnn {
            w_x: store.add_uniform(format!("{name}.w_x"), &[d_in, hidden], hidden, rng),
            w_h: store.add_uniform(format!("{name}.w_h"), &[hidden, hidden], hidden, rng),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[hidden])),
            d_in,
            hidden,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w_x, self.w_h, self.b]
    }

    /// Same contract as the LSTM; there is no cell state, so `cells` and `c`
    /// repeat the hidden state and only the `h` half of `init` is read.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        init: Option<Var>,
        ctx: &mut ForwardCtx,
    ) -> Result<LstmOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d_in || s[1] == 0 {
            return Err(MsctError::shape("rnn_forward", &s, &[self.d_in]));
        }
        let (batch, steps, hd) = (s[0], s[1], self.hidden);
        let mut h = match init {
            Some(h0) if g.shape(h0) != [batch, hd] => {
                return Err(MsctError::shape("rnn_init", g.shape(h0), &[batch, hd]));
            }
            Some(h0) => h0,
            None => g.constant(Tensor::zeros(&[batch, hd])),
        };
        let x = ctx.apply(g, x, &[batch, 1, self.d_in])?;
        let rec_mask = ctx.mask(g, &[batch, hd]);
        let w_x = g.param(store, self.w_x);
        let w_h = g.param(store, self.w_h);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w_x)?;
        let xw = g.add(xw, b)?;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.narrow(xw, 1, t, 1)?;
            let xt = g.reshape(xt, &[batch, hd])?;
            let hin = match rec_mask {
                Some(m) => g.mul(h, m)?,
                None => h,
            };
            let hw = g.matmul(hin, w_h)?;
            let z = g.add(xt, hw)?;
            h = g.tanh(z)?;
            hs.push(g.reshape(h, &[batch, 1, hd])?);
        }
        let hidden = if steps == 1 { hs[0] } else { g.concat(&hs, 1)? };
        Ok(LstmOutput {
            hidden,
            cells: hidden,
            h,
            c: h,
        })
    }
}

/// A stack of either recurrent cell type behind one interface.
#[derive(Clone, Debug)]
pub enum RecurrentStack {
    Lstm(LstmStack),
    Rnn(Vec<Rnn>),
}

impl RecurrentStack {
    pub fn rnn(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, depth: usize, rng: &mut impl Rng) -> Self {
        RecurrentStack::Rnn(
            (0..depth)
                .map(|l| Rnn::new(store, &format!("{name}.{l}"), if l == 0 { d_in } else { hidden }, hidden, rng))
                .collect(),
        )
    }

    pub fn depth(&self) -> usize {
        match self {
            RecurrentStack::Lstm(s) => s.layers.len(),
            RecurrentStack::Rnn(l) => l.len(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            RecurrentStack::Lstm(s) => s.params(),
            RecurrentStack::Rnn(l) => l.iter().flat_map(|c| c.params()).collect(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        init: Option<&[(Var, Var)]>,
        ctx: &mut ForwardCtx,
    ) -> Result<Vec<LstmOutput>> {
        match self {
            RecurrentStack::Lstm(s) => s.forward(g, store, x, init, ctx),
            RecurrentStack::Rnn(layers) => {
                if let Some(i) = init {
                    if i.len() != layers.len() {
                        return Err(MsctError::shape("rnn_stack_init", &[i.len()], &[layers.len()]));
                    }
                }
                let mut outs: Vec<LstmOutput> = Vec::with_capacity(layers.len());
                let mut input = x;
                for (l, cell) in layers.iter().enumerate() {
                    let o = cell.forward(g, store, input, init.map(|i| i[l].0), ctx)?;
                    input = o.hidden;
                    outs.push(o);
                }
                Ok(outs)
            }
        }
    }
}
