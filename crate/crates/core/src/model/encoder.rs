use super::data::EncoderBatch;
use super::{Backbone, Group, MsctConfig, Registrar};
use crate::error::{MsctError, Result};
use crate::layers::{positional_encoding, EncoderBlock, ForwardCtx, Linear, LstmStack, Mlp, PeBase, RecurrentStack};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// How the representation reaches the HPS head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HpsInput {
    Plain,
    /// Identity forward; the gradient into the representation is multiplied by `-lambda`.
    Reversed(f64),
}

#[derive(Clone, Debug)]
pub enum SequenceCore {
    Attention(Vec<EncoderBlock>),
    Recurrent(RecurrentStack),
}

#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub input: Linear,
    pub core: SequenceCore,
    pub phi: Linear,
    pub y_head: Mlp,
    pub ps_lstm: Option<LstmStack>,
    pub ps_head: Option<Mlp>,
    pub hps_head: Option<Mlp>,
    pub pe_base: PeBase,
    pub k: usize,
}

/// Graph handles of one encoder pass over `[B, L]` positions.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub phi: Var,
    /// Normalized one-step predictions `[B, L]`.
    pub y_hat: Var,
    pub ps_probs: Option<Var>,
    pub hps_probs: Option<Var>,
    /// Final-layer treatment LSTM states, `[B, L, d_h]` each.
    pub ps_states: Option<(Var, Var)>,
    /// Every layer of the recurrent core, when that core is in use.
    pub core_states: Vec<(Var, Var)>,
}

impl EncoderNet {
    pub(crate) fn new(cfg: &MsctConfig, reg: &mut Registrar) -> Result<Self> {
        let d_h = cfg.d_h;
        let input = reg.with(Group::R, |s, r| Ok(Linear::new(s, "enc.input", cfg.encoder_input_width(), d_h, true, r)))?;
        let core = reg.with(Group::R, |s, r| match cfg.backbone {
            Backbone::Transformer => (0..cfg.blocks)
                .map(|l| EncoderBlock::new(s, &format!("enc.block{l}"), cfg.attention(), cfg.ff_width(), r))
                .collect::<Result<Vec<_>>>()
                .map(SequenceCore::Attention),
            Backbone::Lstm => Ok(SequenceCore::Recurrent(RecurrentStack::Lstm(LstmStack::new(s, "enc.core", d_h, d_h, cfg.blocks, r)))),
            Backbone::Rnn => Ok(SequenceCore::Recurrent(RecurrentStack::rnn(s, "enc.core", d_h, d_h, cfg.blocks, r))),
        })?;
        let phi = reg.with(Group::R, |s, r| Ok(Linear::new(s, "enc.phi", d_h, d_h, true, r)))?;
        let y_head = reg.with(Group::Y, |s, r| Ok(Mlp::new(s, "enc.y_head", d_h + cfg.k, d_h, 1, r)))?;
        let (ps_lstm, ps_head) = if cfg.ps_pathway {
            let lstm = reg.with(Group::T, |s, r| Ok(LstmStack::new(s, "enc.ps_lstm", cfg.k, d_h, cfg.blocks, r)))?;
            let head = reg.with(Group::Ps, |s, r| Ok(Mlp::new(s, "enc.ps_head", d_h, d_h, cfg.k, r)))?;
            (Some(lstm), Some(head))
        } else {
            (None, None)
        };
        let hps_head = if cfg.hps_head {
            Some(reg.with(Group::Hps, |s, r| Ok(Mlp::new(s, "enc.hps_head", d_h, d_h, cfg.k, r)))?)
        } else {
            None
        };
        Ok(EncoderNet {
            input,
            core,
            phi,
            y_head,
            ps_lstm,
            ps_head,
            hps_head,
            pe_base: cfg.pe_base,
            k: cfg.k,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &EncoderBatch,
        hps: HpsInput,
        ctx: &mut ForwardCtx,
    ) -> Result<EncoderOutput> {
        let (b, l) = (batch.batch(), batch.len());
        let d_in = batch.inputs.shape()[2];
        if d_in != self.input.d_in || batch.treat_in.shape()[2] != self.k {
            return Err(MsctError::shape("encode", batch.inputs.shape(), &[b, l, self.input.d_in]));
        }
        let d_h = self.phi.d_in;
        let x = g.constant(batch.inputs.clone());
        let h = self.input.forward(g, store, x)?;
        let mut core_states = Vec::new();
        let h = match &self.core {
            SequenceCore::Attention(blocks) => {
                let pe = g.constant(positional_encoding(l, d_h, self.pe_base));
                let mut h = g.add(h, pe)?;
                h = ctx.apply_seq(g, h)?;
                for block in blocks {
                    h = block.forward(g, store, h, ctx)?;
                }
                h
            }
            SequenceCore::Recurrent(stack) => {
                let outs = stack.forward(g, store, h, None, ctx)?;
                core_states = outs.iter().map(|o| (o.hidden, o.cells)).collect();
                outs.last().expect("depth >= 1").hidden
            }
        };
        let phi = self.phi.forward(g, store, h)?;
        let phi = g.elu(phi)?;
        let next = g.constant(batch.treat_next.clone());
        let y_in = g.concat(&[phi, next], 2)?;
        let y_hat = self.y_head.forward(g, store, y_in)?;
        let y_hat = g.reshape(y_hat, &[b, l])?;
        let (ps_probs, ps_states) = match (&self.ps_lstm, &self.ps_head) {
            (Some(lstm), Some(head)) => {
                let t = g.constant(batch.treat_in.clone());
                let outs = lstm.forward(g, store, t, None, ctx)?;
                let top = *outs.last().expect("depth >= 1");
                let logits = head.forward(g, store, top.hidden)?;
                (Some(g.softmax(logits, None)?), Some((top.hidden, top.cells)))
            }
            _ => (None, None),
        };
        let hps_probs = match &self.hps_head {
            Some(head) => {
                let src = match hps {
                    HpsInput::Plain => phi,
                    HpsInput::Reversed(lambda) => g.grad_scale(phi, -lambda)?,
                };
                let logits = head.forward(g, store, src)?;
                Some(g.softmax(logits, None)?)
            }
            None => None,
        };
        Ok(EncoderOutput {
            phi,
            y_hat,
            ps_probs,
            hps_probs,
            ps_states,
            core_states,
        })
    }

    /// One eval-mode step of the recurrent core from explicit per-layer states.
    /// `inputs` is `[B, 1, d_in]` and `treat_next` `[B, k]`; returns normalized
    /// predictions with the advanced states.
    pub fn step(
        &self,
        store: &ParamStore,
        inputs: Tensor,
        states: &[(Tensor, Tensor)],
        treat_next: Tensor,
    ) -> Result<(Vec<f64>, Vec<(Tensor, Tensor)>)> {
        let SequenceCore::Recurrent(stack) = &self.core else {
            return Err(MsctError::Usage("stepping needs a recurrent core".into()));
        };
        let b = inputs.shape()[0];
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let x = g.constant(inputs);
        let h = self.input.forward(&mut g, store, x)?;
        let init: Vec<(Var, Var)> = states
            .iter()
            .map(|(h, c)| (g.constant(h.clone()), g.constant(c.clone())))
            .collect();
        let outs = stack.forward(&mut g, store, h, Some(&init), &mut ctx)?;
        let top = outs.last().expect("depth >= 1").hidden;
        let phi = self.phi.forward(&mut g, store, top)?;
        let phi = g.elu(phi)?;
        let phi = g.reshape(phi, &[b, self.phi.d_out])?;
        let next = g.constant(treat_next);
        let y_in = g.concat(&[phi, next], 1)?;
        let y = self.y_head.forward(&mut g, store, y_in)?;
        let next_states = outs.iter().map(|o| (g.value(o.h).clone(), g.value(o.c).clone())).collect();
        Ok((g.value(y).data().to_vec(), next_states))
    }

    /// Eval-mode pass over whole sequences, split into per-unit caches.
    pub fn cache(&self, store: &ParamStore, batch: &EncoderBatch) -> Result<Vec<EncoderCache>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let out = self.forward(&mut g, store, batch, HpsInput::Plain, &mut ctx)?;
        let (b, l) = (batch.batch(), batch.len());
        let split = |t: &Tensor| -> Vec<Tensor> {
            let w = t.len() / (b * l);
            t.data()
                .chunks(l * w)
                .map(|c| Tensor::from_parts(if w == 1 { vec![l] } else { vec![l, w] }, c.to_vec()))
                .collect()
        };
        let phi = split(g.value(out.phi));
        let y_hat = split(g.value(out.y_hat));
        let ps = out.ps_states.map(|(h, c)| (split(g.value(h)), split(g.value(c))));
        let core: Vec<(Vec<Tensor>, Vec<Tensor>)> = out
            .core_states
            .iter()
            .map(|&(h, c)| (split(g.value(h)), split(g.value(c))))
            .collect();
        Ok((0..b)
            .map(|i| EncoderCache {
                phi: phi[i].clone(),
                y_hat: y_hat[i].data().to_vec(),
                ps_state: ps.as_ref().map(|(h, c)| (h[i].clone(), c[i].clone())),
                core_states: core.iter().map(|(h, c)| (h[i].clone(), c[i].clone())).collect(),
            })
            .collect())
    }
}

/// Frozen encoder results for one unit, indexed by encoder position.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderCache {
    /// `[L, d_h]`.
    pub phi: Tensor,
    /// Normalized one-step predictions under the factual next treatment.
    pub y_hat: Vec<f64>,
    pub ps_state: Option<(Tensor, Tensor)>,
    pub core_states: Vec<(Tensor, Tensor)>,
}

impl EncoderCache {
    pub fn len(&self) -> usize {
        self.y_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_hat.is_empty()
    }
}

pub(crate) fn row(t: &Tensor, i: usize) -> &[f64] {
    let w = t.shape()[1];
    &t.data()[i * w..(i + 1) * w]
}
