use super::data::{one_hot, Normalizer, Sequence};
use super::encoder::{row, EncoderCache, HpsInput};
use super::{Backbone, Group, MsctConfig, Registrar};
use crate::error::{MsctError, Result};
use crate::layers::{positional_encoding_at, DecoderBlock, ForwardCtx, Linear, LstmStack, Mlp, PeBase, RecurrentStack};
use crate::tensor::{AttnMask, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DecoderNet {
    pub input: Linear,
    pub blocks: Vec<DecoderBlock>,
    pub core: Option<RecurrentStack>,
    pub phi: Linear,
    pub y_head: Mlp,
    pub memory: Option<Linear>,
    pub ps_lstm: Option<LstmStack>,
    pub ps_head: Option<Mlp>,
    pub hps_head: Option<Mlp>,
    pub pe_base: PeBase,
    pub k: usize,
}

/// One decoder step of one row: what the step reads and what it is scored on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderStep {
    pub treat: usize,
    /// Lagged outcome slot (normalized).
    pub y_lag: f64,
    /// Previous-prediction slot (normalized).
    pub y_prev: f64,
    pub next_treat: usize,
    /// Normalized target; unused at inference.
    pub target: f64,
}

/// Decoder input rows of equal step count, each anchored on one unit's encoder cache.
#[derive(Clone, Debug)]
pub struct DecoderBatch {
    pub inputs: Tensor,
    pub treat_in: Tensor,
    pub treat_next: Tensor,
    pub next_class: Vec<usize>,
    pub targets: Tensor,
    pub positions: Vec<usize>,
    /// Encoder representation per row, `[B, L, d_h]`.
    pub phi: Tensor,
    pub anchors: Vec<usize>,
    /// Final-layer treatment LSTM `(h, c)` at the anchor, concatenated to `[B, 2 d_h]`.
    pub ps_memory: Option<Tensor>,
    /// Recurrent-core states at the anchor, one `[B, d_h]` pair per layer.
    pub core_init: Vec<(Tensor, Tensor)>,
}

impl DecoderBatch {
    pub fn from_steps(rows: &[(&EncoderCache, &[f64], usize, Vec<DecoderStep>)], k: usize) -> Result<Self> {
        let (first, _, _, steps0) = rows.first().ok_or_else(|| MsctError::Usage("empty decoder batch".into()))?;
        let (b, j) = (rows.len(), steps0.len());
        let (l, d_h) = (first.phi.shape()[0], first.phi.shape()[1]);
        let mut inputs = Vec::new();
        let mut treat_in = Vec::new();
        let mut treat_next = Vec::new();
        let mut next_class = Vec::with_capacity(b * j);
        let mut targets = Vec::with_capacity(b * j);
        let mut positions = Vec::with_capacity(b * j);
        let mut phi = Vec::with_capacity(b * l * d_h);
        let mut anchors = Vec::with_capacity(b);
        let mut memory = Vec::new();
        let layers = first.core_states.len();
        let mut core: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); layers];
        for (cache, s, anchor, steps) in rows {
            if steps.len() != j || cache.phi.shape() != first.phi.shape() || *anchor >= l {
                return Err(MsctError::shape("decoder_batch", &[steps.len(), *anchor], &[j, l]));
            }
            for (i, st) in steps.iter().enumerate() {
                if st.treat >= k || st.next_treat >= k {
                    return Err(MsctError::Data(format!("treatment class outside 0..{k}")));
                }
                one_hot(&mut inputs, st.treat, k);
                inputs.push(st.y_lag);
                inputs.extend_from_slice(s);
                inputs.push(st.y_prev);
                one_hot(&mut treat_in, st.treat, k);
                one_hot(&mut treat_next, st.next_treat, k);
                next_class.push(st.next_treat);
                targets.push(st.target);
                positions.push(anchor + 1 + i);
            }
            phi.extend_from_slice(cache.phi.data());
            anchors.push(*anchor);
            if let Some((h, c)) = &cache.ps_state {
                memory.extend_from_slice(row(h, *anchor));
                memory.extend_from_slice(row(c, *anchor));
            }
            for (dst, (h, c)) in core.iter_mut().zip(&cache.core_states) {
                dst.0.extend_from_slice(row(h, *anchor));
                dst.1.extend_from_slice(row(c, *anchor));
            }
        }
        let d_in = inputs.len() / (b * j);
        Ok(DecoderBatch {
            inputs: Tensor::new(vec![b, j, d_in], inputs)?,
            treat_in: Tensor::new(vec![b, j, k], treat_in)?,
            treat_next: Tensor::new(vec![b, j, k], treat_next)?,
            next_class,
            targets: Tensor::new(vec![b, j], targets)?,
            positions,
            phi: Tensor::new(vec![b, l, d_h], phi)?,
            anchors,
            ps_memory: if memory.is_empty() { None } else { Some(Tensor::new(vec![b, 2 * d_h], memory)?) },
            core_init: core
                .into_iter()
                .map(|(h, c)| Ok((Tensor::new(vec![b, d_h], h)?, Tensor::new(vec![b, d_h], c)?)))
                .collect::<Result<_>>()?,
        })
    }

    /// Teacher-forced training rows: at anchor `a`, step `j` predicts `y[a+j+2]`
    /// from the true lagged outcome `y[a+j]` and, in the previous-prediction slot,
    /// the encoder's `y_hat[a]` at `j = 0` and the true `y[a+j+1]` afterwards.
    pub fn teacher_forced(
        items: &[(&Sequence, &EncoderCache, usize)],
        norm: &Normalizer,
        k: usize,
        tau_max: usize,
    ) -> Result<Self> {
        let rows = items
            .iter()
            .map(|&(seq, cache, a)| {
                if a + tau_max + 1 >= seq.len() {
                    return Err(MsctError::Range(format!(
                        "anchor {a} with tau_max {tau_max} exceeds sequence length {}",
                        seq.len()
                    )));
                }
                let steps = (0..tau_max)
                    .map(|j| DecoderStep {
                        treat: seq.t[a + j + 1],
                        y_lag: norm.forward(seq.y[a + j]),
                        y_prev: if j == 0 { cache.y_hat[a] } else { norm.forward(seq.y[a + j + 1]) },
                        next_treat: seq.t[a + j + 2],
                        target: norm.forward(seq.y[a + j + 2]),
                    })
                    .collect();
                Ok((cache, seq.s.as_slice(), a, steps))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_steps(&rows, k)
    }

    pub fn batch(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.inputs.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub phi: Var,
    /// Normalized predictions `[B, J]`.
    pub y_hat: Var,
    pub ps_probs: Option<Var>,
    pub hps_probs: Option<Var>,
}

impl DecoderNet {
    pub(crate) fn new(cfg: &MsctConfig, reg: &mut Registrar) -> Result<Self> {
        let d_h = cfg.d_h;
        let input = reg.with(Group::R, |s, r| Ok(Linear::new(s, "dec.input", cfg.decoder_input_width(), d_h, true, r)))?;
        let (blocks, core) = reg.with(Group::R, |s, r| match cfg.backbone {
            Backbone::Transformer => {
                let blocks = (0..cfg.blocks)
                    .map(|l| DecoderBlock::new(s, &format!("dec.block{l}"), cfg.attention(), cfg.ff_width(), r))
                    .collect::<Result<Vec<_>>>()?;
                Ok((blocks, None))
            }
            Backbone::Lstm => Ok((Vec::new(), Some(RecurrentStack::Lstm(LstmStack::new(s, "dec.core", d_h, d_h, cfg.blocks, r))))),
            Backbone::Rnn => Ok((Vec::new(), Some(RecurrentStack::rnn(s, "dec.core", d_h, d_h, cfg.blocks, r)))),
        })?;
        let phi = reg.with(Group::R, |s, r| Ok(Linear::new(s, "dec.phi", d_h, d_h, true, r)))?;
        let y_head = reg.with(Group::Y, |s, r| Ok(Mlp::new(s, "dec.y_head", d_h + cfg.k, d_h, 1, r)))?;
        let (memory, ps_lstm, ps_head) = if cfg.ps_pathway {
            let memory = reg.with(Group::T, |s, r| Ok(Linear::new(s, "dec.memory", 2 * d_h, 2 * d_h * cfg.blocks, true, r)))?;
            let lstm = reg.with(Group::T, |s, r| Ok(LstmStack::new(s, "dec.ps_lstm", cfg.k, d_h, cfg.blocks, r)))?;
            let head = reg.with(Group::Ps, |s, r| Ok(Mlp::new(s, "dec.ps_head", d_h, d_h, cfg.k, r)))?;
            (Some(memory), Some(lstm), Some(head))
        } else {
            (None, None, None)
        };
        let hps_head = if cfg.hps_head {
            Some(reg.with(Group::Hps, |s, r| Ok(Mlp::new(s, "dec.hps_head", d_h, d_h, cfg.k, r)))?)
        } else {
            None
        };
        Ok(DecoderNet {
            input,
            blocks,
            core,
            phi,
            y_head,
            memory,
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
        batch: &DecoderBatch,
        hps: HpsInput,
        ctx: &mut ForwardCtx,
    ) -> Result<DecoderOutput> {
        let (b, j) = (batch.batch(), batch.steps());
        if batch.inputs.shape()[2] != self.input.d_in {
            return Err(MsctError::shape("decode", batch.inputs.shape(), &[b, j, self.input.d_in]));
        }
        let d_h = self.phi.d_in;
        let x = g.constant(batch.inputs.clone());
        let mut h = self.input.forward(g, store, x)?;
        if let Some(stack) = &self.core {
            if batch.core_init.len() != stack.depth() {
                return Err(MsctError::Usage("decoder needs the encoder's recurrent states".into()));
            }
            let init: Vec<(Var, Var)> = batch
                .core_init
                .iter()
                .map(|(hh, cc)| (g.constant(hh.clone()), g.constant(cc.clone())))
                .collect();
            let outs = stack.forward(g, store, h, Some(&init), ctx)?;
            h = outs.last().expect("depth >= 1").hidden;
        } else {
            let pe = positional_encoding_at(&batch.positions, d_h, self.pe_base).reshape(&[b, j, d_h])?;
            let pe = g.constant(pe);
            h = g.add(h, pe)?;
            h = ctx.apply_seq(g, h)?;
            let phi_enc = g.constant(batch.phi.clone());
            let mask = AttnMask::key_limit(&batch.anchors, j, batch.phi.shape()[1])?;
            for block in &self.blocks {
                h = block.forward(g, store, h, Some(phi_enc), Some(&mask), ctx)?;
            }
        }
        let phi = self.phi.forward(g, store, h)?;
        let phi = g.elu(phi)?;
        let next = g.constant(batch.treat_next.clone());
        let y_in = g.concat(&[phi, next], 2)?;
        let y_hat = self.y_head.forward(g, store, y_in)?;
        let y_hat = g.reshape(y_hat, &[b, j])?;
        let ps_probs = match (&self.memory, &self.ps_lstm, &self.ps_head) {
            (Some(memory), Some(lstm), Some(head)) => {
                let mem = batch
                    .ps_memory
                    .as_ref()
                    .ok_or_else(|| MsctError::Usage("decoder needs the encoder's memory states".into()))?;
                let mem = g.constant(mem.clone());
                let proj = memory.forward(g, store, mem)?;
                let init = (0..lstm.layers.len())
                    .map(|l| Ok((g.narrow(proj, 1, 2 * d_h * l, d_h)?, g.narrow(proj, 1, 2 * d_h * l + d_h, d_h)?)))
                    .collect::<Result<Vec<_>>>()?;
                let t = g.constant(batch.treat_in.clone());
                let outs = lstm.forward(g, store, t, Some(&init), ctx)?;
                let logits = head.forward(g, store, outs.last().expect("depth >= 1").hidden)?;
                Some(g.softmax(logits, None)?)
            }
            _ => None,
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
        Ok(DecoderOutput {
            phi,
            y_hat,
            ps_probs,
            hps_probs,
        })
    }
}
