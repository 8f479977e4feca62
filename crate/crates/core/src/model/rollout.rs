use super::data::{one_hot, EncoderBatch, Sequence};
use super::decoder::{DecoderBatch, DecoderStep};
use super::encoder::{row, EncoderCache, HpsInput};
use super::MsctModel;
use crate::dgp::InterventionStrategy;
use crate::error::{MsctError, Result};
use crate::layers::ForwardCtx;
use crate::tensor::{Graph, Tensor};

const ENCODE_CHUNK: usize = 64;
const ROLLOUT_CHUNK: usize = 256;

/// Predicted speeds for each strategy (rows) at horizons `1..=len + 1` (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualPaths {
    pub labels: Vec<String>,
    pub paths: Vec<Vec<f64>>,
}

/// One rollout: a unit, the anchor it is cut at, and the treatments applied at
/// the following steps. The step after the last treatment is left untreated.
#[derive(Clone, Copy, Debug)]
pub struct RolloutRequest<'a> {
    pub seq: &'a Sequence,
    pub cache: &'a EncoderCache,
    pub anchor: usize,
    pub treatments: &'a [u8],
}

impl MsctModel {
    /// Eval-mode encoder caches for every sequence.
    pub fn encode_all(&self, seqs: &[&Sequence]) -> Result<Vec<EncoderCache>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(ENCODE_CHUNK) {
            let batch = EncoderBatch::build(chunk, &self.norm, self.cfg.k)?;
            out.extend(self.encoder.cache(&self.store, &batch)?);
        }
        Ok(out)
    }

    /// Autoregressive multi-step predictions in original units, one row per request.
    pub fn rollout(&self, requests: &[RolloutRequest]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(ROLLOUT_CHUNK) {
            let m = chunk[0].treatments.len();
            if chunk.iter().any(|r| r.treatments.len() != m) {
                return Err(MsctError::Usage("strategies must share one horizon".into()));
            }
            for (i, z) in self.rollout_chunk(chunk)?.into_iter().enumerate() {
                debug_assert_eq!(z.len(), chunk[i].treatments.len() + 1);
                out.push(z.into_iter().map(|v| self.norm.inverse(v)).collect());
            }
        }
        Ok(out)
    }

    fn rollout_chunk(&self, reqs: &[RolloutRequest]) -> Result<Vec<Vec<f64>>> {
        let (k, d_h) = (self.cfg.k, self.cfg.d_h);
        let m = reqs[0].treatments.len();
        if m > self.cfg.tau_max {
            return Err(MsctError::Range(format!("strategy length {m} exceeds tau_max {}", self.cfg.tau_max)));
        }
        let classes: Vec<Vec<usize>> = reqs
            .iter()
            .map(|r| {
                let mut w: Vec<usize> = r.treatments.iter().map(|&c| c as usize).collect();
                w.push(0);
                if let Some(&bad) = w.iter().find(|&&c| c >= k) {
                    return Err(MsctError::Data(format!("treatment class {bad} outside 0..{k}")));
                }
                if r.anchor >= r.cache.len() || r.anchor >= r.seq.len() {
                    return Err(MsctError::Range(format!("anchor {} outside the sequence", r.anchor)));
                }
                Ok(w)
            })
            .collect::<Result<_>>()?;

        // Horizon 1 comes from the encoder's outcome head under the first intervention.
        let mut heads_in = Vec::with_capacity(reqs.len() * (d_h + k));
        for (r, w) in reqs.iter().zip(&classes) {
            heads_in.extend_from_slice(row(&r.cache.phi, r.anchor));
            one_hot(&mut heads_in, w[0], k);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![reqs.len(), d_h + k], heads_in)?);
        let y1 = self.encoder.y_head.forward(&mut g, &self.store, x)?;
        let mut preds: Vec<Vec<f64>> = g.value(y1).data().iter().map(|&v| vec![v]).collect();

        let Some(decoder) = &self.decoder else {
            self.recurse(reqs, &classes, &mut preds)?;
            return Ok(preds);
        };
        for j in 0..m {
            let rows: Vec<_> = reqs
                .iter()
                .zip(&classes)
                .zip(&preds)
                .map(|((r, w), p)| {
                    let steps = (0..=j)
                        .map(|i| DecoderStep {
                            treat: w[i],
                            y_lag: if i == 0 { self.norm.forward(r.seq.y[r.anchor]) } else { p[i - 1] },
                            y_prev: p[i],
                            next_treat: w[i + 1],
                            target: 0.0,
                        })
                        .collect();
                    (r.cache, r.seq.s.as_slice(), r.anchor, steps)
                })
                .collect();
            let batch = DecoderBatch::from_steps(&rows, k)?;
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval();
            let out = decoder.forward(&mut g, &self.store, &batch, HpsInput::Plain, &mut ctx)?;
            let y = g.value(out.y_hat);
            for (b, p) in preds.iter_mut().enumerate() {
                p.push(y.data()[b * (j + 1) + j]);
            }
        }
        Ok(preds)
    }

    /// Decoder-free continuation: each prediction is fed back as the next
    /// observed speed, covariates are held at their last value, and the
    /// recurrent state carries on from the anchor.
    fn recurse(&self, reqs: &[RolloutRequest], classes: &[Vec<usize>], preds: &mut [Vec<f64>]) -> Result<()> {
        let (k, d_h, b) = (self.cfg.k, self.cfg.d_h, reqs.len());
        let depth = reqs[0].cache.core_states.len();
        let mut states: Vec<(Tensor, Tensor)> = (0..depth)
            .map(|l| {
                let mut h = Vec::with_capacity(b * d_h);
                let mut c = Vec::with_capacity(b * d_h);
                for r in reqs {
                    let (hs, cs) = &r.cache.core_states[l];
                    h.extend_from_slice(row(hs, r.anchor));
                    c.extend_from_slice(row(cs, r.anchor));
                }
                Ok((Tensor::new(vec![b, d_h], h)?, Tensor::new(vec![b, d_h], c)?))
            })
            .collect::<Result<_>>()?;
        for j in 1..classes[0].len() {
            let mut inputs = Vec::new();
            let mut next = Vec::with_capacity(b * k);
            for ((r, w), p) in reqs.iter().zip(classes).zip(preds.iter()) {
                inputs.extend_from_slice(r.seq.x_row(r.anchor + 1));
                one_hot(&mut inputs, w[j - 1], k);
                inputs.push(p[j - 1]);
                inputs.extend_from_slice(&r.seq.s);
                one_hot(&mut next, w[j], k);
            }
            let width = inputs.len() / b;
            let (y, advanced) = self.encoder.step(
                &self.store,
                Tensor::new(vec![b, 1, width], inputs)?,
                &states,
                Tensor::new(vec![b, k], next)?,
            )?;
            for (p, v) in preds.iter_mut().zip(y) {
                p.push(v);
            }
            states = advanced;
        }
        Ok(())
    }

    /// Outcome matrix (strategy x horizon) for one unit cut at `anchor`.
    pub fn predict_counterfactual(
        &self,
        seq: &Sequence,
        anchor: usize,
        strategies: &[InterventionStrategy],
    ) -> Result<CounterfactualPaths> {
        let cache = self.encode_all(&[seq])?.remove(0);
        let reqs: Vec<RolloutRequest> = strategies
            .iter()
            .map(|s| RolloutRequest {
                seq,
                cache: &cache,
                anchor,
                treatments: &s.treatments,
            })
            .collect();
        Ok(CounterfactualPaths {
            labels: strategies.iter().map(|s| s.label.clone()).collect(),
            paths: self.rollout(&reqs)?,
        })
    }
}
