//! The dual-pathway encoder/decoder network, its parameter groups, and
//! counterfactual rollout.

mod checkpoint;
mod data;
mod decoder;
mod encoder;
mod rollout;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MsctError, Result};
use crate::layers::{AttentionConfig, PeBase};
use crate::tensor::{ParamId, ParamStore};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use data::{sequences, EncoderBatch, Normalizer, Sequence, TreatmentField};
pub use decoder::{DecoderBatch, DecoderNet, DecoderOutput, DecoderStep};
pub use encoder::{EncoderCache, EncoderNet, EncoderOutput, HpsInput, SequenceCore};
pub use rollout::{CounterfactualPaths, RolloutRequest};

/// Sequence model used for the representation pathway.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Transformer,
    Lstm,
    Rnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsctConfig {
    pub d_h: usize,
    /// Per-head query/key width; 0 means `d_h`.
    pub d_a: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Feed-forward inner width; 0 means `4 * d_h`.
    pub d_ff: usize,
    pub tau_max: usize,
    pub k: usize,
    pub d_x: usize,
    pub d_s: usize,
    pub pe_base: PeBase,
    pub backbone: Backbone,
    /// LSTM treatment pathway with its propensity head.
    pub ps_pathway: bool,
    pub hps_head: bool,
    pub treatment_field: TreatmentField,
    /// Without a decoder, horizons past the first come from feeding one-step
    /// predictions back through the (recurrent) encoder.
    pub decoder: bool,
}

impl Default for MsctConfig {
    fn default() -> Self {
        MsctConfig {
            d_h: 32,
            d_a: 0,
            heads: 2,
            blocks: 1,
            d_ff: 0,
            tau_max: 5,
            k: 2,
            d_x: 1,
            d_s: 2,
            pe_base: PeBase::Thousand,
            backbone: Backbone::Transformer,
            ps_pathway: true,
            hps_head: true,
            treatment_field: TreatmentField::Binary,
            decoder: true,
        }
    }
}

impl MsctConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MsctError::Config(m.to_string()));
        if self.d_h == 0 || self.heads == 0 {
            return bad("d_h and heads must be >= 1");
        }
        if self.blocks < 1 {
            return bad("blocks must be >= 1");
        }
        if self.k < 2 {
            return bad("k must be >= 2");
        }
        if self.tau_max < 2 {
            return bad("tau_max must be >= 2");
        }
        if self.d_x == 0 {
            return bad("d_x must be >= 1");
        }
        if !self.decoder && self.backbone == Backbone::Transformer {
            return bad("a model without a decoder needs a recurrent backbone");
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_h: self.d_h,
            d_a: if self.d_a == 0 { self.d_h } else { self.d_a },
            heads: self.heads,
            causal: true,
        }
    }

    pub fn ff_width(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_h
        } else {
            self.d_ff
        }
    }

    pub fn encoder_input_width(&self) -> usize {
        self.d_x + self.k + 1 + self.d_s
    }

    pub fn decoder_input_width(&self) -> usize {
        self.k + 1 + self.d_s + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Decoder,
}

/// Named parameter groups driving the selective updates of training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Representation: input map, sequence blocks, representation map.
    R,
    /// Outcome head.
    Y,
    /// Treatment LSTM pathway (and, in the decoder, the memory projection).
    T,
    Ps,
    Hps,
}

pub const GROUPS: [Group; 5] = [Group::R, Group::Y, Group::T, Group::Ps, Group::Hps];

#[derive(Clone, Debug)]
pub struct MsctModel {
    pub cfg: MsctConfig,
    pub store: ParamStore,
    groups: Vec<(Stage, Group)>,
    pub encoder: EncoderNet,
    pub decoder: Option<DecoderNet>,
    pub norm: Normalizer,
}

/// Records the group of every parameter registered while `f` runs.
pub(crate) struct Registrar<'a> {
    pub store: &'a mut ParamStore,
    pub groups: &'a mut Vec<(Stage, Group)>,
    pub rng: &'a mut ChaCha8Rng,
    pub stage: Stage,
}

impl Registrar<'_> {
    pub fn with<T>(&mut self, group: Group, f: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<T>) -> Result<T> {
        let before = self.store.len();
        let out = f(self.store, self.rng)?;
        for _ in before..self.store.len() {
            self.groups.push((self.stage, group));
        }
        Ok(out)
    }
}

impl MsctModel {
    pub fn new(cfg: MsctConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut groups = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = {
            let mut reg = Registrar {
                store: &mut store,
                groups: &mut groups,
                rng: &mut rng,
                stage: Stage::Encoder,
            };
            EncoderNet::new(&cfg, &mut reg)?
        };
        let decoder = if !cfg.decoder {
            None
        } else {
            let mut reg = Registrar {
                store: &mut store,
                groups: &mut groups,
                rng: &mut rng,
                stage: Stage::Decoder,
            };
            Some(DecoderNet::new(&cfg, &mut reg)?)
        };
        debug_assert_eq!(groups.len(), store.len());
        Ok(MsctModel {
            cfg,
            store,
            groups,
            encoder,
            decoder,
            norm: Normalizer::default(),
        })
    }

    pub fn group_of(&self, id: ParamId) -> (Stage, Group) {
        self.groups[id.0]
    }

    pub fn params_in(&self, stage: Stage, groups: &[Group]) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| {
                let (s, g) = self.groups[id.0];
                s == stage && groups.contains(&g)
            })
            .collect()
    }

    /// Parameter count per (stage, group); groups without parameters are omitted.
    pub fn group_sizes(&self) -> BTreeMap<(Stage, Group), usize> {
        let mut out = BTreeMap::new();
        for id in self.store.ids() {
            *out.entry(self.groups[id.0]).or_insert(0) += self.store.get(id).len();
        }
        out
    }

    pub fn has_group(&self, stage: Stage, group: Group) -> bool {
        self.groups.contains(&(stage, group))
    }
}
