//! Purely predictive recurrent forecasters: a one-step LSTM or Elman network
//! trained on the outcome loss alone and rolled out by feeding its own
//! predictions back. They are built from the MSCT encoder with a recurrent
//! core and no decoder, propensity pathway or HPS head, so they share data
//! handling and checkpoints with the main model.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Backbone, MsctConfig, MsctModel, Sequence};
use crate::training::{train_msct, Balancing, TrainConfig, TrainReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecurrentArch {
    Rnn,
    Lstm,
}

impl RecurrentArch {
    pub fn label(self) -> &'static str {
        match self {
            RecurrentArch::Rnn => "rnn",
            RecurrentArch::Lstm => "lstm",
        }
    }
}

pub fn forecaster_config(arch: RecurrentArch, base: &MsctConfig) -> MsctConfig {
    MsctConfig {
        backbone: match arch {
            RecurrentArch::Rnn => Backbone::Rnn,
            RecurrentArch::Lstm => Backbone::Lstm,
        },
        ps_pathway: false,
        hps_head: false,
        decoder: false,
        ..base.clone()
    }
}

pub fn forecaster_train_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        balancing: Balancing::Off,
        ps_loss: false,
        ..base.clone()
    }
}

pub fn train_forecaster(
    arch: RecurrentArch,
    base: &MsctConfig,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &TrainConfig,
) -> Result<(MsctModel, TrainReport)> {
    let mut model = MsctModel::new(forecaster_config(arch, base), cfg.seed)?;
    let report = train_msct(&mut model, train, val, &forecaster_train_config(cfg))?;
    Ok((model, report))
}
