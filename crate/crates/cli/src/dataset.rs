use std::fs;
use std::path::Path;

use msct_core::dgp::{load_records, UnitRecord, SPLITS};
use msct_core::eval::sha256_hex;
use msct_core::ingest::{CRASH_CLASSES, INGEST_META};
use msct_core::model::TreatmentField;
use msct_core::{MsctError, Result};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Real,
}

pub struct Dataset {
    pub kind: DatasetKind,
    /// Digest of the dataset's metadata file.
    pub hash: String,
    pub train: Vec<UnitRecord>,
    pub val: Vec<UnitRecord>,
    pub test: Vec<UnitRecord>,
}

/// A directory holding `config.json` is a synthetic benchmark; one holding
/// `ingest.json` came from `msct ingest`.
pub fn load(dir: &Path) -> Result<Dataset> {
    let (kind, meta) = if dir.join("config.json").is_file() {
        (DatasetKind::Synthetic, dir.join("config.json"))
    } else if dir.join(INGEST_META).is_file() {
        (DatasetKind::Real, dir.join(INGEST_META))
    } else {
        return Err(MsctError::Data(format!(
            "{} holds neither config.json nor {INGEST_META}",
            dir.display()
        )));
    };
    let bytes = fs::read(&meta).map_err(|e| MsctError::io(&meta, e))?;
    let mut splits = SPLITS
        .iter()
        .map(|n| load_records(&dir.join(format!("{n}.jsonl"))))
        .collect::<Result<Vec<_>>>()?;
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        kind,
        hash: sha256_hex(&bytes),
        train,
        val,
        test,
    })
}

/// Aligns the model and evaluation sections with what the data holds. Real
/// data carries typed crashes and no counterfactual paths.
pub fn adapt(cfg: &mut RunConfig, ds: &Dataset) {
    if let Some(r) = ds.train.first() {
        cfg.model.d_x = r.x.width();
        cfg.model.d_s = r.s.len();
    }
    if ds.kind == DatasetKind::Real {
        cfg.model.k = CRASH_CLASSES;
        cfg.model.treatment_field = TreatmentField::Typed;
        cfg.eval.factual_only = true;
    }
}
