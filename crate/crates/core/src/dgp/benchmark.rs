use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_population, simulate_counterfactuals, sliding_strategies, unit_seed, DgpConfig, SimUnit};
use crate::error::{MsctError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 1000,
            val: 100,
            test: 100,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Per-step covariates: one value per step for the synthetic generator, a
/// feature row per step for ingested data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Covariates {
    Scalar(Vec<f64>),
    Vector(Vec<Vec<f64>>),
}

impl Covariates {
    pub fn len(&self) -> usize {
        match self {
            Covariates::Scalar(v) => v.len(),
            Covariates::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        match self {
            Covariates::Scalar(_) => 1,
            Covariates::Vector(v) => v.first().map_or(0, |r| r.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        match self {
            Covariates::Scalar(v) => std::slice::from_ref(&v[i]),
            Covariates::Vector(v) => &v[i],
        }
    }
}

/// One line of a split file. `cf` maps anchor -> strategy label -> outcomes
/// at horizons `1..=tau_max + 1`; it is empty for training units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub x: Covariates,
    pub t: Vec<u8>,
    pub t_type: Vec<u8>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub cf: BTreeMap<usize, BTreeMap<String, Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkMeta {
    pub dgp: DgpConfig,
    pub sizes: SplitSizes,
    pub threshold: f64,
    pub unit_seeds: BTreeMap<String, Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub meta: BenchmarkMeta,
    pub train: Vec<UnitRecord>,
    pub val: Vec<UnitRecord>,
    pub test: Vec<UnitRecord>,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

impl Benchmark {
    pub fn split(&self, name: &str) -> Option<&[UnitRecord]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn record(sim: &SimUnit, cfg: &DgpConfig, with_cf: bool) -> Result<UnitRecord> {
    let mut cf = BTreeMap::new();
    if with_cf {
        let strategies = sliding_strategies(cfg.tau_max);
        for anchor in 0..cfg.anchors() {
            let paths = simulate_counterfactuals(sim, anchor, &strategies, cfg)?;
            let by_label = strategies.iter().map(|s| s.label.clone()).zip(paths).collect();
            cf.insert(anchor, by_label);
        }
    }
    let u = &sim.unit;
    Ok(UnitRecord {
        x: Covariates::Scalar(u.x.clone()),
        t: u.t.clone(),
        t_type: u.t_type.clone(),
        y: u.y.clone(),
        s: u.s.clone(),
        cf,
    })
}

/// Generate all splits from one pooled population. Training units carry
/// factual data only; validation and test units carry every counterfactual
/// path of the sliding-treatment set at every anchor.
pub fn build_benchmark(cfg: &DgpConfig, sizes: SplitSizes) -> Result<Benchmark> {
    use rayon::prelude::*;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(MsctError::Config(format!("split sizes must be >= 1, got {sizes:?}")));
    }
    let (threshold, units) = generate_population(cfg, 0, sizes.total())?;
    let bounds = [(0, sizes.train), (sizes.train, sizes.val), (sizes.train + sizes.val, sizes.test)];
    let mut unit_seeds = BTreeMap::new();
    let mut splits = Vec::with_capacity(3);
    for (name, (first, count)) in SPLITS.iter().zip(bounds) {
        unit_seeds.insert(
            name.to_string(),
            (first..first + count).map(|i| unit_seed(cfg.seed, i as u64)).collect(),
        );
        let with_cf = *name != "train";
        let recs: Vec<UnitRecord> = units[first..first + count]
            .par_iter()
            .map(|u| record(u, cfg, with_cf))
            .collect::<Result<_>>()?;
        splits.push(recs);
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Benchmark {
        meta: BenchmarkMeta {
            dgp: cfg.clone(),
            sizes,
            threshold,
            unit_seeds,
        },
        train,
        val,
        test,
    })
}

pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MsctError::io(dir, e))?;
    let cfg_path = dir.join("config.json");
    let text = serde_json::to_string_pretty(&b.meta).map_err(|e| MsctError::json(&cfg_path, e))?;
    fs::write(&cfg_path, text + "\n").map_err(|e| MsctError::io(&cfg_path, e))?;
    for name in SPLITS {
        let path = dir.join(format!("{name}.jsonl"));
        let file = fs::File::create(&path).map_err(|e| MsctError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for rec in b.split(name).unwrap() {
            serde_json::to_writer(&mut w, rec).map_err(|e| MsctError::json(&path, e))?;
            w.write_all(b"\n").map_err(|e| MsctError::io(&path, e))?;
        }
        w.flush().map_err(|e| MsctError::io(&path, e))?;
    }
    Ok(())
}

pub fn load_records(path: &Path) -> Result<Vec<UnitRecord>> {
    let file = fs::File::open(path).map_err(|e| MsctError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| MsctError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| MsctError::json(path, e))?);
    }
    Ok(out)
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| MsctError::io(&cfg_path, e))?;
    let meta: BenchmarkMeta = serde_json::from_str(&text).map_err(|e| MsctError::json(&cfg_path, e))?;
    let mut splits: Vec<Vec<UnitRecord>> = SPLITS
        .iter()
        .map(|n| load_records(&dir.join(format!("{n}.jsonl"))))
        .collect::<Result<_>>()?;
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Benchmark { meta, train, val, test })
}
