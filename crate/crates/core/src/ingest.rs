//! Loop-detector CSV to the unit-record format used by the synthetic benchmark.
//!
//! Each row is one (milepost, direction, 5-minute bin). Rows are grouped by
//! location, cut into fixed-length windows, split chronologically, and the
//! covariates are standardized with training-split statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::dgp::{Covariates, UnitRecord, SPLITS};
use crate::error::{MsctError, Result};

pub const TIMESTAMP: &str = "timestamp";
pub const MILEPOST: &str = "milepost";
pub const DIRECTION: &str = "direction";
pub const SPEED: &str = "speed";
pub const CRASH_TYPE: &str = "crash_type";

/// Time-varying covariates, in feature order.
pub const COVARIATE_COLUMNS: [&str; 14] = [
    "occupancy",
    "volume",
    "congestion_index",
    "max_lane_speed_diff",
    "up1_speed",
    "up1_congestion",
    "up2_speed",
    "up2_congestion",
    "down1_speed",
    "down1_congestion",
    "down2_speed",
    "down2_congestion",
    "day_of_week",
    "weather",
];

/// Crash types: 0 none, 1 object, 2 sideswipe, 3 rear-end.
pub const CRASH_CLASSES: usize = 4;

const BIN_SECONDS: i64 = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    pub window: usize,
    pub stride: usize,
    /// Chronological train and validation shares of windows; the rest is test.
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            window: 60,
            stride: 12,
            train_frac: 0.8,
            val_frac: 0.1,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.stride == 0 {
            return Err(MsctError::Config("ingest window must be >= 2 and stride >= 1".into()));
        }
        if !(self.train_frac > 0.0 && self.val_frac >= 0.0 && self.train_frac + self.val_frac <= 1.0) {
            return Err(MsctError::Config("ingest split fractions must satisfy 0 < train, 0 <= val, train + val <= 1".into()));
        }
        Ok(())
    }
}

/// One parsed CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct RealDataRecord {
    pub timestamp: NaiveDateTime,
    pub milepost: f64,
    pub direction: String,
    pub speed: f64,
    pub crash_type: u8,
    pub covariates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub columns: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestMeta {
    pub config: IngestConfig,
    pub rows: usize,
    pub locations: usize,
    pub windows: BTreeMap<String, usize>,
    /// Windows dropped because they span a missing 5-minute bin.
    pub skipped_windows: usize,
    pub stats: FeatureStats,
    /// Static features per unit: standardized milepost, then 1 for the
    /// first direction label in sort order and 0 otherwise.
    pub directions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestedDataset {
    pub meta: IngestMeta,
    pub train: Vec<UnitRecord>,
    pub val: Vec<UnitRecord>,
    pub test: Vec<UnitRecord>,
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

/// Parses CSV text. Errors name the missing column or the 1-based data row.
pub fn parse_csv(text: &str) -> Result<Vec<RealDataRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| MsctError::Data(format!("csv header: {e}")))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MsctError::Data(format!("missing column `{name}`")))
    };
    let (ts, mp, dir, sp, ct) = (col(TIMESTAMP)?, col(MILEPOST)?, col(DIRECTION)?, col(SPEED)?, col(CRASH_TYPE)?);
    let cov: Vec<usize> = COVARIATE_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| MsctError::Data(format!("row {line}: {e}")))?;
        let num = |j: usize, name: &str| -> Result<f64> {
            row.get(j)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| MsctError::Data(format!("row {line}: cannot parse `{name}`")))
        };
        let timestamp = row
            .get(ts)
            .and_then(parse_time)
            .ok_or_else(|| MsctError::Data(format!("row {line}: cannot parse `{TIMESTAMP}`")))?;
        if timestamp.minute() % 5 != 0 || timestamp.second() != 0 {
            return Err(MsctError::Data(format!("row {line}: timestamp {timestamp} is not on a 5-minute bin")));
        }
        let crash = num(ct, CRASH_TYPE)?;
        if crash.fract() != 0.0 || !(0.0..CRASH_CLASSES as f64).contains(&crash) {
            return Err(MsctError::Data(format!("row {line}: crash_type {crash} outside 0..=3")));
        }
        let covariates = cov
            .iter()
            .zip(COVARIATE_COLUMNS)
            .map(|(&j, name)| num(j, name))
            .collect::<Result<Vec<_>>>()?;
        let ci = covariates[2];
        if ci <= 0.0 {
            return Err(MsctError::Data(format!("row {line}: congestion_index must be > 0")));
        }
        if ci > 1.5 {
            log::warn!("row {line}: congestion_index {ci} above 1.5");
        }
        out.push(RealDataRecord {
            timestamp,
            milepost: num(mp, MILEPOST)?,
            direction: row.get(dir).unwrap_or_default().to_string(),
            speed: num(sp, SPEED)?,
            crash_type: crash as u8,
            covariates,
        });
    }
    Ok(out)
}

struct Window<'a> {
    start: NaiveDateTime,
    location: (String, String),
    rows: Vec<&'a RealDataRecord>,
}

/// Windows every location, splits by window start time and standardizes.
pub fn build_dataset(records: &[RealDataRecord], cfg: &IngestConfig) -> Result<IngestedDataset> {
    cfg.validate()?;
    let mut by_loc: BTreeMap<(String, String), Vec<&RealDataRecord>> = BTreeMap::new();
    for r in records {
        // milepost as text keeps the map ordered without float keys
        by_loc.entry((format!("{:012.3}", r.milepost), r.direction.clone())).or_default().push(r);
    }
    let directions: Vec<String> = {
        let mut d: Vec<String> = records.iter().map(|r| r.direction.clone()).collect();
        d.sort();
        d.dedup();
        d
    };
    let mut windows = Vec::new();
    let mut skipped = 0;
    for (loc, rows) in &mut by_loc {
        rows.sort_by_key(|r| r.timestamp);
        if let Some(w) = rows.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(MsctError::Data(format!(
                "duplicate bin {} at milepost {} direction {}",
                w[0].timestamp, w[0].milepost, w[0].direction
            )));
        }
        let mut start = 0;
        while start + cfg.window <= rows.len() {
            let win = &rows[start..start + cfg.window];
            let contiguous = win
                .windows(2)
                .all(|p| (p[1].timestamp - p[0].timestamp).num_seconds() == BIN_SECONDS);
            if contiguous {
                windows.push(Window {
                    start: win[0].timestamp,
                    location: loc.clone(),
                    rows: win.to_vec(),
                });
            } else {
                skipped += 1;
            }
            start += cfg.stride;
        }
    }
    windows.sort_by(|a, b| (a.start, &a.location).cmp(&(b.start, &b.location)));
    let n = windows.len();
    let n_train = (cfg.train_frac * n as f64).round() as usize;
    let n_val = ((cfg.val_frac * n as f64).round() as usize).min(n - n_train);
    if n_train == 0 {
        return Err(MsctError::Data(format!("only {n} complete windows; the training split is empty")));
    }

    let d = COVARIATE_COLUMNS.len();
    let train_rows: Vec<&RealDataRecord> = windows[..n_train].iter().flat_map(|w| w.rows.iter().copied()).collect();
    let moments = |vals: &dyn Fn(&RealDataRecord) -> f64| {
        let m = train_rows.iter().map(|r| vals(r)).sum::<f64>() / train_rows.len() as f64;
        let v = train_rows.iter().map(|r| (vals(r) - m).powi(2)).sum::<f64>() / train_rows.len() as f64;
        (m, if v > 1e-24 { v.sqrt() } else { 1.0 })
    };
    let (mean, std): (Vec<f64>, Vec<f64>) = (0..d).map(|j| moments(&|r| r.covariates[j])).unzip();
    let (mp_mean, mp_std) = moments(&|r| r.milepost);

    let to_record = |w: &Window| UnitRecord {
        x: Covariates::Vector(
            w.rows
                .iter()
                .map(|r| (0..d).map(|j| (r.covariates[j] - mean[j]) / std[j]).collect())
                .collect(),
        ),
        t: w.rows.iter().map(|r| (r.crash_type != 0) as u8).collect(),
        t_type: w.rows.iter().map(|r| r.crash_type).collect(),
        y: w.rows.iter().map(|r| r.speed).collect(),
        s: vec![
            (w.rows[0].milepost - mp_mean) / mp_std,
            (Some(&w.location.1) == directions.first()) as u8 as f64,
        ],
        cf: BTreeMap::new(),
    };
    let train: Vec<UnitRecord> = windows[..n_train].iter().map(to_record).collect();
    let val: Vec<UnitRecord> = windows[n_train..n_train + n_val].iter().map(to_record).collect();
    let test: Vec<UnitRecord> = windows[n_train + n_val..].iter().map(to_record).collect();
    let mut stats_cols: Vec<String> = COVARIATE_COLUMNS.iter().map(|s| s.to_string()).collect();
    stats_cols.push(MILEPOST.into());
    let mut all_mean = mean.clone();
    all_mean.push(mp_mean);
    let mut all_std = std.clone();
    all_std.push(mp_std);
    Ok(IngestedDataset {
        meta: IngestMeta {
            config: cfg.clone(),
            rows: records.len(),
            locations: by_loc.len(),
            windows: [("train", train.len()), ("val", val.len()), ("test", test.len())]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            skipped_windows: skipped,
            stats: FeatureStats {
                columns: stats_cols,
                mean: all_mean,
                std: all_std,
            },
            directions,
        },
        train,
        val,
        test,
    })
}

pub const INGEST_META: &str = "ingest.json";

/// Writes `ingest.json` and one JSON-lines file per split.
pub fn save_ingested(ds: &IngestedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| MsctError::io(dir, e))?;
    let path = dir.join(INGEST_META);
    let text = serde_json::to_string_pretty(&ds.meta).map_err(|e| MsctError::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| MsctError::io(&path, e))?;
    for (name, recs) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        let path = dir.join(format!("{name}.jsonl"));
        let mut out = String::new();
        for r in recs {
            out.push_str(&serde_json::to_string(r).map_err(|e| MsctError::json(&path, e))?);
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| MsctError::io(&path, e))?;
    }
    Ok(())
}

pub fn ingest_file(csv_path: &Path, cfg: &IngestConfig) -> Result<IngestedDataset> {
    let text = fs::read_to_string(csv_path).map_err(|e| MsctError::io(csv_path, e))?;
    build_dataset(&parse_csv(&text)?, cfg)
}
