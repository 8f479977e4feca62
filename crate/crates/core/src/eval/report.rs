use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate::Evaluation;
use super::metrics::mean_std;
use crate::error::{MsctError, Result};

/// One model at one sweep point, aggregated over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub axis_value: Option<f64>,
    /// SHA-256 of the dataset configuration behind this row, one per seed.
    pub dataset_hashes: Vec<String>,
    pub seeds: Vec<u64>,
    pub rmse: Vec<Option<f64>>,
    pub rmse_std: Vec<Option<f64>>,
    pub crmse: Vec<Option<f64>>,
    pub crmse_std: Vec<Option<f64>>,
    pub per_seed: Vec<Evaluation>,
}

impl ReportRow {
    pub fn aggregate(model: &str, axis_value: Option<f64>, seeds: Vec<u64>, dataset_hashes: Vec<String>, per_seed: Vec<Evaluation>) -> Result<Self> {
        if per_seed.is_empty() || per_seed.len() != seeds.len() {
            return Err(MsctError::Usage(format!("{} evaluations for {} seeds", per_seed.len(), seeds.len())));
        }
        let fold = |pick: &dyn Fn(&Evaluation) -> &Vec<Option<f64>>| {
            let width = per_seed.iter().map(|e| pick(e).len()).max().unwrap_or(0);
            let stats: Vec<_> = (0..width)
                .map(|h| {
                    let vals: Vec<Option<f64>> = per_seed.iter().map(|e| pick(e).get(h).copied().flatten()).collect();
                    mean_std(&vals)
                })
                .collect();
            (stats.iter().map(|s| s.0).collect::<Vec<_>>(), stats.iter().map(|s| s.1).collect::<Vec<_>>())
        };
        let (rmse, rmse_std) = fold(&|e| &e.rmse);
        let (crmse, crmse_std) = fold(&|e| &e.crmse);
        Ok(ReportRow {
            model: model.to_string(),
            axis_value,
            dataset_hashes,
            seeds,
            rmse,
            rmse_std,
            crmse,
            crmse_std,
            per_seed,
        })
    }

    /// Mean over seeds of the share of anchors where a crash lowers the
    /// horizon-1 prediction.
    pub fn crash_below_zero(&self) -> Option<f64> {
        mean_std(&self.per_seed.iter().map(|e| e.crash_below_zero).collect::<Vec<_>>()).0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub axis: Option<String>,
    pub config_hash: String,
    /// How strategies are weighted in pooled RMSE.
    pub strategy_weighting: String,
    pub factual_only: bool,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<Option<f64>>,
    pub y_std: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<PlotSeries>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| MsctError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| MsctError::io(path, e))
}

impl ExperimentReport {
    pub fn models(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.model.as_str()) {
                out.push(&r.model);
            }
        }
        out
    }

    pub fn row(&self, model: &str, axis_value: Option<f64>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.axis_value == axis_value)
    }

    /// One line per model x sweep point x horizon; absent cells read `NA`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| MsctError::Data(format!("csv: {e}"));
        w.write_record(["experiment", "model", "axis_value", "horizon", "rmse", "rmse_std", "crmse", "crmse_std", "seeds"])
            .map_err(err)?;
        for r in &self.rows {
            let seeds = r.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";");
            for h in 0..r.rmse.len() {
                w.write_record([
                    self.experiment.clone(),
                    r.model.clone(),
                    cell(r.axis_value),
                    (h + 1).to_string(),
                    cell(r.rmse[h]),
                    cell(r.rmse_std[h]),
                    cell(r.crmse.get(h).copied().flatten()),
                    cell(r.crmse_std.get(h).copied().flatten()),
                    seeds.clone(),
                ])
                .map_err(err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| MsctError::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| MsctError::Data(e.to_string()))
    }

    /// One row per model (and axis value), one mean and std column pair per horizon.
    /// `crmse` selects the effect metric instead of the factual one.
    pub fn wide_table(&self, crmse: bool) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| MsctError::Data(format!("csv: {e}"));
        let width = self
            .rows
            .iter()
            .map(|r| if crmse { r.crmse.len() } else { r.rmse.len() })
            .max()
            .unwrap_or(0);
        let mut header = vec!["model".to_string(), "axis_value".to_string()];
        for h in 1..=width {
            header.push(format!("h{h}"));
            header.push(format!("h{h}_std"));
        }
        w.write_record(&header).map_err(err)?;
        for r in &self.rows {
            let (mean, std) = if crmse { (&r.crmse, &r.crmse_std) } else { (&r.rmse, &r.rmse_std) };
            let mut rec = vec![r.model.clone(), cell(r.axis_value)];
            for h in 0..width {
                rec.push(cell(mean.get(h).copied().flatten()));
                rec.push(cell(std.get(h).copied().flatten()));
            }
            w.write_record(&rec).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| MsctError::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| MsctError::Data(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| MsctError::json("<report>", e))
    }

    /// RMSE at `horizon` against the sweep axis, one series per model.
    pub fn sweep_series(&self, horizon: usize) -> PlotData {
        let series = self
            .models()
            .into_iter()
            .map(|m| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.model == m).collect();
                PlotSeries {
                    label: m.to_string(),
                    x: rows.iter().map(|r| r.axis_value.unwrap_or(f64::NAN)).collect(),
                    y: rows.iter().map(|r| r.rmse.get(horizon - 1).copied().flatten()).collect(),
                    y_std: rows.iter().map(|r| r.rmse_std.get(horizon - 1).copied().flatten()).collect(),
                }
            })
            .collect();
        PlotData {
            x_label: self.axis.clone().unwrap_or_else(|| "point".into()),
            y_label: format!("rmse_tau{horizon}"),
            series,
        }
    }

    /// RMSE against horizon, one series per row.
    pub fn horizon_series(&self) -> PlotData {
        let series = self
            .rows
            .iter()
            .map(|r| PlotSeries {
                label: match r.axis_value {
                    Some(v) => format!("{} @ {v}", r.model),
                    None => r.model.clone(),
                },
                x: (1..=r.rmse.len()).map(|h| h as f64).collect(),
                y: r.rmse.clone(),
                y_std: r.rmse_std.clone(),
            })
            .collect();
        PlotData {
            x_label: "horizon".into(),
            y_label: "rmse".into(),
            series,
        }
    }

    /// Mean predicted speed path per strategy for every row, averaged over
    /// seeds, alongside the true mean paths.
    pub fn effect_series(&self) -> PlotData {
        let mut series = Vec::new();
        for r in &self.rows {
            let tag = match r.axis_value {
                Some(v) => format!("{} @ {v}", r.model),
                None => r.model.clone(),
            };
            let first = &r.per_seed[0];
            for (kind, map_of) in [("pred", 0), ("true", 1)] {
                let labels = if map_of == 0 { &first.mean_pred } else { &first.mean_true };
                for label in labels.keys() {
                    let paths: Vec<&Vec<f64>> = r
                        .per_seed
                        .iter()
                        .filter_map(|e| if map_of == 0 { e.mean_pred.get(label) } else { e.mean_true.get(label) })
                        .collect();
                    let len = paths[0].len();
                    let stats: Vec<_> = (0..len)
                        .map(|h| mean_std(&paths.iter().map(|p| p.get(h).copied()).collect::<Vec<_>>()))
                        .collect();
                    series.push(PlotSeries {
                        label: format!("{tag} {kind} {label}"),
                        x: (1..=len).map(|h| h as f64).collect(),
                        y: stats.iter().map(|s| s.0).collect(),
                        y_std: stats.iter().map(|s| s.1).collect(),
                    });
                }
            }
        }
        PlotData {
            x_label: "horizon".into(),
            y_label: "speed".into(),
            series,
        }
    }

    /// Writes `<stem>.csv`, `<stem>.json` and `<stem>_plot.json` into `dir`.
    /// Sweeps plot RMSE at `plot_horizon` against the axis; other experiments
    /// plot RMSE against horizon. Effect curves go to `<stem>_effects.json`
    /// when any row has counterfactual paths.
    pub fn write(&self, dir: &Path, stem: &str, plot_horizon: usize) -> Result<()> {
        write_text(&dir.join(format!("{stem}.csv")), &self.to_csv()?)?;
        write_text(&dir.join(format!("{stem}.json")), &self.to_json()?)?;
        write_text(&dir.join(format!("{stem}_rmse_table.csv")), &self.wide_table(false)?)?;
        write_text(&dir.join(format!("{stem}_crmse_table.csv")), &self.wide_table(true)?)?;
        let plot = if self.axis.is_some() {
            self.sweep_series(plot_horizon)
        } else {
            self.horizon_series()
        };
        let json = |p: &PlotData| {
            serde_json::to_string_pretty(p)
                .map(|s| s + "\n")
                .map_err(|e| MsctError::json("<plot>", e))
        };
        write_text(&dir.join(format!("{stem}_plot.json")), &json(&plot)?)?;
        if self.rows.iter().any(|r| !r.per_seed[0].mean_pred.is_empty()) {
            write_text(&dir.join(format!("{stem}_effects.json")), &json(&self.effect_series())?)?;
        }
        Ok(())
    }
}
