use msct_core::dgp::{build_benchmark, Benchmark, DgpConfig, SplitSizes, UnitRecord};
use msct_core::eval::*;
use msct_core::model::{sequences, MsctConfig, MsctModel, Sequence, TreatmentField};
use msct_core::training::TrainConfig;
use proptest::prelude::*;

fn paths(max_len: usize) -> impl Strategy<Value = Vec<(Vec<f64>, Vec<f64>)>> {
    prop::collection::vec(
        (1..=max_len).prop_flat_map(|n| (prop::collection::vec(-50.0..50.0f64, n), prop::collection::vec(-50.0..50.0f64, n))),
        1..12,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_matches_loop_oracle(pairs in paths(6)) {
        let preds: Vec<Vec<f64>> = pairs.iter().map(|p| p.0.clone()).collect();
        let truths: Vec<Vec<f64>> = pairs.iter().map(|p| p.1.clone()).collect();
        let got = rmse_per_horizon(&preds, &truths, 6).unwrap();
        for h in 0..6 {
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..preds.len() {
                if h < preds[i].len() {
                    let d = preds[i][h] - truths[i][h];
                    sum += d * d;
                    count += 1;
                }
            }
            match got[h] {
                None => prop_assert_eq!(count, 0),
                Some(v) => prop_assert!((v - (sum / count as f64).sqrt()).abs() <= 1e-12 * v.max(1.0)),
            }
        }
    }

    #[test]
    fn crmse_matches_loop_oracle(
        rows in prop::collection::vec((prop::collection::vec(-80.0..80.0f64, 20), any::<u8>()), 1..10)
    ) {
        let records: Vec<EffectRecord> = rows
            .iter()
            .map(|(v, mask)| EffectRecord {
                true_crash: (mask & 1 == 0).then(|| v[0..5].to_vec()),
                true_zero: (mask & 2 == 0).then(|| v[5..10].to_vec()),
                pred_crash: Some(v[10..15].to_vec()),
                pred_zero: Some(v[15..20].to_vec()),
            })
            .collect();
        let got = crmse(&records, 5).unwrap();
        let mut used = 0;
        for h in 0..5 {
            let mut sum = 0.0;
            let mut n = 0;
            for (v, mask) in &rows {
                if mask & 3 != 0 {
                    continue;
                }
                let e = (v[h] - v[5 + h]) - (v[10 + h] - v[15 + h]);
                sum += e * e;
                n += 1;
            }
            used = n;
            match got.per_horizon[h] {
                None => prop_assert_eq!(n, 0),
                Some(c) => prop_assert!((c - (sum / n as f64).sqrt()).abs() <= 1e-12 * c.max(1.0)),
            }
        }
        prop_assert_eq!(got.used, used);
        prop_assert_eq!(got.used + got.skipped, rows.len());
    }
}

#[test]
fn rmse_worked_examples() {
    let perfect = rmse_per_horizon(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]], 2).unwrap();
    assert_eq!(perfect, vec![Some(0.0), Some(0.0)]);
    assert_eq!(rmse_per_horizon(&[vec![12.0]], &[vec![10.0]], 1).unwrap(), vec![Some(2.0)]);
    // horizon 3 has no samples: absent, not zero
    assert_eq!(rmse_per_horizon(&[vec![12.0]], &[vec![10.0]], 3).unwrap(), vec![Some(2.0), None, None]);
    assert!(rmse_per_horizon(&[vec![1.0, 2.0]], &[vec![1.0]], 2).is_err());
    assert!(rmse_per_horizon(&[vec![1.0]], &[], 1).is_err());
}

#[test]
fn crmse_worked_examples() {
    let rec = |tc: f64, tz: f64, pc: f64, pz: f64| EffectRecord {
        true_crash: Some(vec![tc]),
        true_zero: Some(vec![tz]),
        pred_crash: Some(vec![pc]),
        pred_zero: Some(vec![pz]),
    };
    // true effect -10, predicted -9
    let one = crmse(&[rec(50.0, 60.0, 51.0, 60.0)], 1).unwrap();
    assert!((one.per_horizon[0].unwrap() - 1.0).abs() < 1e-12);
    let exact = crmse(&[rec(50.0, 60.0, 40.0, 50.0)], 1).unwrap();
    assert_eq!(exact.per_horizon[0], Some(0.0));
    // errors +1 and -1
    let anti = crmse(&[rec(50.0, 60.0, 51.0, 60.0), rec(50.0, 60.0, 49.0, 60.0)], 1).unwrap();
    assert!((anti.per_horizon[0].unwrap() - 1.0).abs() < 1e-12);

    let mut missing = rec(1.0, 2.0, 3.0, 4.0);
    missing.pred_zero = None;
    let c = crmse(&[missing, rec(50.0, 60.0, 51.0, 60.0)], 1).unwrap();
    assert_eq!((c.used, c.skipped), (1, 1));
    assert!((c.coverage() - 0.5).abs() < 1e-12);
}

fn tau3() -> MsctConfig {
    MsctConfig {
        tau_max: 3,
        ..MsctConfig::default()
    }
}

fn tiny_bench(seed: u64) -> Benchmark {
    let cfg = DgpConfig {
        seq_len: 20,
        tau_max: 3,
        seed,
        ..DgpConfig::default()
    };
    build_benchmark(&cfg, SplitSizes { train: 8, val: 3, test: 3 }).unwrap()
}

/// Looks the answer up in the ground truth.
struct Oracle<'a>(&'a [UnitRecord]);

impl Forecaster for Oracle<'_> {
    fn forecast(&self, seqs: &[Sequence], requests: &[PathRequest]) -> msct_core::Result<Vec<Vec<f64>>> {
        let labels = msct_core::dgp::sliding_strategies(3);
        Ok(requests
            .iter()
            .map(|r| {
                match labels.iter().find(|s| s.treatments == r.treatments) {
                    Some(l) => self.0[r.unit].cf[&r.anchor][&l.label].clone(),
                    None => seqs[r.unit].y[r.anchor + 1..=r.anchor + 4].to_vec(),
                }
            })
            .collect())
    }
}

#[test]
fn ground_truth_scores_zero_with_full_coverage() {
    let b = tiny_bench(1);
    let e = evaluate("oracle", &Oracle(&b.test), &b.test, &tau3(), &EvalOptions::default()).unwrap();
    assert!(e.rmse.iter().all(|v| v.unwrap() < 1e-12), "{:?}", e.rmse);
    assert!(e.crmse.iter().all(|v| v.unwrap() < 1e-12));
    assert_eq!(e.crmse.len(), 3);
    assert_eq!(e.rmse.len(), 4);
    let anchors = 20 - 3 - 1;
    assert_eq!(e.crmse_used, 3 * anchors);
    assert_eq!(e.crmse_skipped, 0);
    // factual plus four sliding strategies per anchor
    assert_eq!(e.paths, 3 * anchors * 5);
    assert_eq!(e.mean_true, e.mean_pred);
    let below = b
        .test
        .iter()
        .flat_map(|r| r.cf.values())
        .filter(|m| m["slide_0"][0] < m["zero"][0])
        .count();
    assert_eq!(e.crash_below_zero, Some(below as f64 / (3 * anchors) as f64));
    assert!(e.crash_below_zero.unwrap() > 0.5);
}

#[test]
fn persistence_score_matches_direct_computation() {
    let b = tiny_bench(2);
    let opts = EvalOptions {
        factual_only: true,
        anchor_stride: 2,
        ..EvalOptions::default()
    };
    let e = evaluate("naive", &Persistence, &b.test, &tau3(), &opts).unwrap();
    assert!(e.crmse.iter().all(Option::is_none));
    assert_eq!(e.crash_below_zero, None);
    for h in 1..=4 {
        let mut sum = 0.0;
        let mut n = 0;
        for r in &b.test {
            for a in (0..16).step_by(2) {
                if h == 4 && r.t[a + 4] != 0 {
                    continue;
                }
                sum += (r.y[a] - r.y[a + h]).powi(2);
                n += 1;
            }
        }
        assert!((e.rmse[h - 1].unwrap() - (sum / n as f64).sqrt()).abs() < 1e-12);
    }
    assert_eq!(e.paths, 3 * 8);
}

#[test]
fn report_aggregates_seeds_and_marks_absent_cells() {
    let b = tiny_bench(3);
    let opts = EvalOptions::default();
    let a = evaluate("naive", &Persistence, &b.test, &tau3(), &opts).unwrap();
    let mut c = a.clone();
    c.rmse[0] = Some(a.rmse[0].unwrap() + 2.0);
    c.crmse[2] = None;
    let row = ReportRow::aggregate("naive", None, vec![0, 1], vec!["h".into(), "h".into()], vec![a.clone(), c]).unwrap();
    assert!((row.rmse[0].unwrap() - (a.rmse[0].unwrap() + 1.0)).abs() < 1e-12);
    assert!((row.rmse_std[0].unwrap() - 2f64.sqrt()).abs() < 1e-12);
    assert_eq!(row.crmse_std[2], Some(0.0));
    assert!(ReportRow::aggregate("x", None, vec![0], vec![], vec![]).is_err());

    let mut absent = a.clone();
    absent.crmse = vec![None; 3];
    let report = ExperimentReport {
        experiment: "t".into(),
        axis: None,
        config_hash: "abc".into(),
        strategy_weighting: "equal".into(),
        factual_only: false,
        rows: vec![row, ReportRow::aggregate("naive2", None, vec![0], vec!["h".into()], vec![absent]).unwrap()],
    };
    let csv = report.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2 * 4);
    assert!(lines[0].starts_with("experiment,model,axis_value,horizon,rmse"));
    // the fourth horizon has no effect column, and neither does the crmse-less row
    assert!(lines[4].contains(",NA,NA,"));
    assert!(lines[5].contains(",NA,NA,"));
    let back: ExperimentReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let wide = report.wide_table(true).unwrap();
    let wl: Vec<&str> = wide.lines().collect();
    assert_eq!(wl[0], "model,axis_value,h1,h1_std,h2,h2_std,h3,h3_std");
    assert_eq!(wl[2], "naive2,NA,NA,NA,NA,NA,NA,NA");
    assert_eq!(report.wide_table(false).unwrap().lines().next().unwrap().matches("_std").count(), 4);
    assert_eq!(report.horizon_series().series.len(), 2);
    let fx = report.effect_series();
    assert_eq!(fx.series.len(), 2 * 2 * 4);
}

#[test]
fn crash_ratio_subsampling() {
    let mk = |train| {
        let cfg = DgpConfig {
            seq_len: 20,
            tau_max: 3,
            crash_percentile: 99.0,
            ..DgpConfig::default()
        };
        build_benchmark(&cfg, SplitSizes { train, val: 1, test: 1 }).unwrap()
    };
    let b = mk(60);
    let crash = b.train.iter().filter(|r| r.t.iter().any(|&t| t != 0)).count();
    let clean = 60 - crash;
    assert!(crash >= 5 && clean >= 5, "{crash} crash units");
    let n = feasible_units(&b.train, &[0.0, 0.3]);
    assert_eq!(n, clean.min(((crash as f64 / 0.3).floor() as usize).min((clean as f64 / 0.7).floor() as usize)));

    let none = subsample_crash_ratio(&b.train, 0.0, 5, 1).unwrap();
    assert_eq!(none.len(), 5);
    assert!(none.iter().all(|r| r.t.iter().all(|&t| t == 0)));
    let some = subsample_crash_ratio(&b.train, 0.4, 10, 1).unwrap();
    assert_eq!(some.iter().filter(|r| r.t.iter().any(|&t| t != 0)).count(), 4);
    assert_eq!(some, subsample_crash_ratio(&b.train, 0.4, 10, 1).unwrap());
    assert_ne!(some, subsample_crash_ratio(&b.train, 0.4, 10, 2).unwrap());
    assert!(subsample_crash_ratio(&b.train, 1.0, crash + 1, 1).is_err());
    assert!(subsample_crash_ratio(&b.train, 1.5, 3, 1).is_err());
}

#[test]
fn noise_tolerant_monotonicity() {
    assert!(non_increasing_within_noise(&[10.0, 9.0, 9.5], &[0.0, 1.0, 0.0]));
    assert!(!non_increasing_within_noise(&[10.0, 9.0, 9.9], &[0.0, 1.0, 0.0]));
    assert!(non_increasing_within_noise(&[5.0], &[0.0]));
}

fn tiny_pipeline() -> PipelineConfig {
    PipelineConfig {
        dgp: DgpConfig {
            seq_len: 16,
            tau_max: 2,
            ..DgpConfig::default()
        },
        sizes: SplitSizes { train: 6, val: 2, test: 2 },
        model: MsctConfig {
            d_h: 4,
            heads: 1,
            tau_max: 2,
            ..MsctConfig::default()
        },
        train: TrainConfig {
            encoder_epochs: 1,
            decoder_epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        },
        models: vec![ModelKind::Msct, ModelKind::Msm, ModelKind::Naive],
        seeds: vec![0, 1],
        ..PipelineConfig::default()
    }
}

#[test]
fn ablation_variants_differ_structurally() {
    let p = tiny_pipeline();
    let names = |kind: ModelKind| {
        let (m, _) = kind.neural_configs(&p.model, &p.train).unwrap();
        let model = MsctModel::new(m, 0).unwrap();
        model.store.ids().map(|id| model.store.name(id).to_string()).collect::<Vec<_>>()
    };
    let bl = names(ModelKind::WithoutBalancing);
    assert!(bl.iter().all(|n| !n.contains(".ps_") && !n.contains("hps_")));
    let ps = names(ModelKind::WithoutPs);
    assert!(ps.iter().all(|n| !n.contains(".ps_")) && ps.iter().any(|n| n.contains("hps_")));
    let full = names(ModelKind::Msct);
    assert!(full.iter().any(|n| n.contains(".ps_")) && full.iter().any(|n| n.contains("hps_")));
    assert!(names(ModelKind::WithoutTransformer).iter().all(|n| !n.contains("block")));
    assert!(ModelKind::Naive.neural_configs(&p.model, &p.train).is_none());
}

#[test]
fn ablation_table_has_five_complete_reproducible_rows() {
    let p = tiny_pipeline();
    let a = ablation_suite(&p).unwrap();
    let labels: Vec<&str> = a.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(labels, ["msct", "w/o transf", "w/o ps", "w/o bl", "w/ gr"]);
    for r in &a.rows {
        assert_eq!(r.rmse.len(), 3);
        assert!(r.rmse.iter().all(|v| v.is_some_and(|x| x.is_finite() && x >= 0.0)));
        assert_eq!(r.per_seed.len(), 2);
    }
    let again = ablation_suite(&PipelineConfig { jobs: 2, ..p }).unwrap();
    assert_eq!(a.to_json().unwrap(), again.to_json().unwrap());
}

#[test]
fn omega_sweep_emits_one_point_per_window() {
    let p = PipelineConfig {
        seeds: vec![0],
        ..tiny_pipeline()
    };
    let r = omega_sweep(&[1, 5, 10], &p).unwrap();
    assert_eq!(r.rows.len(), 3 * 3);
    let series = r.sweep_series(3);
    assert_eq!(series.series.len(), 3);
    assert!(series.series.iter().all(|s| s.x == vec![1.0, 5.0, 10.0]));
    let hashes: Vec<&String> = r.rows.iter().filter(|r| r.model == "naive").map(|r| &r.dataset_hashes[0]).collect();
    assert!(hashes[0] != hashes[1] && hashes[1] != hashes[2]);
    assert!(omega_sweep(&[0], &p).is_err());

    let dir = tempfile::tempdir().unwrap();
    r.write(dir.path(), "omega", 3).unwrap();
    for f in ["omega.csv", "omega.json", "omega_plot.json", "omega_effects.json", "omega_rmse_table.csv", "omega_crmse_table.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn probe_reports_bounded_scores() {
    let b = tiny_bench(4);
    let model = MsctModel::new(
        MsctConfig {
            d_h: 4,
            heads: 1,
            tau_max: 3,
            ..MsctConfig::default()
        },
        0,
    )
    .unwrap();
    let train = sequences(&b.train, TreatmentField::Binary, 2).unwrap();
    let test = sequences(&b.test, TreatmentField::Binary, 2).unwrap();
    let r = probe_treatment(&model, &train, &test).unwrap();
    assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.balanced_accuracy));
    assert_eq!(r.train_rows, 8 * 19);
    assert!(r.prevalence > 0.0 && r.prevalence < 1.0);
}
