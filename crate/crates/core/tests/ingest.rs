use msct_core::ingest::*;
use msct_core::model::{EncoderBatch, Normalizer, Sequence, TreatmentField};

fn header() -> String {
    let mut cols = vec![TIMESTAMP, MILEPOST, DIRECTION, SPEED, CRASH_TYPE];
    cols.extend(COVARIATE_COLUMNS);
    cols.join(",")
}

/// `rows` consecutive bins at each location, skipping the bins in `gaps`.
fn csv(locations: &[(f64, &str)], rows: usize, gaps: &[usize], crash_at: &[(usize, u8)]) -> String {
    let mut out = header() + "\n";
    for (li, (mp, dir)) in locations.iter().enumerate() {
        for i in 0..rows {
            if gaps.contains(&i) {
                continue;
            }
            let minutes = i * 5;
            let ts = format!("2023-03-{:02} {:02}:{:02}:00", 1 + minutes / 1440, (minutes / 60) % 24, minutes % 60);
            let crash = crash_at.iter().find(|c| c.0 == i).map_or(0, |c| c.1);
            let speed = 60.0 + (i % 7) as f64 - li as f64;
            let cov: Vec<String> = (0..COVARIATE_COLUMNS.len())
                .map(|j| if j == 2 { format!("{}", speed / 65.0) } else { format!("{}", (i * (j + 1) + li) % 13) })
                .collect();
            out += &format!("{ts},{mp},{dir},{speed},{crash},{}\n", cov.join(","));
        }
    }
    out
}

#[test]
fn missing_column_is_named() {
    let text = "timestamp,milepost,direction,speed\n2023-03-01 00:00:00,1.0,N,60\n2023-03-01 00:05:00,1.0,N,60\n2023-03-01 00:10:00,1.0,N,60\n";
    let err = parse_csv(text).unwrap_err().to_string();
    assert!(err.contains("`crash_type`"), "{err}");
}

#[test]
fn bad_rows_report_their_row_number() {
    let good = csv(&[(1.0, "N")], 3, &[], &[]);
    let mut lines: Vec<String> = good.lines().map(str::to_string).collect();
    let mut fields: Vec<&str> = lines[2].split(',').collect();
    fields[3] = "fast";
    lines[2] = fields.join(",");
    let err = parse_csv(&lines.join("\n")).unwrap_err().to_string();
    assert!(err.contains("row 2") && err.contains("speed"), "{err}");

    let bad_type = csv(&[(1.0, "N")], 3, &[], &[(1, 4)]);
    let err = parse_csv(&bad_type).unwrap_err().to_string();
    assert!(err.contains("row 2") && err.contains("crash_type"), "{err}");

    let off_bin = good.replacen("00:05:00", "00:06:00", 1);
    assert!(parse_csv(&off_bin).unwrap_err().to_string().contains("row 2"));
}

#[test]
fn non_overlapping_windows_count_per_location() {
    let text = csv(&[(1.0, "N"), (2.0, "S")], 150, &[], &[]);
    let cfg = IngestConfig {
        window: 60,
        stride: 60,
        train_frac: 0.5,
        val_frac: 0.25,
    };
    let ds = build_dataset(&parse_csv(&text).unwrap(), &cfg).unwrap();
    let total: usize = ds.meta.windows.values().sum();
    assert_eq!(total, 2 * (150 / 60));
    assert_eq!(ds.meta.skipped_windows, 0);
    assert_eq!(ds.meta.locations, 2);
    assert!(ds.train.iter().chain(&ds.val).chain(&ds.test).all(|r| r.y.len() == 60 && r.cf.is_empty()));
}

#[test]
fn windows_across_gaps_are_skipped_and_counted() {
    let text = csv(&[(1.0, "N")], 120, &[70], &[]);
    let cfg = IngestConfig {
        window: 20,
        stride: 10,
        ..IngestConfig::default()
    };
    let ds = build_dataset(&parse_csv(&text).unwrap(), &cfg).unwrap();
    // 119 rows give starts 0, 10, ..., 90; only the window starting at row 60
    // holds both row 69 (bin 69) and row 70 (bin 71)
    assert_eq!(ds.meta.skipped_windows, 1);
    assert_eq!(ds.meta.windows.values().sum::<usize>(), 10 - 1);
}

#[test]
fn duplicate_bins_are_rejected() {
    let text = csv(&[(1.0, "N")], 5, &[], &[]);
    let dup = text.lines().nth(3).unwrap().to_string();
    let err = build_dataset(&parse_csv(&(text + &dup + "\n")).unwrap(), &IngestConfig { window: 2, stride: 1, ..IngestConfig::default() })
        .unwrap_err()
        .to_string();
    assert!(err.contains("duplicate"), "{err}");
}

#[test]
fn split_is_chronological_and_standardized_on_train() {
    let text = csv(&[(1.0, "N"), (3.0, "S")], 400, &[], &[]);
    let cfg = IngestConfig {
        window: 40,
        stride: 20,
        ..IngestConfig::default()
    };
    let ds = build_dataset(&parse_csv(&text).unwrap(), &cfg).unwrap();
    let d = COVARIATE_COLUMNS.len();
    let rows: Vec<&[f64]> = ds.train.iter().flat_map(|r| (0..r.x.len()).map(move |i| r.x.row(i))).collect();
    for j in 0..d {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
        assert!(m.abs() < 1e-9, "feature {j} mean {m}");
    }
    assert_eq!(ds.meta.stats.columns.len(), d + 1);
    // 19 windows per location; 38 split 30 / 4 / 4
    assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (30, 4, 4));
    // windows sort by start time, then location, so both locations' first
    // windows lead the training split
    let speed_at = |r: &msct_core::dgp::UnitRecord| r.y[0];
    assert_eq!(speed_at(&ds.train[0]), 60.0);
    assert_eq!(speed_at(&ds.train[1]), 59.0);
    assert_eq!(ds.meta.directions, vec!["N".to_string(), "S".to_string()]);
    assert!(ds.train.iter().all(|r| r.s.len() == 2));
}

#[test]
fn crash_types_one_hot_into_four_classes() {
    let text = csv(&[(1.0, "N")], 60, &[], &[(3, 1), (10, 2), (20, 3)]);
    let cfg = IngestConfig {
        window: 60,
        stride: 60,
        train_frac: 1.0,
        val_frac: 0.0,
    };
    let ds = build_dataset(&parse_csv(&text).unwrap(), &cfg).unwrap();
    let rec = &ds.train[0];
    assert_eq!((rec.t[3], rec.t_type[3]), (1, 1));
    assert_eq!((rec.t[20], rec.t_type[20]), (1, 3));
    let seq = Sequence::from_record(rec, TreatmentField::Typed, CRASH_CLASSES).unwrap();
    let batch = EncoderBatch::build(&[&seq], &Normalizer { mean: 0.0, std: 1.0 }, CRASH_CLASSES).unwrap();
    // treat_in at position p is t[p]; t[10] is type 2
    assert_eq!(batch.treat_in.get(&[0, 10, 2]), 1.0);
    assert_eq!(batch.treat_in.get(&[0, 10, 0]), 0.0);
    assert_eq!(batch.treat_in.shape()[2], 4);
    assert_eq!(batch.next_class[19], 3);
}

#[test]
fn saved_dataset_round_trips() {
    let text = csv(&[(1.0, "N")], 100, &[], &[(5, 2)]);
    let ds = build_dataset(&parse_csv(&text).unwrap(), &IngestConfig { window: 30, stride: 10, ..IngestConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_ingested(&ds, dir.path()).unwrap();
    let train = msct_core::dgp::load_records(&dir.path().join("train.jsonl")).unwrap();
    assert_eq!(train, ds.train);
    let meta: IngestMeta = serde_json::from_str(&std::fs::read_to_string(dir.path().join(INGEST_META)).unwrap()).unwrap();
    assert_eq!(meta, ds.meta);
}
