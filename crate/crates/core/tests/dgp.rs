use std::collections::BTreeSet;

use msct_core::dgp::*;
use msct_core::MsctError;

fn cfg() -> DgpConfig {
    DgpConfig::default()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn base_speed_examples() {
    let c = cfg();
    // phi = 6 at t = 180 and t = 540
    let peak = 80.0 - 80.0 / (2.0 * std::f64::consts::PI).sqrt();
    assert!(close(base_speed(180.0, &c), peak, 1e-12));
    assert!(close(base_speed(180.0, &c), 48.08, 5e-3));
    assert!(close(base_speed(540.0, &c), peak, 1e-12));
    // phi = 3 is three widths from the peak
    assert!(close(base_speed(90.0, &c), 79.65, 5e-3));
    let flat = DgpConfig { amp: 0.0, ..cfg() };
    for t in [0.0, 90.0, 180.0, 719.0] {
        assert_eq!(base_speed(t, &flat), 80.0);
    }
}

#[test]
fn dissipation_examples_and_monotone() {
    assert_eq!(dissipation(1, 5), 1.0);
    assert_eq!(dissipation(2, 5), 0.75);
    assert_eq!(dissipation(6, 5), 0.0);
    assert_eq!(dissipation(0, 5), 0.0);
    assert_eq!(dissipation(-3, 5), 0.0);
    for d in 1..5 {
        assert!(dissipation(d + 1, 5) <= dissipation(d, 5));
        assert_eq!(dissipation(d, 5), 1.25 - 0.25 * d as f64);
    }
}

#[test]
fn moving_average_examples() {
    assert_eq!(confounded_moving_average(&[2.5; 7], 6, 3).unwrap(), 2.5);
    assert_eq!(confounded_moving_average(&[1.0, 2.0, 3.0, 4.0], 4, 3).unwrap(), 3.0);
    assert_eq!(confounded_moving_average(&[1.0, 2.0, 3.0, 4.0], 3, 10).unwrap(), 2.0);
    assert!(matches!(confounded_moving_average(&[1.0], 0, 3), Err(MsctError::Usage(_))));
}

#[test]
fn step_speed_examples() {
    let c = cfg();
    // no treatment, no covariate, no noise, no recent crash: back to trend
    for t in [10.0, 170.0, 400.0] {
        assert_eq!(step_speed(37.0, 0.0, 0.0, t, None, 0.0, &c).unwrap(), base_speed(t, &c));
        assert_eq!(step_speed(37.0, 0.0, 0.0, t, Some(9), 0.0, &c).unwrap(), base_speed(t, &c));
    }
    // severe crash from free flow
    let flat = DgpConfig { amp: 0.0, ..cfg() };
    assert_eq!(step_speed(80.0, 0.0, 0.8, 50.0, Some(0), 0.0, &flat).unwrap(), 16.0);
    // one step after dropping to half the trend, g(1) = 1 keeps the ratio
    let t = 175.0;
    let half = 0.5 * base_speed(t - 1.0, &c);
    let y = step_speed(half, 0.0, 0.0, t, Some(1), 0.0, &c).unwrap();
    assert!(close(y, 0.5 * base_speed(t, &c), 1e-12));
    // g(2) = 0.75
    let y2 = step_speed(half, 0.0, 0.0, t, Some(2), 0.0, &c).unwrap();
    assert!(close(y2, base_speed(t, &c) * 0.5f64.powf(0.75), 1e-12));
}

#[test]
fn fixed_point_without_trend_noise_crashes_or_covariate_effect() {
    let c = DgpConfig {
        amp: 0.0,
        eps_std: 0.0,
        crash_percentile: 100.0,
        beta1: 0.0,
        ..cfg()
    };
    let (_, units) = generate_population(&c, 0, 20).unwrap();
    for u in units {
        assert!(u.unit.y.iter().all(|&y| y == 80.0));
        assert!(u.unit.t.iter().all(|&t| t == 0));
    }
}

#[test]
fn crash_free_units_track_trend_plus_perturbations() {
    let c = DgpConfig {
        crash_percentile: 100.0,
        ..cfg()
    };
    let (_, units) = generate_population(&c, 0, 30).unwrap();
    for u in &units {
        assert!(u.unit.crash_times().is_empty());
        let d = &u.draws;
        let mut y = base_speed(d.start as f64, &c);
        assert_eq!(u.unit.y[0], y);
        for i in 1..c.seq_len {
            let t = (d.start + i) as f64;
            y = (c.beta1 * d.x[i] + d.eps[i]) * y + base_speed(t, &c);
            assert!(close(u.unit.y[i], y.max(c.speed_floor), 1e-9));
        }
    }
}

#[test]
fn units_are_deterministic_and_parallel_matches_sequential() {
    let c = cfg();
    let (thr, pop) = generate_population(&c, 0, 12).unwrap();
    let (thr2, pop2) = generate_population(&c, 0, 12).unwrap();
    assert_eq!(thr.to_bits(), thr2.to_bits());
    assert_eq!(pop, pop2);
    for (i, u) in pop.iter().enumerate() {
        let seq = generate_unit(&c, unit_seed(c.seed, i as u64), thr).unwrap();
        assert_eq!(&seq, u);
    }
    let other = generate_unit(&c, unit_seed(c.seed + 1, 0), thr).unwrap();
    assert_ne!(other.unit.y, pop[0].unit.y);
}

#[test]
fn crash_frequency_matches_percentile() {
    for pct in [90.0, 80.0] {
        let c = DgpConfig {
            crash_percentile: pct,
            ..cfg()
        };
        // 1700 units x 59 treatable steps > 1e5
        let (_, units) = generate_population(&c, 0, 1700).unwrap();
        let steps: usize = units.len() * (c.seq_len - 1);
        assert!(steps >= 100_000);
        let treated: usize = units.iter().map(|u| u.unit.t.iter().map(|&v| v as usize).sum::<usize>()).sum();
        let rate = treated as f64 / steps as f64;
        assert!(close(rate, (100.0 - pct) / 100.0, 0.02), "pct {pct}: rate {rate}");
    }
}

#[test]
fn severe_crash_share_matches_type_probabilities() {
    let c = cfg();
    let (_, units) = generate_population(&c, 0, 2000).unwrap();
    let types: Vec<u8> = units.iter().flat_map(|u| u.unit.t_type.iter().copied().filter(|&v| v > 0)).collect();
    assert!(types.len() >= 10_000, "{} crashes", types.len());
    let share = |k: u8| types.iter().filter(|&&v| v == k).count() as f64 / types.len() as f64;
    assert!(close(share(3), 0.1, 0.02));
    assert!(close(share(1), 0.6, 0.02));
    assert!(close(share(2), 0.3, 0.02));
    for u in &units {
        for (t, ty) in u.unit.t.iter().zip(&u.unit.t_type) {
            assert_eq!(*t == 1, *ty > 0);
        }
    }
}

#[test]
fn full_percentile_means_no_crashes() {
    let c = DgpConfig {
        crash_percentile: 100.0,
        ..cfg()
    };
    let (thr, units) = generate_population(&c, 0, 50).unwrap();
    assert!(thr.is_infinite());
    assert!(units.iter().all(|u| u.unit.t.iter().all(|&v| v == 0)));
}

#[test]
fn degenerate_confounder_is_config_error() {
    assert!(matches!(crash_threshold(&[0.3; 20], 90.0), Err(MsctError::Config(_))));
}

#[test]
fn threshold_is_linear_interpolated_percentile() {
    let v: Vec<f64> = (0..11).map(|i| i as f64).collect();
    assert_eq!(crash_threshold(&v, 90.0).unwrap(), 9.0);
    assert_eq!(crash_threshold(&v, 95.0).unwrap(), 9.5);
}

#[test]
fn off_peak_population_mean_stays_near_free_flow() {
    let c = cfg();
    let (_, units) = generate_population(&c, 0, 1000).unwrap();
    let mut sum = 0.0;
    let mut n = 0usize;
    for u in &units {
        for (i, y) in u.unit.y.iter().enumerate() {
            let phase = (u.draws.start + i) % 360;
            if !(15..=345).contains(&phase) {
                sum += y;
                n += 1;
            }
        }
    }
    assert!(n > 1000);
    let mean = sum / n as f64;
    assert!((75.0..=82.0).contains(&mean), "off-peak mean {mean}");
}

#[test]
fn sliding_strategy_sets() {
    let two: BTreeSet<Vec<u8>> = sliding_strategies(2).into_iter().map(|s| s.treatments).collect();
    let expect: BTreeSet<Vec<u8>> = [vec![1, 0], vec![0, 1], vec![0, 0]].into_iter().collect();
    assert_eq!(two, expect);
    let five = sliding_strategies(5);
    assert_eq!(five.len(), 6);
    assert!(five.iter().all(|s| s.treatments.iter().map(|&v| v as usize).sum::<usize>() <= 1));
    assert_eq!(five[5].label, "zero");
}

#[test]
fn factual_branch_reproduces_trajectory() {
    let c = cfg();
    let (_, units) = generate_population(&c, 0, 40).unwrap();
    let mut zero_windows = 0;
    for u in &units {
        for anchor in 0..c.anchors() {
            let fact = &u.unit.t[anchor + 1..=anchor + c.tau_max + 1];
            let branch = simulate_branch(u, anchor, fact, &c).unwrap();
            assert_eq!(&branch[..], &u.unit.y[anchor + 1..=anchor + c.tau_max + 1]);
            if fact.iter().all(|&v| v == 0) {
                zero_windows += 1;
                let strategies = sliding_strategies(c.tau_max);
                let paths = simulate_counterfactuals(u, anchor, &strategies, &c).unwrap();
                assert_eq!(&paths[c.tau_max][..], &u.unit.y[anchor + 1..=anchor + c.tau_max + 1]);
            }
        }
    }
    assert!(zero_windows > 100);
}

#[test]
fn crash_branch_diverges_by_effect_times_previous_speed() {
    let c = cfg();
    let (_, units) = generate_population(&c, 0, 40).unwrap();
    let strategies = sliding_strategies(c.tau_max);
    let mut checked = 0;
    for u in &units {
        for anchor in [0, 10, 33, c.anchors() - 1] {
            let paths = simulate_counterfactuals(u, anchor, &strategies, &c).unwrap();
            let crash = paths[0][0];
            let calm = paths[c.tau_max][0];
            let beta2 = c.beta2_menu[u.draws.crash_type[anchor + 1]];
            // a crash still dissipating in the calm branch changes its trend term too
            let lo = (anchor + 1).saturating_sub(c.impact_duration);
            let recent = u.unit.t[lo..=anchor].contains(&1);
            if crash > c.speed_floor && !recent {
                checked += 1;
                let expect = beta2 * u.unit.y[anchor];
                assert!(close(calm - crash, expect, 1e-9 * expect.max(1.0)));
            }
            assert_eq!(paths[0].len(), c.tau_max + 1);
        }
    }
    assert!(checked > 60);
}

#[test]
fn counterfactual_range_errors() {
    let c = cfg();
    let u = generate_unit(&c, 3, 0.5).unwrap();
    let s = sliding_strategies(c.tau_max);
    assert!(simulate_counterfactuals(&u, c.anchors() - 1, &s, &c).is_ok());
    assert!(matches!(simulate_counterfactuals(&u, c.anchors(), &s, &c), Err(MsctError::Range(_))));
}

#[test]
fn config_validation() {
    let bad = [
        DgpConfig { p_c: vec![0.5, 0.3, 0.1], ..cfg() },
        DgpConfig { beta2_menu: vec![0.2, -0.4, 0.8], ..cfg() },
        DgpConfig { sigma: 0.0, ..cfg() },
        DgpConfig { omega: 0, ..cfg() },
        DgpConfig { crash_percentile: 0.0, ..cfg() },
        DgpConfig { seq_len: 7, ..cfg() },
        DgpConfig { amp: 300.0, ..cfg() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(MsctError::Config(_))), "{c:?}");
    }
    cfg().validate().unwrap();
}

#[test]
fn benchmark_shape_round_trip_and_field_names() {
    let c = DgpConfig { seed: 5, ..cfg() };
    let sizes = SplitSizes { train: 6, val: 3, test: 2 };
    let b = build_benchmark(&c, sizes).unwrap();
    assert_eq!((b.train.len(), b.val.len(), b.test.len()), (6, 3, 2));
    assert!(b.train.iter().all(|r| r.cf.is_empty()));
    for r in b.val.iter().chain(&b.test) {
        assert_eq!(r.cf.len(), c.anchors());
        for by_label in r.cf.values() {
            assert_eq!(by_label.len(), c.tau_max + 1);
            assert!(by_label.values().all(|p| p.len() == c.tau_max + 1));
        }
    }
    assert_eq!(b.meta.unit_seeds["train"].len(), 6);

    let dir = tempfile::tempdir().unwrap();
    save_benchmark(&b, dir.path()).unwrap();
    let back = load_benchmark(dir.path()).unwrap();
    assert_eq!(back, b);
    for (r0, r1) in b.test.iter().zip(&back.test) {
        for (a, z) in r0.y.iter().zip(&r1.y) {
            assert_eq!(a.to_bits(), z.to_bits());
        }
    }
    let line = std::fs::read_to_string(dir.path().join("val.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["cf", "s", "t", "t_type", "x", "y"].into_iter().collect());
    assert!(v["cf"]["0"]["slide_0"].is_array());

    let again = build_benchmark(&c, sizes).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    save_benchmark(&again, dir2.path()).unwrap();
    for f in ["config.json", "train.jsonl", "val.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap());
    }
}

#[test]
fn empty_split_is_config_error() {
    let sizes = SplitSizes { train: 4, val: 0, test: 1 };
    assert!(matches!(build_benchmark(&cfg(), sizes), Err(MsctError::Config(_))));
}
