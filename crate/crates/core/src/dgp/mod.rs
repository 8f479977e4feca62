//! Synthetic post-crash traffic-speed generator with a counterfactual oracle.

mod benchmark;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MsctError, Result};

pub use benchmark::{
    build_benchmark, load_benchmark, load_records, save_benchmark, Benchmark, BenchmarkMeta, Covariates, SplitSizes, UnitRecord,
    SPLITS,
};

/// Steps in one simulated day; the speed trend repeats every half day.
pub const DAY_STEPS: usize = 720;
const HALF_DAY: f64 = 360.0;

/// How crash indicators are drawn from the confounder average.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Assignment {
    /// Crash whenever the average reaches the percentile threshold.
    Threshold,
    /// Crash with probability `sigmoid(scale * (avg - threshold))`.
    Logistic { scale: f64 },
    /// Crash with probability `(100 - crash_percentile) / 100`, ignoring covariates.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    pub beta1: f64,
    pub beta2_menu: Vec<f64>,
    pub p_c: Vec<f64>,
    pub psi: f64,
    pub mu: f64,
    pub sigma: f64,
    pub amp: f64,
    pub omega: usize,
    pub crash_percentile: f64,
    pub eps_std: f64,
    pub seq_len: usize,
    pub impact_duration: usize,
    pub tau_max: usize,
    pub speed_floor: f64,
    pub assignment: Assignment,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            beta1: 0.1,
            beta2_menu: vec![0.2, 0.4, 0.8],
            p_c: vec![0.6, 0.3, 0.1],
            psi: 80.0,
            mu: 6.0,
            sigma: 1.0,
            amp: 80.0,
            omega: 5,
            crash_percentile: 90.0,
            eps_std: 0.05,
            seq_len: 60,
            impact_duration: 5,
            tau_max: 5,
            speed_floor: 1.0,
            assignment: Assignment::Threshold,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MsctError::Config(m));
        if self.p_c.is_empty() || self.p_c.len() != self.beta2_menu.len() {
            return bad(format!(
                "p_c has {} entries but beta2_menu has {}",
                self.p_c.len(),
                self.beta2_menu.len()
            ));
        }
        if self.p_c.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (self.p_c.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("p_c must be probabilities summing to 1, got {:?}", self.p_c));
        }
        if self.beta2_menu.iter().any(|&b| !(b > 0.0 && b.is_finite())) {
            return bad(format!("beta2_menu must be positive, got {:?}", self.beta2_menu));
        }
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be > 0, got {}", self.sigma));
        }
        if self.omega < 1 {
            return bad("omega must be >= 1".into());
        }
        if !(self.crash_percentile > 0.0 && self.crash_percentile <= 100.0) {
            return bad(format!("crash_percentile must be in (0, 100], got {}", self.crash_percentile));
        }
        if !(self.eps_std >= 0.0 && self.eps_std.is_finite()) {
            return bad(format!("eps_std must be >= 0, got {}", self.eps_std));
        }
        if self.impact_duration < 2 {
            return bad("impact_duration must be >= 2".into());
        }
        if self.tau_max < 1 || self.seq_len < self.tau_max + 3 {
            return bad(format!(
                "seq_len {} too short for tau_max {} (need seq_len >= tau_max + 3)",
                self.seq_len, self.tau_max
            ));
        }
        if !(self.speed_floor > 0.0) {
            return bad("speed_floor must be > 0".into());
        }
        if !(self.psi > 0.0) || self.amp < 0.0 {
            return bad("psi must be > 0 and amp >= 0".into());
        }
        if let Assignment::Logistic { scale } = self.assignment {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad(format!("logistic scale must be > 0, got {scale}"));
            }
        }
        // the trend must stay positive for the recovery ratio to be defined
        let trough = self.psi - self.amp / (self.sigma * (2.0 * PI).sqrt());
        if trough <= 0.0 {
            return bad(format!("basic trend reaches {trough:.3} <= 0; lower amp or raise psi"));
        }
        Ok(())
    }

    /// Number of anchors with a full counterfactual window.
    pub fn anchors(&self) -> usize {
        self.seq_len - self.tau_max - 1
    }
}

/// Daily speed trend at absolute step `t`.
pub fn base_speed(t: f64, cfg: &DgpConfig) -> f64 {
    let phi = t.rem_euclid(HALF_DAY) / 30.0;
    let z = (phi - cfg.mu) / cfg.sigma;
    cfg.psi - cfg.amp * (-0.5 * z * z).exp() / (cfg.sigma * (2.0 * PI).sqrt())
}

/// Recovery exponent `d` steps after a crash: `1.25 - 0.25 d` over `1..=5`
/// for the default five-step impact, zero elsewhere.
pub fn dissipation(d: i64, impact_duration: usize) -> f64 {
    let dur = impact_duration as i64;
    if (1..=dur).contains(&d) {
        (dur - d) as f64 / (dur - 1) as f64
    } else {
        0.0
    }
}

/// Mean of the last `min(t, omega)` values of `x[..t]` (`t` counts from 1).
pub fn confounded_moving_average(x: &[f64], t: usize, omega: usize) -> Result<f64> {
    let w = t.min(omega);
    if w == 0 || t > x.len() {
        return Err(MsctError::Usage(format!(
            "moving average needs 1 <= t <= {} and omega >= 1 (t={t}, omega={omega})",
            x.len()
        )));
    }
    Ok(x[t - w..t].iter().sum::<f64>() / w as f64)
}

/// One application of the speed recursion.
///
/// `since_crash` is `t - t_c` for the most recent crash at or before `t`.
pub fn step_speed(
    y_prev: f64,
    x_t: f64,
    beta2_t: f64,
    t_abs: f64,
    since_crash: Option<i64>,
    eps: f64,
    cfg: &DgpConfig,
) -> Result<f64> {
    let g = since_crash.map_or(0.0, |d| dissipation(d, cfg.impact_duration));
    let base = base_speed(t_abs, cfg);
    let trend = if g == 0.0 {
        base
    } else {
        let ratio = y_prev / base_speed(t_abs - 1.0, cfg);
        if !(ratio > 0.0) {
            return Err(MsctError::Numerical { op: "step_speed" });
        }
        base * ratio.powf(g)
    };
    let y = (cfg.beta1 * x_t - beta2_t + eps) * y_prev + trend;
    if !y.is_finite() {
        return Err(MsctError::Numerical { op: "step_speed" });
    }
    Ok(y.max(cfg.speed_floor))
}

/// Observed trajectory of one unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesUnit {
    pub x: Vec<f64>,
    pub t: Vec<u8>,
    /// 0 for no crash, otherwise 1-based index into the effect menu.
    pub t_type: Vec<u8>,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
}

impl TimeSeriesUnit {
    pub fn crash_times(&self) -> Vec<usize> {
        self.t.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Per-unit random draws that every counterfactual branch reuses.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitDraws {
    pub start: usize,
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    /// Crash type that a crash at this step would have (0-based).
    pub crash_type: Vec<usize>,
    pub uniform: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimUnit {
    pub unit: TimeSeriesUnit,
    pub draws: UnitDraws,
    pub threshold: f64,
}

/// Future treatment vector over the `tau_max` steps after an anchor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionStrategy {
    pub treatments: Vec<u8>,
    pub label: String,
}

/// The single-sliding-treatment set: one crash at each offset, then no crash.
pub fn sliding_strategies(tau_max: usize) -> Vec<InterventionStrategy> {
    let mut out: Vec<InterventionStrategy> = (0..tau_max)
        .map(|k| {
            let mut t = vec![0; tau_max];
            t[k] = 1;
            InterventionStrategy {
                treatments: t,
                label: format!("slide_{k}"),
            }
        })
        .collect();
    out.push(InterventionStrategy {
        treatments: vec![0; tau_max],
        label: "zero".into(),
    });
    out
}

/// Stable 64-bit seed for unit `index` under `master`.
pub fn unit_seed(master: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(master ^ splitmix(index))
}

pub fn draw_unit(cfg: &DgpConfig, seed: u64) -> Result<UnitDraws> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.eps_std).map_err(|e| MsctError::Config(e.to_string()))?;
    let start = rng.random_range(0..DAY_STEPS);
    let n = cfg.seq_len;
    let mut d = UnitDraws {
        start,
        x: Vec::with_capacity(n),
        eps: Vec::with_capacity(n),
        crash_type: Vec::with_capacity(n),
        uniform: Vec::with_capacity(n),
    };
    for _ in 0..n {
        d.x.push(StandardNormal.sample(&mut rng));
        d.eps.push(noise.sample(&mut rng));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = cfg.p_c.len() - 1;
        for (j, p) in cfg.p_c.iter().enumerate() {
            acc += p;
            if u < acc {
                k = j;
                break;
            }
        }
        d.crash_type.push(k);
        d.uniform.push(rng.random());
    }
    Ok(d)
}

/// Confounder averages at steps `1..seq_len`, the points that can be treated.
pub fn confounder_averages(x: &[f64], omega: usize) -> Result<Vec<f64>> {
    (2..=x.len()).map(|t| confounded_moving_average(x, t, omega)).collect()
}

/// Percentile (linear interpolation between order statistics) of the pooled
/// confounder averages. `100` disables crashes.
pub fn crash_threshold(averages: &[f64], crash_percentile: f64) -> Result<f64> {
    if crash_percentile >= 100.0 {
        return Ok(f64::INFINITY);
    }
    if averages.is_empty() {
        return Err(MsctError::Config("no confounder averages to set a crash threshold".into()));
    }
    let mut v = averages.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v[0] == v[v.len() - 1] {
        return Err(MsctError::Config("confounder averages are all equal; threshold is degenerate".into()));
    }
    let pos = crash_percentile / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// Crash indicators and types from the confounder path. Step 0 is never treated.
pub fn assign_treatments(draws: &UnitDraws, threshold: f64, cfg: &DgpConfig) -> Result<(Vec<u8>, Vec<u8>)> {
    let n = draws.x.len();
    let mut t = vec![0u8; n];
    let mut ty = vec![0u8; n];
    for i in 1..n {
        let avg = confounded_moving_average(&draws.x, i + 1, cfg.omega)?;
        let crash = match cfg.assignment {
            Assignment::Threshold => avg >= threshold,
            Assignment::Logistic { scale } => {
                threshold.is_finite() && draws.uniform[i] < 1.0 / (1.0 + (-scale * (avg - threshold)).exp())
            }
            Assignment::Random => draws.uniform[i] < (100.0 - cfg.crash_percentile) / 100.0,
        };
        if crash {
            t[i] = 1;
            ty[i] = draws.crash_type[i] as u8 + 1;
        }
    }
    Ok((t, ty))
}

/// Run the recursion over `start_idx..=end_idx` under treatments `t`, continuing
/// from the state at `start_idx - 1`. `y` must hold the values before `start_idx`.
fn simulate_into(draws: &UnitDraws, t: &[u8], y: &mut Vec<f64>, start_idx: usize, end_idx: usize, cfg: &DgpConfig) -> Result<()> {
    let mut last_crash = t[..start_idx].iter().rposition(|&v| v == 1);
    for i in start_idx..=end_idx {
        if t[i] == 1 {
            last_crash = Some(i);
        }
        let beta2 = if t[i] == 1 { cfg.beta2_menu[draws.crash_type[i]] } else { 0.0 };
        let since = last_crash.map(|c| (i - c) as i64);
        let t_abs = (draws.start + i) as f64;
        let next = step_speed(y[i - 1], draws.x[i], beta2, t_abs, since, draws.eps[i], cfg)?;
        y.push(next);
    }
    Ok(())
}

fn static_features(start: usize) -> Vec<f64> {
    let phase = 2.0 * PI * (start as f64).rem_euclid(HALF_DAY) / HALF_DAY;
    vec![phase.sin(), phase.cos()]
}

/// Simulate a unit's factual trajectory from its draws and the population threshold.
pub fn simulate_unit(draws: UnitDraws, threshold: f64, cfg: &DgpConfig) -> Result<SimUnit> {
    let (t, t_type) = assign_treatments(&draws, threshold, cfg)?;
    let n = draws.x.len();
    let mut y = Vec::with_capacity(n);
    y.push(base_speed(draws.start as f64, cfg));
    simulate_into(&draws, &t, &mut y, 1, n - 1, cfg)?;
    let unit = TimeSeriesUnit {
        x: draws.x.clone(),
        t,
        t_type,
        y,
        s: static_features(draws.start),
    };
    Ok(SimUnit { unit, draws, threshold })
}

/// Generate one unit against a known threshold.
pub fn generate_unit(cfg: &DgpConfig, seed: u64, threshold: f64) -> Result<SimUnit> {
    cfg.validate()?;
    simulate_unit(draw_unit(cfg, seed)?, threshold, cfg)
}

/// Draw units `first..first + count`, set the threshold over their pooled
/// confounder averages, then simulate them.
pub fn generate_population(cfg: &DgpConfig, first: u64, count: usize) -> Result<(f64, Vec<SimUnit>)> {
    use rayon::prelude::*;
    cfg.validate()?;
    let draws: Vec<UnitDraws> = (0..count as u64)
        .into_par_iter()
        .map(|k| draw_unit(cfg, unit_seed(cfg.seed, first + k)))
        .collect::<Result<_>>()?;
    let mut pooled = Vec::with_capacity(count * cfg.seq_len);
    for d in &draws {
        pooled.extend(confounder_averages(&d.x, cfg.omega)?);
    }
    let threshold = crash_threshold(&pooled, cfg.crash_percentile)?;
    let units = populate(draws, threshold, cfg)?;
    Ok((threshold, units))
}

fn populate(draws: Vec<UnitDraws>, threshold: f64, cfg: &DgpConfig) -> Result<Vec<SimUnit>> {
    use rayon::prelude::*;
    draws.into_par_iter().map(|d| simulate_unit(d, threshold, cfg)).collect()
}

/// Draw and simulate units `first..first + count` against a fixed threshold.
pub fn generate_with_threshold(cfg: &DgpConfig, first: u64, count: usize, threshold: f64) -> Result<Vec<SimUnit>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let draws: Vec<UnitDraws> = (0..count as u64)
        .into_par_iter()
        .map(|k| draw_unit(cfg, unit_seed(cfg.seed, first + k)))
        .collect::<Result<_>>()?;
    populate(draws, threshold, cfg)
}

/// Outcomes `y[anchor+1..=anchor+len]` when the treatments over that span are
/// replaced by `treatments` (history up to `anchor` stays factual).
pub fn simulate_branch(sim: &SimUnit, anchor: usize, treatments: &[u8], cfg: &DgpConfig) -> Result<Vec<f64>> {
    let n = sim.unit.len();
    let end = anchor + treatments.len();
    if treatments.is_empty() || end >= n {
        return Err(MsctError::Range(format!(
            "anchor {anchor} with {} future steps exceeds sequence length {n}",
            treatments.len()
        )));
    }
    let mut t = sim.unit.t[..=anchor].to_vec();
    t.extend_from_slice(treatments);
    let mut y = sim.unit.y[..=anchor].to_vec();
    simulate_into(&sim.draws, &t, &mut y, anchor + 1, end, cfg)?;
    Ok(y.split_off(anchor + 1))
}

/// One outcome path per strategy over horizons `1..=tau_max + 1`; the step
/// after the strategy window is left untreated.
pub fn simulate_counterfactuals(
    sim: &SimUnit,
    anchor: usize,
    strategies: &[InterventionStrategy],
    cfg: &DgpConfig,
) -> Result<Vec<Vec<f64>>> {
    let tau = strategies.first().map_or(0, |s| s.treatments.len());
    strategies
        .iter()
        .map(|s| {
            if s.treatments.len() != tau {
                return Err(MsctError::Usage("strategies must share one horizon".into()));
            }
            let mut t = s.treatments.clone();
            t.push(0);
            simulate_branch(sim, anchor, &t, cfg)
        })
        .collect()
}
