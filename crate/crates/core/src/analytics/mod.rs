//! Energy integration, power statistics, tariff conversion, idle baselines
//! and cross-measurement comparison.
//!
//! Everything here is a pure function of its inputs. Long reductions go
//! through [`crate::par`] so results do not depend on thread count.

mod downsample;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    BaselineStats, EnergySource, EnergySummary, PlugId, PowerSample, TariffSettings, MS_PER_HOUR,
};
use crate::par::{self, Exec};

pub use downsample::{downsample, downsample_indices, downsample_indices_with};

/// Intervals longer than this many poll intervals count as gaps.
pub const GAP_FACTOR: u64 = 5;

pub const BASELINE_MIN_SAMPLES: usize = 30;
pub const BASELINE_MIN_WINDOW_MS: i64 = 60_000;

/// Default agreement threshold for [`compare_measurements`] (0.1 %).
pub const AGREEMENT_THRESHOLD: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticsError {
    #[error("samples out of order at index {index}")]
    Unsorted { index: usize },
    #[error("sample at {ts} lies outside the window [{t0}, {t1}]")]
    OutOfWindow { ts: i64, t0: i64, t1: i64 },
    #[error("baseline belongs to plug {baseline}, window to plug {window}")]
    PlugMismatch { window: String, baseline: String },
    #[error("insufficient data: {samples} samples over {window_s} s (need >= {BASELINE_MIN_SAMPLES} samples and >= 60 s)")]
    InsufficientData { samples: usize, window_s: f64 },
    #[error("measurement windows differ by {diff_ms} ms (tolerance {tolerance_ms} ms)")]
    WindowMismatch { diff_ms: i64, tolerance_ms: i64 },
}

/// Time-ordered samples with explicit bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    samples: Vec<PowerSample>,
    t0: i64,
    t1: i64,
    interval_ms: Option<u64>,
}

fn check_sorted(samples: &[PowerSample]) -> Result<(), AnalyticsError> {
    match samples.windows(2).position(|p| p[1].ts < p[0].ts) {
        Some(i) => Err(AnalyticsError::Unsorted { index: i + 1 }),
        None => Ok(()),
    }
}

impl SeriesWindow {
    pub fn new(samples: Vec<PowerSample>, t0: i64, t1: i64) -> Result<Self, AnalyticsError> {
        check_sorted(&samples)?;
        if let Some(s) = samples.iter().find(|s| s.ts < t0 || s.ts > t1) {
            return Err(AnalyticsError::OutOfWindow { ts: s.ts, t0, t1 });
        }
        Ok(SeriesWindow {
            samples,
            t0,
            t1: t1.max(t0),
            interval_ms: None,
        })
    }

    /// Window spanning exactly the first to the last sample.
    pub fn from_samples(samples: Vec<PowerSample>) -> Result<Self, AnalyticsError> {
        let t0 = samples.first().map_or(0, |s| s.ts);
        let t1 = samples.last().map_or(0, |s| s.ts);
        SeriesWindow::new(samples, t0, t1)
    }

    /// Declares the nominal poll interval so that unflagged long intervals
    /// are also treated as gaps.
    pub fn with_interval(mut self, interval_ms: u64) -> Self {
        self.interval_ms = Some(interval_ms);
        self
    }

    pub fn samples(&self) -> &[PowerSample] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<PowerSample> {
        self.samples
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    pub fn t1(&self) -> i64 {
        self.t1
    }

    pub fn interval_ms(&self) -> Option<u64> {
        self.interval_ms
    }

    pub fn duration_s(&self) -> f64 {
        (self.t1 - self.t0) as f64 / 1000.0
    }

    pub fn plug_id(&self) -> Option<&PlugId> {
        self.samples.first().map(|s| &s.plug_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Integration {
    pub energy_wh: f64,
    pub gap_seconds: f64,
    pub gap_count: usize,
    /// Fewer than two samples; energy is reported as zero.
    pub degenerate: bool,
}

#[inline]
fn is_gap(a: &PowerSample, b: &PowerSample, interval_ms: Option<u64>) -> bool {
    a.flags.gap_after
        || interval_ms.is_some_and(|i| (b.ts - a.ts) as u64 > GAP_FACTOR * i)
}

/// Trapezoidal energy of the pair `(a, b)` in Wh; last-value hold across gaps.
#[inline]
fn pair_energy_wh(a: &PowerSample, b: &PowerSample, gap: bool) -> f64 {
    let dt_ms = (b.ts - a.ts) as f64;
    if gap {
        a.power_w * dt_ms / MS_PER_HOUR
    } else {
        (a.power_w + b.power_w) / 2.0 * dt_ms / MS_PER_HOUR
    }
}

/// Trapezoidal integration over consecutive sample pairs.
pub fn integrate_samples(
    samples: &[PowerSample],
    interval_ms: Option<u64>,
    exec: Exec,
) -> Result<Integration, AnalyticsError> {
    check_sorted(samples)?;
    if samples.len() < 2 {
        return Ok(Integration {
            energy_wh: 0.0,
            gap_seconds: 0.0,
            gap_count: 0,
            degenerate: true,
        });
    }
    let pairs = samples.len() - 1;
    let parts = par::chunked_map(exec, pairs, |range| {
        let mut wh = 0.0;
        let mut gap_ms = 0i64;
        let mut gaps = 0usize;
        for i in range {
            let (a, b) = (&samples[i], &samples[i + 1]);
            let gap = is_gap(a, b, interval_ms);
            if gap {
                gap_ms += b.ts - a.ts;
                gaps += 1;
            }
            wh += pair_energy_wh(a, b, gap);
        }
        (wh, gap_ms, gaps)
    });
    let (energy_wh, gap_ms, gap_count) = parts
        .into_iter()
        .fold((0.0, 0i64, 0usize), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    Ok(Integration {
        energy_wh,
        gap_seconds: gap_ms as f64 / 1000.0,
        gap_count,
        degenerate: false,
    })
}

pub fn integrate_energy(window: &SeriesWindow) -> Integration {
    integrate_samples(&window.samples, window.interval_ms, Exec::default())
        .expect("window is sorted by construction")
}

/// Running integral in kWh at each sample, starting from zero.
pub fn cumulative_kwh(window: &SeriesWindow) -> Vec<f64> {
    let s = &window.samples;
    let mut out = Vec::with_capacity(s.len());
    let mut wh = 0.0;
    for (i, sample) in s.iter().enumerate() {
        if i > 0 {
            let a = &s[i - 1];
            wh += pair_energy_wh(a, sample, is_gap(a, sample, window.interval_ms));
        }
        out.push(wh / 1000.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterEnergy {
    pub energy_wh: f64,
    /// Number of counter resets detected (negative deltas).
    pub resets: usize,
}

/// Energy from the device's cumulative counter: last minus first, split at
/// resets. Absent unless both the first and last samples carry a counter.
pub fn counter_energy(window: &SeriesWindow) -> Option<CounterEnergy> {
    let s = &window.samples;
    s.first()?.energy_counter_wh?;
    s.last()?.energy_counter_wh?;
    let mut prev: Option<f64> = None;
    let mut energy_wh = 0.0;
    let mut resets = 0;
    for c in s.iter().filter_map(|x| x.energy_counter_wh) {
        if let Some(p) = prev {
            if c < p {
                resets += 1;
            } else {
                energy_wh += c - p;
            }
        }
        prev = Some(c);
    }
    Some(CounterEnergy { energy_wh, resets })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn moments(samples: &[PowerSample], exec: Exec) -> Moments {
    let n = samples.len();
    if n == 0 {
        return Moments::default();
    }
    let sum = par::chunked_sum(exec, n, |r| samples[r].iter().map(|s| s.power_w).sum());
    let extrema = par::chunked_map(exec, n, |r| {
        samples[r]
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.power_w), hi.max(s.power_w))
            })
    });
    let (min, max) = extrema
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
            (lo.min(a), hi.max(b))
        });
    let mean = (sum / n as f64).clamp(min, max);
    let ss = par::chunked_sum(exec, n, |r| {
        samples[r].iter().map(|s| (s.power_w - mean).powi(2)).sum()
    });
    Moments {
        count: n,
        mean,
        std: (ss / n as f64).sqrt(),
        min,
        max,
    }
}

/// Statistics, cost and footprint for one window.
///
/// Headline energy is the counter difference when the device reports one,
/// else the trapezoidal integral. With a baseline, `net_energy_kwh` is the
/// headline minus baseline power over the window duration, floored at zero;
/// cost and carbon always use the headline.
pub fn summarize(
    window: &SeriesWindow,
    tariff: &TariffSettings,
    baseline: Option<&BaselineStats>,
    experiment_id: &str,
) -> Result<EnergySummary, AnalyticsError> {
    summarize_with(window, tariff, baseline, experiment_id, Exec::default())
}

pub fn summarize_with(
    window: &SeriesWindow,
    tariff: &TariffSettings,
    baseline: Option<&BaselineStats>,
    experiment_id: &str,
    exec: Exec,
) -> Result<EnergySummary, AnalyticsError> {
    if let (Some(b), Some(plug)) = (baseline, window.plug_id()) {
        if &b.plug_id != plug {
            return Err(AnalyticsError::PlugMismatch {
                window: plug.to_string(),
                baseline: b.plug_id.to_string(),
            });
        }
    }
    let integ = integrate_samples(&window.samples, window.interval_ms, exec)?;
    let counter = counter_energy(window);
    let m = moments(&window.samples, exec);

    let integrated_kwh = integ.energy_wh / 1000.0;
    let counter_kwh = counter.map(|c| c.energy_wh / 1000.0);
    let (energy_kwh, energy_source) = match counter_kwh {
        Some(c) => (c, EnergySource::Counter),
        None => (integrated_kwh, EnergySource::Integrated),
    };
    let duration_s = window.duration_s();
    let net_energy_kwh = baseline.map(|b| {
        let baseline_wh = b.mean_w * duration_s / 3600.0;
        (energy_kwh * 1000.0 - baseline_wh).max(0.0) / 1000.0
    });

    Ok(EnergySummary {
        experiment_id: experiment_id.to_owned(),
        start_ts: Some(window.t0),
        end_ts: Some(window.t1),
        session_count: 1,
        duration_s,
        sample_count: m.count,
        mean_power_w: m.mean,
        std_power_w: m.std,
        min_power_w: if m.count == 0 { 0.0 } else { m.min },
        max_power_w: if m.count == 0 { 0.0 } else { m.max },
        energy_kwh_integrated: integrated_kwh,
        energy_kwh_counter: counter_kwh,
        counter_resets: counter.map_or(0, |c| c.resets),
        energy_kwh,
        energy_source,
        cost: tariff.cost(energy_kwh),
        currency: tariff.currency_label.clone(),
        carbon_g: tariff.carbon_g(energy_kwh),
        gap_count: integ.gap_count,
        gap_seconds: integ.gap_seconds,
        baseline_power_w: baseline.map(|b| b.mean_w),
        net_energy_kwh,
    })
}

/// Merges per-session summaries into one row. Durations, energies and
/// counts add up; power statistics are pooled over all samples; cost and
/// carbon are recomputed from the summed headline energy.
pub fn combine(label: &str, parts: &[EnergySummary], tariff: &TariffSettings) -> EnergySummary {
    let n: usize = parts.iter().map(|p| p.sample_count).sum();
    let nonempty = || parts.iter().filter(|p| p.sample_count > 0);
    let (mean, std) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = nonempty()
            .map(|p| p.mean_power_w * p.sample_count as f64)
            .sum::<f64>()
            / n as f64;
        let ex2 = nonempty()
            .map(|p| (p.std_power_w.powi(2) + p.mean_power_w.powi(2)) * p.sample_count as f64)
            .sum::<f64>()
            / n as f64;
        (mean, (ex2 - mean * mean).max(0.0).sqrt())
    };
    let min = nonempty().map(|p| p.min_power_w).fold(f64::INFINITY, f64::min);
    let max = nonempty().map(|p| p.max_power_w).fold(f64::NEG_INFINITY, f64::max);
    let (min, max) = if n == 0 { (0.0, 0.0) } else { (min, max) };

    let energy_kwh: f64 = parts.iter().map(|p| p.energy_kwh).sum();
    let all_counter = !parts.is_empty() && parts.iter().all(|p| p.energy_kwh_counter.is_some());
    let energy_source = if all_counter {
        EnergySource::Counter
    } else if parts.iter().all(|p| p.energy_source == EnergySource::Integrated) {
        EnergySource::Integrated
    } else {
        EnergySource::Mixed
    };
    let baseline_power_w = match parts.first().and_then(|p| p.baseline_power_w) {
        Some(b) if parts.iter().all(|p| p.baseline_power_w == Some(b)) => Some(b),
        _ => None,
    };
    let net_energy_kwh = if !parts.is_empty() && parts.iter().all(|p| p.net_energy_kwh.is_some()) {
        Some(parts.iter().filter_map(|p| p.net_energy_kwh).sum())
    } else {
        None
    };

    EnergySummary {
        experiment_id: label.to_owned(),
        start_ts: parts.iter().filter_map(|p| p.start_ts).min(),
        end_ts: parts.iter().filter_map(|p| p.end_ts).max(),
        session_count: parts.iter().map(|p| p.session_count).sum(),
        duration_s: parts.iter().map(|p| p.duration_s).sum(),
        sample_count: n,
        mean_power_w: mean.clamp(min, max.max(min)),
        std_power_w: std,
        min_power_w: min,
        max_power_w: max,
        energy_kwh_integrated: parts.iter().map(|p| p.energy_kwh_integrated).sum(),
        energy_kwh_counter: all_counter
            .then(|| parts.iter().filter_map(|p| p.energy_kwh_counter).sum()),
        counter_resets: parts.iter().map(|p| p.counter_resets).sum(),
        energy_kwh,
        energy_source,
        cost: tariff.cost(energy_kwh),
        currency: tariff.currency_label.clone(),
        carbon_g: tariff.carbon_g(energy_kwh),
        gap_count: parts.iter().map(|p| p.gap_count).sum(),
        gap_seconds: parts.iter().map(|p| p.gap_seconds).sum(),
        baseline_power_w,
        net_energy_kwh,
    }
}

/// Idle baseline: mean power and half the observed spread.
pub fn measure_baseline(window: &SeriesWindow) -> Result<BaselineStats, AnalyticsError> {
    let n = window.samples.len();
    let span_ms = window.t1 - window.t0;
    if n < BASELINE_MIN_SAMPLES || span_ms < BASELINE_MIN_WINDOW_MS {
        return Err(AnalyticsError::InsufficientData {
            samples: n,
            window_s: window.duration_s(),
        });
    }
    let m = moments(&window.samples, Exec::default());
    Ok(BaselineStats {
        plug_id: window.samples[0].plug_id.clone(),
        mean_w: m.mean,
        half_spread_w: (m.max - m.min) / 2.0,
        sample_count: n,
        window_s: window.duration_s(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Agree,
    Disagree,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub threshold: f64,
    /// Maximum allowed difference between the two windows' bounds; usually
    /// the coarser poll interval. `None` skips the check.
    pub window_tolerance_ms: Option<i64>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            threshold: AGREEMENT_THRESHOLD,
            window_tolerance_ms: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub relative_diff: f64,
    pub threshold: f64,
    pub verdict: Verdict,
}

/// Relative difference `|Ea - Eb| / max(Ea, Eb)` of the headline energies.
pub fn compare_measurements(
    a: &EnergySummary,
    b: &EnergySummary,
    opts: &CompareOptions,
) -> Result<Comparison, AnalyticsError> {
    if let Some(tol) = opts.window_tolerance_ms {
        let diff = |x: Option<i64>, y: Option<i64>| match (x, y) {
            (Some(x), Some(y)) => (x - y).abs(),
            _ => 0,
        };
        let d = diff(a.start_ts, b.start_ts).max(diff(a.end_ts, b.end_ts));
        if d > tol {
            return Err(AnalyticsError::WindowMismatch {
                diff_ms: d,
                tolerance_ms: tol,
            });
        }
    }
    let (ea, eb) = (a.energy_kwh, b.energy_kwh);
    let relative_diff = match (ea == 0.0, eb == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 1.0,
        _ => (ea - eb).abs() / ea.max(eb),
    };
    Ok(Comparison {
        relative_diff,
        threshold: opts.threshold,
        verdict: if relative_diff < opts.threshold {
            Verdict::Agree
        } else {
            Verdict::Disagree
        },
    })
}
