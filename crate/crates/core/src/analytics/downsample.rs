use super::SeriesWindow;
use crate::model::PowerSample;
use crate::par::{self, Exec};

/// Min/max-per-bucket reduction for plotting.
///
/// Keeps the first and last sample and, for each of `max_points - 1` equal
/// index buckets over the interior, the lowest and highest sample in time
/// order. Output has at most `2 * max_points` points and contains every
/// bucket's extrema, hence the global extrema.
pub fn downsample_indices(samples: &[PowerSample], max_points: usize) -> Vec<usize> {
    downsample_indices_with(samples, max_points, Exec::default())
}

pub fn downsample_indices_with(samples: &[PowerSample], max_points: usize, exec: Exec) -> Vec<usize> {
    let n = samples.len();
    let max_points = max_points.max(2);
    if n <= max_points {
        return (0..n).collect();
    }
    let interior = n - 2;
    let buckets = max_points - 1;
    let bounds = |b: usize| 1 + b * interior / buckets;
    let picked = par::map(exec, &(0..buckets).collect::<Vec<_>>(), |&b| {
        let (lo, hi) = (bounds(b), bounds(b + 1));
        if lo >= hi {
            return (None, None);
        }
        let mut min_i = lo;
        let mut max_i = lo;
        for i in lo..hi {
            if samples[i].power_w < samples[min_i].power_w {
                min_i = i;
            }
            if samples[i].power_w > samples[max_i].power_w {
                max_i = i;
            }
        }
        if min_i == max_i {
            (Some(min_i), None)
        } else {
            (Some(min_i.min(max_i)), Some(min_i.max(max_i)))
        }
    });
    let mut out = Vec::with_capacity(2 * max_points);
    out.push(0);
    for (a, b) in picked {
        out.extend(a);
        out.extend(b);
    }
    out.push(n - 1);
    out
}

pub fn downsample(window: &SeriesWindow, max_points: usize) -> SeriesWindow {
    let idx = downsample_indices(window.samples(), max_points);
    let samples = idx.into_iter().map(|i| window.samples()[i].clone()).collect();
    SeriesWindow {
        samples,
        t0: window.t0(),
        t1: window.t1(),
        interval_ms: None,
    }
}
