//! Summary statistics shared by the CLI, the acceptance suite and reports.

use serde::{Deserialize, Serialize};

/// Nearest-rank percentile: the smallest sample with at least `pct` percent
/// of samples at or below it. `None` for an empty slice.
pub fn percentile(samples: &[f64], pct: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Some(percentile_sorted(&v, pct))
}

/// [`percentile`] on data already sorted ascending and non-empty.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn mean(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        None
    } else {
        Some(samples.iter().sum::<f64>() / samples.len() as f64)
    }
}

/// The one-line run summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: usize,
    pub delivered: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Mean of symbols sent over source symbols, per frame.
    pub mean_overhead: f64,
}

impl RunSummary {
    /// `latencies_ms` holds one entry per frame, negative for undelivered
    /// frames; `overheads` one sent/K ratio per frame.
    pub fn from_frames(latencies_ms: &[f64], overheads: &[f64]) -> Self {
        let mut delivered: Vec<f64> = latencies_ms.iter().copied().filter(|&l| l >= 0.0).collect();
        delivered.sort_by(f64::total_cmp);
        let pick = |p: f64| if delivered.is_empty() { f64::NAN } else { percentile_sorted(&delivered, p) };
        Self {
            frames: latencies_ms.len(),
            delivered: delivered.len(),
            p50_ms: pick(50.0),
            p95_ms: pick(95.0),
            p99_ms: pick(99.0),
            max_ms: delivered.last().copied().unwrap_or(f64::NAN),
            mean_overhead: mean(overheads).unwrap_or(f64::NAN),
        }
    }

    pub fn all_delivered(&self) -> bool {
        self.frames == self.delivered
    }
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "frames delivered {}/{} | latency ms p50 {:.3} p95 {:.3} p99 {:.3} max {:.3} | mean overhead {:.4}",
            self.delivered, self.frames, self.p50_ms, self.p95_ms, self.p99_ms, self.max_ms, self.mean_overhead
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), Some(50.0));
        assert_eq!(percentile(&v, 95.0), Some(95.0));
        assert_eq!(percentile(&v, 99.0), Some(99.0));
        assert_eq!(percentile(&v, 100.0), Some(100.0));
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), Some(2.0));
        assert_eq!(percentile(&[7.0], 1.0), Some(7.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    #[test]
    fn summary_skips_undelivered() {
        let s = RunSummary::from_frames(&[10.0, -1.0, 30.0, 20.0], &[1.0, 2.0, 1.0, 1.0]);
        assert_eq!((s.frames, s.delivered), (4, 3));
        assert_eq!(s.p50_ms, 20.0);
        assert_eq!(s.max_ms, 30.0);
        assert_eq!(s.mean_overhead, 1.25);
        assert!(!s.all_delivered());
    }
}
