//! Loss rate as a function of time.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Straight lines between breakpoints.
    #[default]
    Linear,
    /// Each breakpoint's rate holds until the next breakpoint.
    Step,
}

/// Piecewise loss schedule. Before the first breakpoint the first rate
/// applies; after the last, the last rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTrace {
    /// `(time_s, loss_rate)` pairs with strictly increasing times.
    pub breakpoints: Vec<(f64, f64)>,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl LossTrace {
    pub fn constant(rate: f64) -> Self {
        Self {
            breakpoints: vec![(0.0, rate)],
            interpolation: Interpolation::Step,
        }
    }

    /// Constant-rate segments of equal length starting at time zero.
    pub fn steps(rates: &[f64], segment_s: f64) -> Self {
        Self {
            breakpoints: rates.iter().enumerate().map(|(i, &r)| (i as f64 * segment_s, r)).collect(),
            interpolation: Interpolation::Step,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.breakpoints.is_empty() {
            return Err("loss trace needs at least one breakpoint".into());
        }
        for &(t, r) in &self.breakpoints {
            if !t.is_finite() || !(0.0..=1.0).contains(&r) {
                return Err(format!("bad breakpoint ({t}, {r}): rates must be in [0, 1]"));
            }
        }
        if self.breakpoints.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err("breakpoint times must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn rate_at(&self, t_s: f64) -> f64 {
        let bp = &self.breakpoints;
        let Some(&(t0, r0)) = bp.first() else {
            return 0.0;
        };
        if t_s <= t0 {
            return r0;
        }
        // Index of the first breakpoint strictly after t_s.
        let i = bp.partition_point(|&(t, _)| t <= t_s);
        if i == bp.len() {
            return bp[i - 1].1;
        }
        let (ta, ra) = bp[i - 1];
        match self.interpolation {
            Interpolation::Step => ra,
            Interpolation::Linear => {
                let (tb, rb) = bp[i];
                ra + (rb - ra) * (t_s - ta) / (tb - ta)
            }
        }
    }

    /// Constant-rate segments `(start_s, end_s, rate)` of a step schedule,
    /// the last one ending at `until_s`. Empty for linear traces.
    pub fn segments(&self, until_s: f64) -> Vec<(f64, f64, f64)> {
        if self.interpolation != Interpolation::Step {
            return Vec::new();
        }
        let bp = &self.breakpoints;
        (0..bp.len())
            .map(|i| {
                let end = bp.get(i + 1).map_or(until_s, |b| b.0);
                (bp[i].0, end, bp[i].1)
            })
            .filter(|s| s.0 < until_s)
            .collect()
    }
}

/// The varying-loss trace of the synthetic 150 Mbps experiment.
///
/// Lossless for half a second, a spike peaking at 0.83 s that falls off
/// quickly by 1.33 s, then a low wandering background. Levels other than the
/// timing of the spike are read off a plot and are approximate; `peak` scales
/// the whole trace.
pub fn fig2_trace(peak: f64) -> LossTrace {
    const SHAPE: [(f64, f64); 9] = [
        (0.0, 0.0),
        (0.5, 0.0),
        (0.83, 1.0),
        (1.33, 1.0 / 3.0),
        (2.5, 1.0 / 6.0),
        (4.0, 0.8 / 3.0),
        (5.5, 0.1),
        (7.0, 0.2),
        (8.0, 0.2 / 3.0),
    ];
    LossTrace {
        breakpoints: SHAPE.iter().map(|&(t, r)| (t, (r * peak).clamp(0.0, 1.0))).collect(),
        interpolation: Interpolation::Linear,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_interpolation() {
        let t = LossTrace {
            breakpoints: vec![(1.0, 0.0), (2.0, 0.4)],
            interpolation: Interpolation::Linear,
        };
        assert_eq!(t.rate_at(0.0), 0.0);
        assert!((t.rate_at(1.5) - 0.2).abs() < 1e-12);
        assert_eq!(t.rate_at(5.0), 0.4);
    }

    #[test]
    fn step_schedule() {
        let t = LossTrace::steps(&[0.003, 0.01, 0.03], 10.0);
        assert_eq!(t.rate_at(9.999), 0.003);
        assert_eq!(t.rate_at(10.0), 0.01);
        assert_eq!(t.rate_at(100.0), 0.03);
        assert_eq!(t.segments(30.0), vec![(0.0, 10.0, 0.003), (10.0, 20.0, 0.01), (20.0, 30.0, 0.03)]);
    }

    #[test]
    fn fig2_shape() {
        let t = fig2_trace(0.3);
        assert!(t.validate().is_ok());
        assert_eq!(t.rate_at(0.25), 0.0);
        assert_eq!(t.rate_at(0.5), 0.0);
        assert!((t.rate_at(0.83) - 0.3).abs() < 1e-12);
        assert!((t.rate_at(1.33) - 0.1).abs() < 1e-12);
        assert!(t.rate_at(0.7) > 0.0 && t.rate_at(0.7) < 0.3);
        let max_after = (134..800).map(|i| t.rate_at(i as f64 / 100.0)).fold(0.0, f64::max);
        assert!(max_after <= 0.1 + 1e-12);
    }

    #[test]
    fn validation() {
        assert!(LossTrace { breakpoints: vec![], interpolation: Interpolation::Linear }.validate().is_err());
        assert!(LossTrace { breakpoints: vec![(0.0, 1.5)], interpolation: Interpolation::Linear }.validate().is_err());
        assert!(LossTrace { breakpoints: vec![(1.0, 0.1), (1.0, 0.2)], interpolation: Interpolation::Step }.validate().is_err());
    }
}
