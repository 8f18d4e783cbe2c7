//! How many symbols to send for a block.
//!
//! The planner treats arrivals of `n` symbols as Binomial(n, 1-p) and asks
//! for a Gaussian lower tail bound to clear a target of `K + surplus`:
//!
//! ```text
//! E-(n) = n(1-p) - z_bin * sqrt(n p (1-p))   >=   target
//! ```
//!
//! where `p` is the smoothed loss estimate plus `z_var` standard deviations
//! of the loss-rate variance, capped at `p_cap`. Writing `s = sqrt(n)` turns
//! the bound into a quadratic in `s` with exactly one positive root, so the
//! smallest admissible `n` is `ceil(x^2)` for that root `x`.

use serde::{Deserialize, Serialize};

use crate::estimator::LossStats;

/// Knobs for the redundancy planner and the loss estimator feeding it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanParams {
    /// Standard deviations of loss-rate variation added to the loss estimate.
    pub z_var: f64,
    /// Standard deviations of binomial arrival noise to plan for.
    pub z_bin: f64,
    /// Fixed surplus symbols over K; `None` means `max(2, ceil(0.005 K))`.
    pub c_extra: Option<u32>,
    /// Upper bound on the loss rate used for planning. Must be below 1.
    pub p_cap: f64,
    /// EWMA weight of the loss estimator.
    pub alpha: f64,
    /// Minimum number of covered sequence numbers per loss sample.
    pub min_sample_span: u64,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            z_var: 1.0,
            z_bin: 2.0,
            c_extra: None,
            p_cap: 0.9,
            alpha: 0.1,
            min_sample_span: 64,
        }
    }
}

impl PlanParams {
    /// All headroom switched off: send exactly K at zero loss.
    pub fn no_headroom() -> Self {
        Self {
            z_var: 0.0,
            z_bin: 0.0,
            c_extra: Some(0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.z_var >= 0.0 && self.z_var.is_finite()) {
            return Err(format!("z_var must be a finite value >= 0, got {}", self.z_var));
        }
        if !(self.z_bin >= 0.0 && self.z_bin.is_finite()) {
            return Err(format!("z_bin must be a finite value >= 0, got {}", self.z_bin));
        }
        if !(0.0..1.0).contains(&self.p_cap) {
            return Err(format!("p_cap must be in [0, 1), got {}", self.p_cap));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("alpha must be in (0, 1], got {}", self.alpha));
        }
        if self.min_sample_span == 0 {
            return Err("min_sample_span must be at least 1".into());
        }
        Ok(())
    }

    /// Surplus symbols planned on top of K.
    pub fn surplus(&self, k: u32) -> u32 {
        self.c_extra
            .unwrap_or_else(|| 2.max((0.005 * k as f64).ceil() as u32))
    }

    pub fn target(&self, k: u32) -> u64 {
        k as u64 + self.surplus(k) as u64
    }

    /// Loss rate the planner designs for.
    pub fn planning_loss(&self, stats: &LossStats) -> f64 {
        let p = stats.p_hat + self.z_var * stats.rate_variance().sqrt();
        p.clamp(0.0, self.p_cap)
    }
}

/// Lower tail bound on arrivals out of `n` sent symbols.
pub fn arrivals_lower_bound(n: u64, p: f64, z_bin: f64) -> f64 {
    let n = n as f64;
    let q = 1.0 - p;
    n * q - z_bin * (n * p * q).sqrt()
}

/// Whether `n` sent symbols satisfy the tail bound for `target` arrivals.
pub fn tail_bound_holds(n: u64, target: u64, p: f64, z_bin: f64) -> bool {
    arrivals_lower_bound(n, p, z_bin) >= target as f64
}

/// Smallest `n` whose arrival lower bound reaches `target`, via the closed form.
pub fn min_symbols(target: u64, p: f64, z_bin: f64) -> u64 {
    if target == 0 {
        return 0;
    }
    let q = 1.0 - p;
    let b = z_bin * (p * q).sqrt();
    let x = (b + (b * b + 4.0 * q * target as f64).sqrt()) / (2.0 * q);
    let mut n = (x * x).ceil() as u64;
    // The root is exact in real arithmetic; nudge for rounding at the boundary.
    while n > target && tail_bound_holds(n - 1, target, p, z_bin) {
        n -= 1;
    }
    while !tail_bound_holds(n, target, p, z_bin) {
        n += 1;
    }
    n
}

/// Initial number of symbols for a block of `k` source symbols.
pub fn plan_initial(k: u32, stats: &LossStats, params: &PlanParams) -> u64 {
    let p = params.planning_loss(stats);
    min_symbols(params.target(k), p, params.z_bin)
}

/// Extra symbols needed for a block given what feedback reported as received
/// and what is still in flight (sent or queued, not yet covered by feedback).
pub fn plan_topup(k: u32, reported_received: u64, in_flight: u64, stats: &LossStats, params: &PlanParams) -> u64 {
    let target = params.target(k);
    if reported_received >= target {
        return 0;
    }
    let p = params.planning_loss(stats);
    let needed = min_symbols(target - reported_received, p, params.z_bin);
    needed.saturating_sub(in_flight)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(p: f64) -> LossStats {
        LossStats::fixed(p, 0.0)
    }

    fn params(c_extra: u32) -> PlanParams {
        PlanParams {
            c_extra: Some(c_extra),
            ..PlanParams::default()
        }
    }

    // Independent oracle: walk n upward from the target.
    fn scan(target: u64, p: f64, z: f64) -> u64 {
        let mut n = target;
        while !tail_bound_holds(n, target, p, z) {
            n += 1;
        }
        n
    }

    #[test]
    fn initial_examples() {
        assert_eq!(plan_initial(500, &fixed(0.0), &params(2)), 502);
        assert_eq!(plan_initial(500, &fixed(0.1), &params(2)), 574);
        let stats = LossStats::fixed(0.05, 0.0025);
        assert_eq!(plan_initial(100, &stats, &params(2)), 121);
    }

    #[test]
    fn default_surplus() {
        let p = PlanParams::default();
        assert_eq!(p.surplus(1), 2);
        assert_eq!(p.surplus(400), 2);
        assert_eq!(p.surplus(500), 3);
        assert_eq!(p.surplus(1000), 5);
    }

    #[test]
    fn topup_examples() {
        let p = params(2);
        assert_eq!(plan_topup(500, 502, 0, &fixed(0.3), &p), 0);
        assert_eq!(plan_topup(500, 600, 10, &fixed(0.3), &p), 0);
        assert_eq!(plan_topup(500, 490, 0, &fixed(0.0), &p), 12);
        assert_eq!(plan_topup(500, 400, 50, &fixed(0.1), &p), 71);
        // Enough already in flight.
        assert_eq!(plan_topup(500, 400, 200, &fixed(0.1), &p), 0);
    }

    #[test]
    fn closed_form_matches_scan_on_grid() {
        for step in 0..=90 {
            let p = step as f64 / 100.0;
            for t in [1u64, 2, 5, 10, 50, 100, 500, 1000] {
                let n = min_symbols(t, p, 2.0);
                assert_eq!(n, scan(t, p, 2.0), "p={p} T={t}");
                assert!(!tail_bound_holds(n - 1, t, p, 2.0) || n - 1 < t);
            }
        }
    }

    #[test]
    fn degenerate_headroom_sends_k() {
        let p = PlanParams::no_headroom();
        for k in [1, 7, 500, 4096] {
            assert_eq!(plan_initial(k, &fixed(0.0), &p), k as u64);
        }
    }

    #[test]
    fn planning_loss_is_capped() {
        let p = PlanParams::default();
        assert_eq!(p.planning_loss(&LossStats::fixed(1.0, 0.25)), 0.9);
        let huge = plan_initial(100, &LossStats::fixed(1.0, 0.0), &p);
        assert!(huge > 1000);
    }

    #[test]
    fn monotone_in_loss_and_k() {
        let p = PlanParams::default();
        let mut prev = 0;
        for step in 0..=90 {
            let n = plan_initial(200, &fixed(step as f64 / 100.0), &p);
            assert!(n >= prev);
            prev = n;
        }
        let mut prev = 0;
        for k in 1..600 {
            let n = plan_initial(k, &fixed(0.07), &p);
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn param_validation() {
        assert!(PlanParams::default().validate().is_ok());
        assert!(PlanParams { p_cap: 1.0, ..PlanParams::default() }.validate().is_err());
        assert!(PlanParams { z_bin: -1.0, ..PlanParams::default() }.validate().is_err());
        assert!(PlanParams { alpha: 0.0, ..PlanParams::default() }.validate().is_err());
    }
}
