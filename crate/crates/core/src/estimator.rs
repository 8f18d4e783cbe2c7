//! Packet-loss estimation from receiver feedback.
//!
//! Each feedback carries two cumulative counters: the highest global sequence
//! number seen and the number of data packets received. The difference
//! between two snapshots gives a loss fraction for the packets sent in
//! between; [`LossStats`] smooths those fractions and their spread with an
//! exponentially weighted moving average.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest variance a quantity confined to [0, 1] can have.
pub const MAX_VARIANCE: f64 = 0.25;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorError {
    #[error("stale feedback: counters went backwards")]
    StaleFeedback,
}

/// Cumulative receiver counters as carried by a feedback packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    /// Number of sequence numbers covered so far, i.e. `highest_seq_seen + 1`,
    /// or zero before the first arrival.
    pub span: u64,
    pub received: u64,
}

impl Counters {
    pub fn new(highest_seq_seen: Option<u64>, received: u64) -> Self {
        Self {
            span: highest_seq_seen.map_or(0, |h| h + 1),
            received,
        }
    }
}

/// Loss fraction between two counter snapshots.
///
/// Returns `Ok(None)` when no new sequence numbers were covered. More
/// arrivals than covered sequence numbers (reordering across a feedback
/// boundary) clamps to zero loss.
pub fn loss_sample(prev: Counters, cur: Counters) -> Result<Option<f64>, EstimatorError> {
    if cur.span < prev.span || cur.received < prev.received {
        return Err(EstimatorError::StaleFeedback);
    }
    let d_span = cur.span - prev.span;
    if d_span == 0 {
        return Ok(None);
    }
    let d_recv = cur.received - prev.received;
    Ok(Some((1.0 - d_recv as f64 / d_span as f64).clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub p_hat: f64,
    pub var_hat: f64,
    pub alpha: f64,
    /// Smoothed number of packets per sample; zero when unknown. Used to
    /// separate binomial sampling noise from genuine loss-rate variation.
    pub span_hat: f64,
}

impl LossStats {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        Self {
            p_hat: 0.0,
            var_hat: 0.0,
            alpha,
            span_hat: 0.0,
        }
    }

    /// Fixed statistics with no sample history, for planning by hand.
    pub fn fixed(p_hat: f64, var_hat: f64) -> Self {
        Self {
            p_hat: p_hat.clamp(0.0, 1.0),
            var_hat: var_hat.clamp(0.0, MAX_VARIANCE),
            alpha: 0.1,
            span_hat: 0.0,
        }
    }

    /// `p' = (1-a) p + a s`, then `v' = (1-a) v + a (s - p')^2`.
    pub fn update(&mut self, sample: f64) {
        let s = sample.clamp(0.0, 1.0);
        let a = self.alpha;
        self.p_hat = ((1.0 - a) * self.p_hat + a * s).clamp(0.0, 1.0);
        let d = s - self.p_hat;
        self.var_hat = ((1.0 - a) * self.var_hat + a * d * d).clamp(0.0, MAX_VARIANCE);
    }

    /// Like [`update`](Self::update), also tracking how many packets the sample covered.
    pub fn update_with_span(&mut self, sample: f64, span: u64) {
        self.update(sample);
        let a = self.alpha;
        self.span_hat = if self.span_hat == 0.0 {
            span as f64
        } else {
            (1.0 - a) * self.span_hat + a * span as f64
        };
    }

    /// Variance of the loss rate itself: the sample variance minus the
    /// binomial noise expected from samples of `span_hat` packets. Equals
    /// `var_hat` when the sample size is unknown.
    pub fn rate_variance(&self) -> f64 {
        if self.span_hat <= 0.0 {
            return self.var_hat;
        }
        let noise = self.p_hat * (1.0 - self.p_hat) / self.span_hat;
        (self.var_hat - noise).max(0.0)
    }
}

/// Turns a stream of feedback counters into loss samples.
///
/// Samples are taken once at least `min_span` new sequence numbers have been
/// covered since the previous sample, so a run of tiny feedback intervals
/// does not turn into a run of 0/1 samples.
#[derive(Debug, Clone)]
pub struct LossEstimator {
    stats: LossStats,
    anchor: Counters,
    last: Counters,
    min_span: u64,
    samples: u64,
}

impl LossEstimator {
    pub fn new(alpha: f64, min_span: u64) -> Self {
        Self {
            stats: LossStats::new(alpha),
            anchor: Counters::default(),
            last: Counters::default(),
            min_span: min_span.max(1),
            samples: 0,
        }
    }

    pub fn stats(&self) -> &LossStats {
        &self.stats
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn last_counters(&self) -> Counters {
        self.last
    }

    /// Feed the counters of one feedback packet. Stale counters are rejected
    /// and leave the estimator untouched.
    pub fn observe(&mut self, cur: Counters) -> Result<Option<f64>, EstimatorError> {
        if cur.span < self.last.span || cur.received < self.last.received {
            return Err(EstimatorError::StaleFeedback);
        }
        self.last = cur;
        if cur.span - self.anchor.span < self.min_span {
            return Ok(None);
        }
        let sample = loss_sample(self.anchor, cur)?;
        if let Some(s) = sample {
            self.stats.update_with_span(s, cur.span - self.anchor.span);
            self.samples += 1;
        }
        self.anchor = cur;
        Ok(sample)
    }
}
