//! Sending side of the protocol, as a sans-I/O state machine.
//!
//! The engine is driven by three calls: [`Sender::submit_block`] when the
//! application hands over a block, [`Sender::on_feedback`] when a feedback
//! packet arrives, and [`Sender::next_packet`] whenever the transport can put
//! a datagram on the wire. Every call takes the current time; the engine never
//! reads a clock and never touches a socket.
//!
//! Symbols are never resent. A block gets a planned number of symbols up
//! front; feedback either confirms the block is recovered (its pending sends
//! are dropped) or shows a shortfall, which is covered with fresh symbols.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Codec, CodecError, SourceBlock, SymbolEncoder};
use crate::estimator::{Counters, LossEstimator, LossStats};
use crate::planner::{plan_initial, plan_topup, PlanParams};
use crate::wire::{write_data_packet, DataHeader, FeedbackPacket};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SenderError {
    #[error("stale feedback ignored")]
    StaleFeedback,
    #[error("block of {0} bytes does not fit the 32-bit size field")]
    BlockTooLarge(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Serve the oldest block with pending symbols first.
    #[default]
    OldestFirst,
    /// Rotate across blocks with pending symbols.
    RoundRobin,
}

/// At most `max_packets` data packets per `interval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pacing {
    pub max_packets: u32,
    pub interval: Duration,
}

#[derive(Debug, Clone)]
pub struct SenderConfig {
    pub symbol_size: u16,
    pub params: PlanParams,
    pub policy: SchedulePolicy,
    pub pacing: Option<Pacing>,
    /// Round-trip estimate. When feedback has covered none of a block's
    /// outstanding symbols within twice this (or the measured round trip plus
    /// four deviations, if larger) of the newest one being sent, they are
    /// presumed lost. Feedback silence longer than four of these is counted in
    /// [`SenderMetrics::feedback_silences`].
    pub rtt: Duration,
}

impl Default for SenderConfig {
    fn default() -> Self {
        Self {
            symbol_size: 1250,
            params: PlanParams::default(),
            policy: SchedulePolicy::OldestFirst,
            pacing: None,
            rtt: Duration::from_millis(40),
        }
    }
}

/// Symbols added for one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendPlan {
    pub block_id: u64,
    pub additional_symbols: u64,
}

/// Snapshot of one block's bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SenderBlockState {
    pub block_id: u64,
    pub k: u32,
    pub created_at: Duration,
    pub symbols_sent: u64,
    pub esi_next: u32,
    pub pending: u64,
    pub reported_received: u64,
    pub completed: bool,
}

/// A block the sender has stopped working on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinishedBlock {
    pub block_id: u64,
    pub k: u32,
    pub created_at: Duration,
    pub finished_at: Duration,
    pub symbols_sent: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SenderMetrics {
    pub blocks_submitted: u64,
    pub blocks_completed: u64,
    pub packets_sent: u64,
    pub feedback_received: u64,
    pub stale_feedback: u64,
    pub topups: u64,
    pub topup_symbols: u64,
    pub feedback_silences: u64,
}

/// A data packet ready for the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutgoingPacket {
    pub header: DataHeader,
    pub payload: Vec<u8>,
}

impl OutgoingPacket {
    pub fn to_datagram(&self) -> Vec<u8> {
        crate::wire::encode_data_packet(&self.header, &self.payload)
    }
}

/// Where encoded datagrams go.
pub trait PacketSink {
    fn send_datagram(&mut self, datagram: &[u8]);
}

impl PacketSink for Vec<Vec<u8>> {
    fn send_datagram(&mut self, datagram: &[u8]) {
        self.push(datagram.to_vec());
    }
}

struct SenderBlock {
    k: u32,
    len: u32,
    created_at: Duration,
    encoder: Box<dyn SymbolEncoder>,
    esi_next: u32,
    pending: u64,
    symbols_sent: u64,
    /// Sequence numbers and send times of symbols not yet covered by feedback.
    uncovered: VecDeque<(u64, Duration)>,
    covered: u64,
    reported_received: u64,
    ever_active: bool,
}

impl SenderBlock {
    /// No sent symbol covered for `timeout` after the newest one went out.
    fn stalled(&self, now: Duration, timeout: Duration) -> bool {
        self.uncovered.back().is_some_and(|&(_, at)| at + timeout <= now)
    }

    fn in_flight(&self, now: Duration, timeout: Duration) -> u64 {
        if self.stalled(now, timeout) {
            self.pending
        } else {
            self.uncovered.len() as u64 + self.pending
        }
    }
}

pub struct Sender {
    codec: Arc<dyn Codec>,
    cfg: SenderConfig,
    estimator: LossEstimator,
    blocks: BTreeMap<u64, SenderBlock>,
    next_block_id: u64,
    next_seq: u64,
    last_served: Option<u64>,
    window_start: Duration,
    sent_in_window: u32,
    last_feedback_at: Option<Duration>,
    srtt: Option<(Duration, Duration)>,
    silence_flagged: bool,
    finished: Vec<FinishedBlock>,
    metrics: SenderMetrics,
}

impl Sender {
    pub fn new(codec: Arc<dyn Codec>, cfg: SenderConfig) -> Self {
        let estimator = LossEstimator::new(cfg.params.alpha, cfg.params.min_sample_span);
        Self {
            codec,
            cfg,
            estimator,
            blocks: BTreeMap::new(),
            next_block_id: 0,
            next_seq: 0,
            last_served: None,
            window_start: Duration::ZERO,
            sent_in_window: 0,
            last_feedback_at: None,
            srtt: None,
            silence_flagged: false,
            finished: Vec::new(),
            metrics: SenderMetrics::default(),
        }
    }

    pub fn config(&self) -> &SenderConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &SenderMetrics {
        &self.metrics
    }

    pub fn loss_stats(&self) -> &LossStats {
        self.estimator.stats()
    }

    /// Global sequence number the next data packet will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn has_pending(&self) -> bool {
        self.blocks.values().any(|b| b.pending > 0)
    }

    pub fn outstanding_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_state(&self, block_id: u64) -> Option<SenderBlockState> {
        self.blocks.get(&block_id).map(|b| SenderBlockState {
            block_id,
            k: b.k,
            created_at: b.created_at,
            symbols_sent: b.symbols_sent,
            esi_next: b.esi_next,
            pending: b.pending,
            reported_received: b.reported_received,
            completed: false,
        })
    }

    /// Blocks that completed or were abandoned since the last call.
    pub fn take_finished(&mut self) -> Vec<FinishedBlock> {
        std::mem::take(&mut self.finished)
    }

    /// Admit a block. Block ids are assigned sequentially from zero.
    pub fn submit_block(&mut self, data: Vec<u8>, now: Duration) -> Result<SendPlan, SenderError> {
        let len = u32::try_from(data.len()).map_err(|_| SenderError::BlockTooLarge(data.len()))?;
        let block_id = self.next_block_id;
        let block = SourceBlock::new(block_id, data, self.cfg.symbol_size as usize)?;
        let k = block.k();
        let planned = plan_initial(k, self.estimator.stats(), &self.cfg.params);
        self.next_block_id += 1;
        self.blocks.insert(
            block_id,
            SenderBlock {
                k,
                len,
                created_at: now,
                encoder: self.codec.encoder(block),
                esi_next: 0,
                pending: planned,
                symbols_sent: 0,
                uncovered: VecDeque::new(),
                covered: 0,
                reported_received: 0,
                ever_active: false,
            },
        );
        self.metrics.blocks_submitted += 1;
        Ok(SendPlan {
            block_id,
            additional_symbols: planned,
        })
    }

    /// Update loss statistics and block progress from one feedback packet.
    ///
    /// Returns the top-ups scheduled in response. Feedback whose counters went
    /// backwards is dropped and reported as [`SenderError::StaleFeedback`].
    pub fn on_feedback(&mut self, fb: &FeedbackPacket, now: Duration) -> Result<Vec<SendPlan>, SenderError> {
        let prev = self.estimator.last_counters();
        let cur = Counters::new(fb.highest_seq_seen, fb.total_data_packets_received);
        if self.estimator.observe(cur).is_err() {
            self.metrics.stale_feedback += 1;
            return Err(SenderError::StaleFeedback);
        }
        self.metrics.feedback_received += 1;
        self.last_feedback_at = Some(now);
        self.silence_flagged = false;

        let Some(highest) = fb.highest_seq_seen else {
            return Ok(Vec::new());
        };
        let window_losses = (cur.span - prev.span).saturating_sub(cur.received - prev.received);

        let mut entries: Vec<(u64, u32)> = fb.entries.iter().map(|e| (e.block_id, e.symbols_received)).collect();
        entries.sort_unstable();

        let mut done = Vec::new();
        let mut newest_covered: Option<Duration> = None;
        for (&id, b) in self.blocks.iter_mut() {
            let mut newly = 0u64;
            while b.uncovered.front().is_some_and(|&(s, _)| s <= highest) {
                let (s, at) = b.uncovered.pop_front().expect("checked");
                if s == highest {
                    newest_covered = Some(at);
                }
                newly += 1;
            }
            b.covered += newly;
            match entries.binary_search_by_key(&id, |e| e.0) {
                Ok(i) => {
                    b.reported_received = b.reported_received.max(entries[i].1 as u64);
                    b.ever_active = true;
                }
                // Active blocks only leave the active list by being recovered.
                Err(_) if b.ever_active => done.push(id),
                // Never seen active: either nothing arrived or it all arrived
                // between two snapshots. More new symbols than window losses
                // means something arrived.
                Err(_) if newly > window_losses => done.push(id),
                Err(_) => {}
            }
        }
        if let Some(at) = newest_covered {
            let sample = now.saturating_sub(at);
            self.srtt = Some(match self.srtt {
                None => (sample, sample / 2),
                Some((srtt, var)) => {
                    ((srtt * 7 + sample) / 8, (var * 3 + sample.abs_diff(srtt)) / 4)
                }
            });
        }
        for id in done {
            let b = self.blocks.remove(&id).expect("listed above");
            self.metrics.blocks_completed += 1;
            self.finished.push(FinishedBlock {
                block_id: id,
                k: b.k,
                created_at: b.created_at,
                finished_at: now,
                symbols_sent: b.symbols_sent,
            });
        }

        Ok(self.plan_topups(now))
    }

    /// Top up blocks whose outstanding symbols have been presumed lost.
    ///
    /// Call periodically: when the tail of a block is lost, no later packet
    /// moves `highest_seq_seen` past it and feedback alone never reveals the
    /// shortfall.
    pub fn poll(&mut self, now: Duration) -> Vec<SendPlan> {
        self.plan_topups(now)
    }

    fn plan_topups(&mut self, now: Duration) -> Vec<SendPlan> {
        let stats = *self.estimator.stats();
        let measured = self.srtt.map_or(Duration::ZERO, |(srtt, var)| srtt + var * 4);
        let timeout = (self.cfg.rtt * 2).max(measured);
        let mut plans = Vec::new();
        for (&id, b) in self.blocks.iter_mut() {
            if b.covered == 0 && !b.stalled(now, timeout) {
                continue;
            }
            let in_flight = b.in_flight(now, timeout);
            let mut add = plan_topup(b.k, b.reported_received, in_flight, &stats, &self.cfg.params);
            if add == 0 && in_flight == 0 && b.ever_active && b.reported_received >= b.k as u64 {
                // Enough symbols arrived but they were not all independent.
                add = 1;
            }
            if add > 0 {
                b.pending += add;
                self.metrics.topups += 1;
                self.metrics.topup_symbols += add;
                plans.push(SendPlan {
                    block_id: id,
                    additional_symbols: add,
                });
            }
        }
        plans
    }

    /// Next data packet to transmit, or `None` when idle or pacing-limited.
    pub fn next_packet(&mut self, now: Duration) -> Option<OutgoingPacket> {
        self.check_silence(now);
        if let Some(p) = self.cfg.pacing {
            if now >= self.window_start + p.interval {
                self.window_start = now;
                self.sent_in_window = 0;
            }
            if self.sent_in_window >= p.max_packets {
                return None;
            }
        }
        let id = self.pick_block()?;
        let b = self.blocks.get_mut(&id).expect("picked from map");
        let esi = b.esi_next;
        b.esi_next += 1;
        b.pending -= 1;
        b.symbols_sent += 1;
        let seq = self.next_seq;
        self.next_seq += 1;
        b.uncovered.push_back((seq, now));
        let mut payload = Vec::new();
        b.encoder.write_symbol(esi, &mut payload);
        let header = DataHeader {
            global_seq: seq,
            block_id: id,
            esi,
            block_size_bytes: b.len,
            symbol_size: self.cfg.symbol_size,
        };
        self.last_served = Some(id);
        self.sent_in_window += 1;
        self.metrics.packets_sent += 1;
        Some(OutgoingPacket { header, payload })
    }

    /// Encode every packet currently sendable into `sink`. Returns the count.
    pub fn flush_into(&mut self, now: Duration, sink: &mut dyn PacketSink) -> usize {
        let mut n = 0;
        let mut buf = Vec::new();
        while let Some(pkt) = self.next_packet(now) {
            buf.clear();
            write_data_packet(&pkt.header, &pkt.payload, &mut buf);
            sink.send_datagram(&buf);
            n += 1;
        }
        n
    }

    /// Give up on blocks older than `max_age` (e.g. the receiver went away).
    pub fn abandon_older_than(&mut self, now: Duration, max_age: Duration) -> usize {
        let stale: Vec<u64> = self
            .blocks
            .iter()
            .filter(|(_, b)| now.saturating_sub(b.created_at) > max_age)
            .map(|(&id, _)| id)
            .collect();
        for id in &stale {
            let b = self.blocks.remove(id).expect("listed above");
            self.finished.push(FinishedBlock {
                block_id: *id,
                k: b.k,
                created_at: b.created_at,
                finished_at: now,
                symbols_sent: b.symbols_sent,
            });
        }
        stale.len()
    }

    fn pick_block(&self) -> Option<u64> {
        let mut ready = self.blocks.iter().filter(|(_, b)| b.pending > 0).map(|(&id, _)| id);
        match self.cfg.policy {
            SchedulePolicy::OldestFirst => ready.next(),
            SchedulePolicy::RoundRobin => {
                let all: Vec<u64> = ready.collect();
                match self.last_served {
                    Some(last) => all.iter().copied().find(|&id| id > last).or(all.first().copied()),
                    None => all.first().copied(),
                }
            }
        }
    }

    fn check_silence(&mut self, now: Duration) {
        if self.silence_flagged || self.blocks.is_empty() {
            return;
        }
        let since = self.last_feedback_at.unwrap_or_else(|| {
            self.blocks.values().map(|b| b.created_at).min().unwrap_or(now)
        });
        if now.saturating_sub(since) > self.cfg.rtt * 4 {
            self.silence_flagged = true;
            self.metrics.feedback_silences += 1;
        }
    }
}
