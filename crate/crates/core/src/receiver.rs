//! Receiving side of the protocol, as a sans-I/O state machine.
//!
//! Data packets are fed in with [`Receiver::on_data`]; recovered blocks come
//! out of [`Receiver::take_delivered`] in completion order, and
//! [`Receiver::make_feedback`] snapshots the counters and per-block progress
//! the sender needs. Block state is created lazily on the first symbol and
//! dropped on recovery or expiry.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::codec::{AddOutcome, Codec, CodecError, SymbolDecoder};
use crate::wire::{decode_data_packet, DataHeader, FeedbackEntry, FeedbackPacket, ParseError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReceiverError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("block {block_id}: header disagrees with earlier packets")]
    InconsistentHeader { block_id: u64 },
}

#[derive(Debug, Clone)]
pub struct ReceiverConfig {
    /// Blocks decoded in parallel; the oldest is evicted beyond this.
    pub max_active_blocks: usize,
    /// Incomplete blocks with no new symbol for this long are dropped.
    pub expiry: Duration,
    /// Retired block ids remembered individually above the contiguous watermark.
    pub max_retired: usize,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            max_active_blocks: 1024,
            expiry: Duration::from_millis(400),
            max_retired: 4096,
        }
    }
}

/// What one data packet did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketOutcome {
    /// Added to an active block, which is still incomplete.
    Accepted(AddOutcome),
    /// This symbol completed the block; it is ready in `take_delivered`.
    Completed,
    /// The block was already delivered or dropped.
    Late,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredBlock {
    pub block_id: u64,
    pub data: Vec<u8>,
    pub first_symbol_at: Duration,
    pub completed_at: Duration,
    /// Distinct symbols held when the block completed.
    pub symbols_received: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReceiverMetrics {
    pub packets_received: u64,
    pub late_symbols: u64,
    pub duplicate_symbols: u64,
    pub dependent_symbols: u64,
    pub malformed_packets: u64,
    pub blocks_delivered: u64,
    pub blocks_expired: u64,
    pub blocks_evicted: u64,
}

struct ActiveBlock {
    decoder: Box<dyn SymbolDecoder>,
    header: DataHeader,
    first_symbol_at: Duration,
    last_symbol_at: Duration,
}

pub struct Receiver {
    codec: Arc<dyn Codec>,
    cfg: ReceiverConfig,
    active: BTreeMap<u64, ActiveBlock>,
    /// Every block id below this is retired.
    retired_below: u64,
    retired: BTreeSet<u64>,
    highest_seq: Option<u64>,
    total_received: u64,
    delivered: Vec<DeliveredBlock>,
    metrics: ReceiverMetrics,
}

impl Receiver {
    pub fn new(codec: Arc<dyn Codec>, cfg: ReceiverConfig) -> Self {
        Self {
            codec,
            cfg,
            active: BTreeMap::new(),
            retired_below: 0,
            retired: BTreeSet::new(),
            highest_seq: None,
            total_received: 0,
            delivered: Vec::new(),
            metrics: ReceiverMetrics::default(),
        }
    }

    pub fn metrics(&self) -> &ReceiverMetrics {
        &self.metrics
    }

    pub fn highest_seq_seen(&self) -> Option<u64> {
        self.highest_seq
    }

    pub fn total_received(&self) -> u64 {
        self.total_received
    }

    pub fn active_blocks(&self) -> usize {
        self.active.len()
    }

    pub fn is_retired(&self, block_id: u64) -> bool {
        block_id < self.retired_below || self.retired.contains(&block_id)
    }

    /// Parse and process one datagram.
    pub fn on_datagram(&mut self, buf: &[u8], now: Duration) -> Result<PacketOutcome, ReceiverError> {
        match decode_data_packet(buf) {
            Ok((header, payload)) => self.on_data(&header, payload, now),
            Err(e) => {
                self.metrics.malformed_packets += 1;
                Err(e.into())
            }
        }
    }

    /// Process one parsed data packet.
    ///
    /// Every well-formed packet counts toward the loss counters, including
    /// late and duplicate ones: they measure the network, not the decoder.
    pub fn on_data(&mut self, header: &DataHeader, payload: &[u8], now: Duration) -> Result<PacketOutcome, ReceiverError> {
        self.total_received += 1;
        self.highest_seq = Some(self.highest_seq.map_or(header.global_seq, |h| h.max(header.global_seq)));
        self.metrics.packets_received += 1;
        let id = header.block_id;

        if !self.active.contains_key(&id) {
            if self.is_retired(id) {
                self.metrics.late_symbols += 1;
                return Ok(PacketOutcome::Late);
            }
            if self.active.len() >= self.cfg.max_active_blocks {
                let oldest = *self.active.keys().next().expect("non-empty at capacity");
                self.active.remove(&oldest);
                self.retire(oldest);
                self.metrics.blocks_evicted += 1;
            }
            let decoder = self
                .codec
                .decoder(id, header.block_size_bytes as usize, header.symbol_size as usize);
            self.active.insert(
                id,
                ActiveBlock {
                    decoder,
                    header: *header,
                    first_symbol_at: now,
                    last_symbol_at: now,
                },
            );
        }

        let block = self.active.get_mut(&id).expect("inserted above");
        if block.header.block_size_bytes != header.block_size_bytes || block.header.symbol_size != header.symbol_size {
            self.metrics.malformed_packets += 1;
            return Err(ReceiverError::InconsistentHeader { block_id: id });
        }
        let outcome = match block.decoder.add(header.esi, payload) {
            Ok(o) => o,
            Err(e) => {
                self.metrics.malformed_packets += 1;
                return Err(e.into());
            }
        };
        block.last_symbol_at = now;
        match outcome {
            AddOutcome::Duplicate => self.metrics.duplicate_symbols += 1,
            AddOutcome::Dependent => self.metrics.dependent_symbols += 1,
            AddOutcome::Innovative => {}
        }
        if !block.decoder.is_complete() {
            return Ok(PacketOutcome::Accepted(outcome));
        }

        let mut block = self.active.remove(&id).expect("present");
        let data = block.decoder.try_finish().expect("rank reached K");
        self.delivered.push(DeliveredBlock {
            block_id: id,
            data,
            first_symbol_at: block.first_symbol_at,
            completed_at: now,
            symbols_received: block.decoder.received(),
        });
        self.metrics.blocks_delivered += 1;
        self.retire(id);
        Ok(PacketOutcome::Completed)
    }

    /// Recovered blocks since the last call, in completion order.
    pub fn take_delivered(&mut self) -> Vec<DeliveredBlock> {
        std::mem::take(&mut self.delivered)
    }

    /// Drop incomplete blocks idle for longer than the expiry. Returns their ids.
    pub fn expire(&mut self, now: Duration) -> Vec<u64> {
        let expiry = self.cfg.expiry;
        let stale: Vec<u64> = self
            .active
            .iter()
            .filter(|(_, b)| now.saturating_sub(b.last_symbol_at) > expiry)
            .map(|(&id, _)| id)
            .collect();
        for &id in &stale {
            self.active.remove(&id);
            self.retire(id);
            self.metrics.blocks_expired += 1;
        }
        stale
    }

    /// Feedback snapshot: counters plus every active block, ascending by id.
    pub fn make_feedback(&self) -> FeedbackPacket {
        FeedbackPacket {
            highest_seq_seen: self.highest_seq,
            total_data_packets_received: self.total_received,
            entries: self
                .active
                .iter()
                .map(|(&block_id, b)| FeedbackEntry {
                    block_id,
                    symbols_received: b.decoder.received(),
                })
                .collect(),
        }
    }

    fn retire(&mut self, id: u64) {
        if id < self.retired_below {
            return;
        }
        self.retired.insert(id);
        while self.retired.remove(&self.retired_below) {
            self.retired_below += 1;
        }
        // Ids that never showed up keep the watermark from moving; past the
        // cap, treat everything below the oldest remembered id as retired.
        while self.retired.len() > self.cfg.max_retired {
            let first = self.retired.pop_first().expect("over cap");
            self.retired_below = first + 1;
            while self.retired.remove(&self.retired_below) {
                self.retired_below += 1;
            }
        }
    }
}

/// Releases delivered blocks in block-id order for applications that need it.
///
/// Blocks the receiver gave up on must be reported with [`skip`](Self::skip)
/// or later blocks stay held back.
#[derive(Debug, Default)]
pub struct InOrderBuffer {
    next: u64,
    held: BTreeMap<u64, DeliveredBlock>,
    skipped: BTreeSet<u64>,
}

impl InOrderBuffer {
    pub fn new(first_block_id: u64) -> Self {
        Self {
            next: first_block_id,
            ..Self::default()
        }
    }

    pub fn push(&mut self, block: DeliveredBlock) -> Vec<DeliveredBlock> {
        if block.block_id >= self.next {
            self.held.insert(block.block_id, block);
        }
        self.release()
    }

    pub fn skip(&mut self, block_id: u64) -> Vec<DeliveredBlock> {
        if block_id >= self.next {
            self.skipped.insert(block_id);
        }
        self.release()
    }

    pub fn held(&self) -> usize {
        self.held.len()
    }

    fn release(&mut self) -> Vec<DeliveredBlock> {
        let mut out = Vec::new();
        loop {
            if let Some(b) = self.held.remove(&self.next) {
                out.push(b);
            } else if !self.skipped.remove(&self.next) {
                break;
            }
            self.next += 1;
        }
        out
    }
}
