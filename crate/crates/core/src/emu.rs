//! In-process impaired network: the real engines exchange wire-format
//! datagrams through a path with delay, seeded random loss and an optional
//! rate cap, all on a virtual clock.
//!
//! The forward link is a single serializing queue: the sender hands it the
//! next packet only once the previous one is on the wire, so block priority
//! is decided as late as possible. Feedback goes back over a separate path
//! with its own delay.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodecKind;
use crate::planner::PlanParams;
use crate::receiver::{Receiver, ReceiverConfig};
use crate::sender::{SchedulePolicy, Sender, SenderConfig};
use crate::trace::LossTrace;
use crate::wire::{decode_data_packet, decode_feedback, encode_feedback, DATA_HEADER_LEN};
use crate::ConfigError;

/// The application's frame stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamProfile {
    pub fps: f64,
    /// Frame sizes in bytes, repeated for the whole run.
    pub frame_size_pattern: Vec<u32>,
    pub duration_s: f64,
}

impl StreamProfile {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(ConfigError(format!("fps must be positive, got {}", self.fps)));
        }
        if self.frame_size_pattern.is_empty() || self.frame_size_pattern.contains(&0) {
            return Err(ConfigError("frame_size_pattern needs at least one size, all >= 1 byte".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(ConfigError("duration_s must be positive".into()));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_s * self.fps).round().max(1.0) as u64
    }

    pub fn frame_size(&self, frame: u64) -> u32 {
        self.frame_size_pattern[(frame % self.frame_size_pattern.len() as u64) as usize]
    }

    pub fn frame_time(&self, frame: u64) -> Duration {
        Duration::from_nanos((frame as f64 * 1e9 / self.fps).round() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpairmentProfile {
    pub forward_delay_ms: f64,
    pub reverse_delay_ms: f64,
    /// Loss schedule of the sender-to-receiver path.
    pub loss: LossTrace,
    /// Loss rate of the feedback path.
    #[serde(default)]
    pub reverse_loss: f64,
    /// Forward link rate; unlimited when absent.
    #[serde(default)]
    pub rate_cap_mbps: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ImpairmentProfile {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [("forward_delay_ms", self.forward_delay_ms), ("reverse_delay_ms", self.reverse_delay_ms)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ConfigError(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.reverse_loss) {
            return Err(ConfigError(format!("reverse_loss must be in [0, 1], got {}", self.reverse_loss)));
        }
        if let Some(r) = self.rate_cap_mbps {
            if !(r > 0.0 && r.is_finite()) {
                return Err(ConfigError(format!("rate_cap_mbps must be positive, got {r}")));
            }
        }
        self.loss.validate().map_err(ConfigError)
    }
}

/// Protocol knobs of an emulated or real run that are not planner parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub symbol_size: u16,
    pub codec: CodecKind,
    pub policy: SchedulePolicy,
    /// Receiver sends feedback after this many data packets...
    pub feedback_every_packets: u32,
    /// ...or when this much time passed and something changed.
    pub feedback_interval_ms: f64,
    /// Receiver also sends feedback as soon as a block is recovered.
    pub feedback_on_completion: bool,
    /// Incomplete receiver blocks idle this long are dropped.
    pub block_expiry_ms: f64,
    /// How long past the last frame the run may continue.
    pub drain_ms: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            symbol_size: 1250,
            codec: CodecKind::Linear,
            policy: SchedulePolicy::OldestFirst,
            feedback_every_packets: 16,
            feedback_interval_ms: 5.0,
            feedback_on_completion: true,
            block_expiry_ms: 400.0,
            drain_ms: 2000.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.symbol_size == 0 {
            return Err(ConfigError("symbol_size must be at least 1".into()));
        }
        if self.feedback_every_packets == 0 {
            return Err(ConfigError("feedback_every_packets must be at least 1".into()));
        }
        if !(self.feedback_interval_ms > 0.0 && self.block_expiry_ms > 0.0 && self.drain_ms >= 0.0) {
            return Err(ConfigError("feedback_interval_ms and block_expiry_ms must be positive, drain_ms >= 0".into()));
        }
        Ok(())
    }
}

/// One frame of an emulated or real run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmuFrameRecord {
    pub frame_id: u64,
    pub t_avail_ms: f64,
    /// `-1` when the frame was never recovered.
    pub t_deliver_ms: f64,
    pub latency_ms: f64,
    pub k_symbols: u32,
    pub symbols_sent: u64,
    pub symbols_received: u64,
    pub sent_ratio: f64,
    pub recv_ratio: f64,
    pub loss_rate_scheduled: f64,
}

impl EmuFrameRecord {
    pub fn delivered(&self) -> bool {
        self.latency_ms >= 0.0
    }
}

/// Realized forward loss over one constant-rate segment of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentLoss {
    pub start_s: f64,
    pub end_s: f64,
    pub scheduled: f64,
    pub packets: u64,
    pub lost: u64,
}

impl SegmentLoss {
    pub fn realized(&self) -> f64 {
        if self.packets == 0 {
            0.0
        } else {
            self.lost as f64 / self.packets as f64
        }
    }
}

/// Everything about a run that is not per-frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub stream: StreamProfile,
    pub impairment: ImpairmentProfile,
    pub params: PlanParams,
    pub session: SessionConfig,
    pub forward_packets: u64,
    pub forward_lost: u64,
    pub forward_bytes: u64,
    pub feedback_packets: u64,
    pub feedback_bytes: u64,
    pub topups: u64,
    pub topup_symbols: u64,
    pub duplicate_sends: u64,
    pub corrupt_blocks: u64,
    pub receiver_late_symbols: u64,
    pub receiver_expired_blocks: u64,
    pub feedback_silences: u64,
    pub segments: Vec<SegmentLoss>,
}

impl RunMetadata {
    pub fn feedback_fraction(&self) -> f64 {
        if self.forward_bytes == 0 {
            0.0
        } else {
            self.feedback_bytes as f64 / self.forward_bytes as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmuResult {
    pub frames: Vec<EmuFrameRecord>,
    pub metadata: RunMetadata,
}

impl EmuResult {
    pub fn all_delivered(&self) -> bool {
        self.frames.iter().all(EmuFrameRecord::delivered)
    }

    pub fn latencies_ms(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.latency_ms).collect()
    }
}

/// Deterministic frame contents, so recovered blocks can be checked without
/// keeping every frame in memory.
pub fn frame_payload(frame: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(frame ^ 0x5EED_F4A3_E000_0000);
    let mut v = vec![0u8; len];
    rng.fill(v.as_mut_slice());
    v
}

#[derive(Debug)]
enum Event {
    Frame(u64),
    LinkFree,
    Data(Vec<u8>),
    Feedback(Vec<u8>),
    Tick,
}

struct Clock {
    queue: BinaryHeap<Reverse<(Duration, u64)>>,
    events: Vec<Option<Event>>,
    next_id: u64,
}

impl Clock {
    fn new() -> Self {
        Self {
            queue: BinaryHeap::new(),
            events: Vec::new(),
            next_id: 0,
        }
    }

    fn at(&mut self, t: Duration, ev: Event) {
        // Ties resolve in scheduling order.
        self.queue.push(Reverse((t, self.next_id)));
        self.events.push(Some(ev));
        self.next_id += 1;
    }

    fn pop(&mut self) -> Option<(Duration, Event)> {
        let Reverse((t, id)) = self.queue.pop()?;
        let ev = self.events[id as usize].take().expect("each event fires once");
        Some((t, ev))
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn from_ms(v: f64) -> Duration {
    Duration::from_nanos((v * 1e6).round() as u64)
}

/// Run one stream through the emulated path.
pub fn run_emulated(
    stream: &StreamProfile,
    imp: &ImpairmentProfile,
    params: &PlanParams,
    session: &SessionConfig,
) -> Result<EmuResult, ConfigError> {
    stream.validate()?;
    imp.validate()?;
    session.validate()?;
    params.validate().map_err(ConfigError)?;

    let n_frames = stream.frame_count();
    let fwd = from_ms(imp.forward_delay_ms);
    let rev = from_ms(imp.reverse_delay_ms);
    let codec = session.codec.build();
    let verify = session.codec == CodecKind::Linear;
    let mut tx = Sender::new(
        codec.clone(),
        SenderConfig {
            symbol_size: session.symbol_size,
            params: *params,
            policy: session.policy,
            pacing: None,
            rtt: fwd + rev,
        },
    );
    let mut rx = Receiver::new(
        codec,
        ReceiverConfig {
            expiry: from_ms(session.block_expiry_ms),
            ..ReceiverConfig::default()
        },
    );
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(imp.seed);
    let mut rev_rng = ChaCha8Rng::seed_from_u64(imp.seed ^ 0xFEED_BAC4);

    let n = n_frames as usize;
    let mut sent = vec![0u64; n];
    let mut received = vec![0u64; n];
    let mut delivered_at: Vec<Option<Duration>> = vec![None; n];
    let mut n_delivered = 0u64;
    let mut pairs = HashSet::new();

    let end_s = stream.frame_time(n_frames).as_secs_f64();
    let mut segments: Vec<SegmentLoss> = imp
        .loss
        .segments(end_s)
        .into_iter()
        .map(|(start_s, end_s, scheduled)| SegmentLoss {
            start_s,
            end_s,
            scheduled,
            packets: 0,
            lost: 0,
        })
        .collect();

    let mut meta = RunMetadata {
        stream: stream.clone(),
        impairment: imp.clone(),
        params: *params,
        session: session.clone(),
        forward_packets: 0,
        forward_lost: 0,
        forward_bytes: 0,
        feedback_packets: 0,
        feedback_bytes: 0,
        topups: 0,
        topup_symbols: 0,
        duplicate_sends: 0,
        corrupt_blocks: 0,
        receiver_late_symbols: 0,
        receiver_expired_blocks: 0,
        feedback_silences: 0,
        segments: Vec::new(),
    };

    let mut clock = Clock::new();
    for f in 0..n_frames {
        clock.at(stream.frame_time(f), Event::Frame(f));
    }
    let tick = from_ms(session.feedback_interval_ms);
    clock.at(tick, Event::Tick);
    let deadline = stream.frame_time(n_frames) + from_ms(session.drain_ms);

    let mut link_busy_until = Duration::ZERO;
    let mut link_scheduled = false;
    let mut since_feedback = 0u32;
    let mut received_at_feedback = 0u64;
    let bits_per_sec = imp.rate_cap_mbps.map(|r| r * 1e6);

    while let Some((now, ev)) = clock.pop() {
        if now > deadline {
            break;
        }
        let mut send_feedback = false;
        match ev {
            Event::Frame(f) => {
                let len = stream.frame_size(f) as usize;
                let data = if verify { frame_payload(f, len) } else { vec![0; len] };
                tx.submit_block(data, now).map_err(|e| ConfigError(e.to_string()))?;
            }
            Event::LinkFree => {
                link_scheduled = false;
                // An uncapped link takes every packet available at this instant.
                while let Some(pkt) = tx.next_packet(now) {
                    let h = pkt.header;
                    let datagram = pkt.to_datagram();
                    sent[h.block_id as usize] += 1;
                    if !pairs.insert((h.block_id, h.esi)) {
                        meta.duplicate_sends += 1;
                    }
                    // The ideal codec sends empty payloads; charge the link for
                    // the symbol it stands in for.
                    let wire_len = DATA_HEADER_LEN + session.symbol_size as usize;
                    let tx_time = bits_per_sec.map_or(Duration::ZERO, |bps| {
                        Duration::from_nanos((wire_len as f64 * 8.0 / bps * 1e9).round() as u64)
                    });
                    link_busy_until = now + tx_time;
                    let t_s = now.as_secs_f64();
                    let lost = fwd_rng.gen::<f64>() < imp.loss.rate_at(t_s);
                    meta.forward_packets += 1;
                    meta.forward_bytes += wire_len as u64;
                    if let Some(seg) = segments.iter_mut().find(|s| t_s >= s.start_s && t_s < s.end_s) {
                        seg.packets += 1;
                        seg.lost += lost as u64;
                    }
                    if lost {
                        meta.forward_lost += 1;
                    } else {
                        clock.at(link_busy_until + fwd, Event::Data(datagram));
                    }
                    if tx_time > Duration::ZERO {
                        clock.at(link_busy_until, Event::LinkFree);
                        link_scheduled = true;
                        break;
                    }
                }
            }
            Event::Data(datagram) => {
                let outcome = rx.on_datagram(&datagram, now);
                if let Ok((h, _)) = decode_data_packet(&datagram) {
                    received[h.block_id as usize] += 1;
                }
                since_feedback += 1;
                let completed = matches!(outcome, Ok(crate::receiver::PacketOutcome::Completed));
                for blk in rx.take_delivered() {
                    let f = blk.block_id as usize;
                    if delivered_at[f].is_none() {
                        delivered_at[f] = Some(now);
                        n_delivered += 1;
                    }
                    if verify && blk.data != frame_payload(blk.block_id, blk.data.len()) {
                        meta.corrupt_blocks += 1;
                    }
                }
                send_feedback = since_feedback >= session.feedback_every_packets
                    || (completed && session.feedback_on_completion);
            }
            Event::Feedback(datagram) => {
                let fb = decode_feedback(&datagram).expect("emulator feedback is well formed");
                let _ = tx.on_feedback(&fb, now);
            }
            Event::Tick => {
                tx.poll(now);
                rx.expire(now);
                send_feedback = rx.total_received() != received_at_feedback;
                clock.at(now + tick, Event::Tick);
            }
        }
        if send_feedback {
            let datagram = encode_feedback(&rx.make_feedback());
            meta.feedback_packets += 1;
            meta.feedback_bytes += datagram.len() as u64;
            since_feedback = 0;
            received_at_feedback = rx.total_received();
            if rev_rng.gen::<f64>() >= imp.reverse_loss {
                clock.at(now + rev, Event::Feedback(datagram));
            }
        }
        if !link_scheduled && tx.has_pending() {
            clock.at(now.max(link_busy_until), Event::LinkFree);
            link_scheduled = true;
        }
        if n_delivered == n_frames && !tx.has_pending() && now >= stream.frame_time(n_frames - 1) {
            break;
        }
    }

    let sm = tx.metrics();
    meta.topups = sm.topups;
    meta.topup_symbols = sm.topup_symbols;
    meta.feedback_silences = sm.feedback_silences;
    meta.receiver_late_symbols = rx.metrics().late_symbols;
    meta.receiver_expired_blocks = rx.metrics().blocks_expired;
    meta.segments = segments;

    let frames = (0..n_frames)
        .map(|f| {
            let i = f as usize;
            let avail = stream.frame_time(f);
            let len = stream.frame_size(f) as usize;
            let k = crate::codec::symbol_count(len, session.symbol_size as usize);
            let latency = delivered_at[i].map(|d| d - avail);
            EmuFrameRecord {
                frame_id: f,
                t_avail_ms: ms(avail),
                t_deliver_ms: delivered_at[i].map_or(-1.0, ms),
                latency_ms: latency.map_or(-1.0, ms),
                k_symbols: k,
                symbols_sent: sent[i],
                symbols_received: received[i],
                sent_ratio: sent[i] as f64 / k as f64,
                recv_ratio: received[i] as f64 / k as f64,
                loss_rate_scheduled: imp.loss.rate_at(avail.as_secs_f64()),
            }
        })
        .collect();
    Ok(EmuResult { frames, metadata: meta })
}

pub fn write_frames_csv<W: Write>(out: W, frames: &[EmuFrameRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for f in frames {
        w.serialize(f)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_path() -> ImpairmentProfile {
        ImpairmentProfile {
            forward_delay_ms: 0.0,
            reverse_delay_ms: 0.0,
            loss: LossTrace::constant(0.0),
            reverse_loss: 0.0,
            rate_cap_mbps: None,
            seed: 1,
        }
    }

    #[test]
    fn unimpaired_small_frames() {
        let stream = StreamProfile {
            fps: 30.0,
            frame_size_pattern: vec![1250],
            duration_s: 10.0 / 30.0,
        };
        let r = run_emulated(&stream, &clean_path(), &PlanParams::default(), &SessionConfig::default()).unwrap();
        assert_eq!(r.frames.len(), 10);
        for f in &r.frames {
            assert!(f.delivered());
            assert!(f.latency_ms < 5.0);
            assert_eq!(f.k_symbols, 1);
            // K plus the default surplus of two.
            assert_eq!(f.sent_ratio, 3.0);
        }
        assert_eq!(r.metadata.corrupt_blocks, 0);
    }

    #[test]
    fn delayed_lossy_path_recovers_every_frame() {
        let stream = StreamProfile {
            fps: 30.0,
            frame_size_pattern: vec![40_000, 10_000],
            duration_s: 3.0,
        };
        let imp = ImpairmentProfile {
            forward_delay_ms: 20.0,
            reverse_delay_ms: 20.0,
            loss: LossTrace::constant(0.05),
            rate_cap_mbps: Some(100.0),
            seed: 9,
            ..clean_path()
        };
        let r = run_emulated(&stream, &imp, &PlanParams::default(), &SessionConfig::default()).unwrap();
        assert!(r.all_delivered());
        assert_eq!(r.metadata.corrupt_blocks, 0);
        assert_eq!(r.metadata.duplicate_sends, 0);
        for f in &r.frames {
            assert!(f.latency_ms >= 20.0);
            assert!(f.recv_ratio >= 1.0);
        }
        assert!(r.metadata.feedback_fraction() < 0.01);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let stream = StreamProfile {
            fps: 60.0,
            frame_size_pattern: vec![20_000],
            duration_s: 1.0,
        };
        let imp = ImpairmentProfile {
            forward_delay_ms: 5.0,
            reverse_delay_ms: 5.0,
            loss: LossTrace::constant(0.1),
            ..clean_path()
        };
        let session = SessionConfig {
            codec: CodecKind::Ideal,
            ..SessionConfig::default()
        };
        let a = run_emulated(&stream, &imp, &PlanParams::default(), &session).unwrap();
        let b = run_emulated(&stream, &imp, &PlanParams::default(), &session).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rate_cap_serializes_packets() {
        let stream = StreamProfile {
            fps: 1.0,
            frame_size_pattern: vec![125_000],
            duration_s: 1.0,
        };
        let imp = ImpairmentProfile {
            rate_cap_mbps: Some(10.0),
            ..clean_path()
        };
        let session = SessionConfig {
            codec: CodecKind::Ideal,
            ..SessionConfig::default()
        };
        let r = run_emulated(&stream, &imp, &PlanParams::no_headroom(), &session).unwrap();
        // 100 datagrams of 1280 bytes at 10 Mbps take 102.4 ms.
        assert!((r.frames[0].latency_ms - 102.4).abs() < 0.01, "{}", r.frames[0].latency_ms);
    }

    #[test]
    fn total_forward_loss_leaves_sentinels() {
        let stream = StreamProfile {
            fps: 10.0,
            frame_size_pattern: vec![100],
            duration_s: 0.2,
        };
        let imp = ImpairmentProfile {
            loss: LossTrace::constant(1.0),
            ..clean_path()
        };
        let session = SessionConfig {
            drain_ms: 100.0,
            ..SessionConfig::default()
        };
        let r = run_emulated(&stream, &imp, &PlanParams::default(), &session).unwrap();
        assert!(r.frames.iter().all(|f| f.latency_ms == -1.0 && f.t_deliver_ms == -1.0));
    }

    #[test]
    fn invalid_profiles_rejected() {
        let bad_stream = StreamProfile {
            fps: 0.0,
            frame_size_pattern: vec![1],
            duration_s: 1.0,
        };
        assert!(bad_stream.validate().is_err());
        let bad_imp = ImpairmentProfile {
            forward_delay_ms: -1.0,
            ..clean_path()
        };
        assert!(bad_imp.validate().is_err());
    }
}
