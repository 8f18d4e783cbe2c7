//! The engines over real UDP sockets.
//!
//! [`run_udp_sender`] and [`run_udp_receiver`] each own one socket and drive
//! one engine on the wall clock from a single thread. [`loopback_bench`] runs
//! both on the local machine and measures per-block latency from the moment a
//! block is handed to the sender to the moment the recovered block is handed
//! back by the receiver.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;

use crate::emu::{frame_payload, SessionConfig, StreamProfile};
use crate::planner::PlanParams;
use crate::receiver::{DeliveredBlock, PacketOutcome, Receiver, ReceiverConfig};
use crate::sender::{Sender, SenderConfig, SenderMetrics};
use crate::wire::{decode_feedback, encode_feedback};
use crate::ConfigError;

/// Socket buffer size requested for both directions.
const SOCKET_BUFFER: usize = 4 << 20;
const MAX_DATAGRAM: usize = 65_535;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Bind a UDP socket with enlarged kernel buffers.
pub fn bind_udp(addr: SocketAddr) -> Result<UdpSocket, TransportError> {
    let bind_err = |source| TransportError::Bind { addr, source };
    let socket = Socket::new(Domain::for_address(addr), Type::DGRAM, Some(Protocol::UDP)).map_err(bind_err)?;
    // Best effort: the kernel clamps these to its configured maximum.
    let _ = socket.set_recv_buffer_size(SOCKET_BUFFER);
    let _ = socket.set_send_buffer_size(SOCKET_BUFFER);
    socket.bind(&addr.into()).map_err(bind_err)?;
    Ok(socket.into())
}

#[derive(Debug, Clone)]
pub struct UdpSenderConfig {
    pub remote: SocketAddr,
    pub stream: StreamProfile,
    pub params: PlanParams,
    pub session: SessionConfig,
    /// Fraction of data packets dropped before they reach the socket.
    pub induced_loss: f64,
    pub seed: u64,
    /// Round-trip estimate used by the engine's silence detector.
    pub rtt: Duration,
}

/// Sender-side view of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentFrame {
    pub frame_id: u64,
    pub t_avail_ms: f64,
    pub k_symbols: u32,
    pub symbols_sent: u64,
    pub sent_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct SendReport {
    pub frames: Vec<SentFrame>,
    pub metrics: SenderMetrics,
    pub induced_drops: u64,
    pub unconfirmed_blocks: usize,
}

/// Stream frames to `cfg.remote` until every block is confirmed or the
/// session's drain time after the last frame runs out. `on_submit` gets the
/// instant each block was handed to the engine.
pub fn run_udp_sender(
    socket: &UdpSocket,
    cfg: &UdpSenderConfig,
    mut on_submit: impl FnMut(u64, Instant),
) -> Result<SendReport, TransportError> {
    cfg.stream.validate()?;
    cfg.session.validate()?;
    cfg.params.validate().map_err(ConfigError)?;
    if !(0.0..=1.0).contains(&cfg.induced_loss) {
        return Err(ConfigError(format!("induced loss must be in [0, 1], got {}", cfg.induced_loss)).into());
    }
    socket.connect(cfg.remote)?;
    let mut tx = Sender::new(
        cfg.session.codec.build(),
        SenderConfig {
            symbol_size: cfg.session.symbol_size,
            params: cfg.params,
            policy: cfg.session.policy,
            pacing: None,
            rtt: cfg.rtt,
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_frames = cfg.stream.frame_count();
    let mut sent = vec![0u64; n_frames as usize];
    let mut induced_drops = 0;
    let drain = Duration::from_secs_f64(cfg.session.drain_ms / 1000.0);
    let last_frame_at = cfg.stream.frame_time(n_frames - 1);
    let expiry = Duration::from_secs_f64(cfg.session.block_expiry_ms / 1000.0);
    let mut buf = vec![0u8; MAX_DATAGRAM];
    let epoch = Instant::now();
    let mut next_frame = 0u64;
    loop {
        let now = epoch.elapsed();
        while next_frame < n_frames && cfg.stream.frame_time(next_frame) <= now {
            let len = cfg.stream.frame_size(next_frame) as usize;
            let data = frame_payload(next_frame, len);
            let handed_over = Instant::now();
            tx.submit_block(data, now).map_err(|e| ConfigError(e.to_string()))?;
            on_submit(next_frame, handed_over);
            next_frame += 1;
        }
        while let Some(pkt) = tx.next_packet(epoch.elapsed()) {
            sent[pkt.header.block_id as usize] += 1;
            if rng.gen::<f64>() < cfg.induced_loss {
                induced_drops += 1;
                continue;
            }
            match socket.send(&pkt.to_datagram()) {
                Ok(_) => {}
                // A full socket buffer or a peer that is not listening yet
                // is one more lost packet.
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::ConnectionRefused) => {}
                Err(e) => return Err(e.into()),
            }
        }
        let now = epoch.elapsed();
        tx.abandon_older_than(now, expiry);
        tx.poll(now);
        if next_frame == n_frames && (tx.outstanding_blocks() == 0 || now > last_frame_at + drain) {
            break;
        }
        let wait = if next_frame < n_frames {
            cfg.stream.frame_time(next_frame).saturating_sub(now)
        } else {
            Duration::from_millis(5)
        };
        socket.set_read_timeout(Some(wait.clamp(Duration::from_micros(100), Duration::from_millis(5))))?;
        match socket.recv(&mut buf) {
            Ok(n) => {
                if let Ok(fb) = decode_feedback(&buf[..n]) {
                    let _ = tx.on_feedback(&fb, epoch.elapsed());
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            // Linux reports an unreachable peer on the next receive; keep going.
            Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => {}
            Err(e) => return Err(e.into()),
        }
    }
    let frames = (0..n_frames)
        .map(|f| {
            let k = crate::codec::symbol_count(cfg.stream.frame_size(f) as usize, cfg.session.symbol_size as usize);
            SentFrame {
                frame_id: f,
                t_avail_ms: cfg.stream.frame_time(f).as_secs_f64() * 1000.0,
                k_symbols: k,
                symbols_sent: sent[f as usize],
                sent_ratio: sent[f as usize] as f64 / k as f64,
            }
        })
        .collect();
    Ok(SendReport {
        frames,
        metrics: tx.metrics().clone(),
        induced_drops,
        unconfirmed_blocks: tx.outstanding_blocks(),
    })
}

#[derive(Debug, Clone)]
pub struct UdpReceiverConfig {
    pub session: SessionConfig,
    /// Stop after this long without any data packet, once one has arrived.
    pub idle_timeout: Duration,
    /// Stop once this many blocks were delivered.
    pub expected_blocks: Option<u64>,
}

/// Receiver-side view of one delivered block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceivedFrame {
    pub frame_id: u64,
    /// Milliseconds since the receiver started.
    pub t_deliver_ms: f64,
    pub symbols_received: u32,
    pub size_bytes: usize,
    /// Whether the bytes match the deterministic test pattern.
    pub intact: bool,
}

#[derive(Debug, Clone)]
pub struct ReceiveReport {
    pub frames: Vec<ReceivedFrame>,
    pub packets_received: u64,
    pub feedback_sent: u64,
    pub malformed_packets: u64,
}

/// Receive blocks until `stop` is set, the idle timeout passes, or the
/// expected number of blocks arrived. `on_deliver` sees each recovered block
/// as soon as it is decoded.
pub fn run_udp_receiver(
    socket: &UdpSocket,
    cfg: &UdpReceiverConfig,
    stop: &AtomicBool,
    mut on_deliver: impl FnMut(&DeliveredBlock, Instant),
) -> Result<ReceiveReport, TransportError> {
    cfg.session.validate()?;
    let mut rx = Receiver::new(
        cfg.session.codec.build(),
        ReceiverConfig {
            expiry: Duration::from_secs_f64(cfg.session.block_expiry_ms / 1000.0),
            ..ReceiverConfig::default()
        },
    );
    let interval = Duration::from_secs_f64(cfg.session.feedback_interval_ms / 1000.0);
    socket.set_read_timeout(Some(interval))?;
    let mut buf = vec![0u8; MAX_DATAGRAM];
    let epoch = Instant::now();
    let mut peer: Option<SocketAddr> = None;
    let mut last_data = epoch;
    let mut last_tick = epoch;
    let mut since_feedback = 0u32;
    let mut received_at_feedback = 0u64;
    let mut feedback_sent = 0u64;
    let mut frames = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        let mut send_feedback = false;
        match socket.recv_from(&mut buf) {
            Ok((n, from)) => {
                peer = Some(from);
                last_data = Instant::now();
                let outcome = rx.on_datagram(&buf[..n], epoch.elapsed());
                for blk in rx.take_delivered() {
                    let at = Instant::now();
                    on_deliver(&blk, at);
                    frames.push(ReceivedFrame {
                        frame_id: blk.block_id,
                        t_deliver_ms: (at - epoch).as_secs_f64() * 1000.0,
                        symbols_received: blk.symbols_received,
                        size_bytes: blk.data.len(),
                        intact: blk.data == frame_payload(blk.block_id, blk.data.len()),
                    });
                }
                since_feedback += 1;
                send_feedback = since_feedback >= cfg.session.feedback_every_packets
                    || (cfg.session.feedback_on_completion && matches!(outcome, Ok(PacketOutcome::Completed)));
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.into()),
        }
        if last_tick.elapsed() >= interval {
            last_tick = Instant::now();
            rx.expire(epoch.elapsed());
            send_feedback |= rx.total_received() != received_at_feedback;
        }
        if send_feedback {
            if let Some(to) = peer {
                let datagram = encode_feedback(&rx.make_feedback());
                match socket.send_to(&datagram, to) {
                    Ok(_) => feedback_sent += 1,
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
                    Err(e) => return Err(e.into()),
                }
                since_feedback = 0;
                received_at_feedback = rx.total_received();
            }
        }
        if peer.is_some() && last_data.elapsed() > cfg.idle_timeout {
            break;
        }
        if cfg.expected_blocks.is_some_and(|n| frames.len() as u64 >= n) {
            break;
        }
    }
    Ok(ReceiveReport {
        frames,
        packets_received: rx.metrics().packets_received,
        feedback_sent,
        malformed_packets: rx.metrics().malformed_packets,
    })
}

/// One block of a loopback benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub frame_id: u64,
    pub size_bytes: u32,
    /// Hand-over to recovery, `-1` when the block never arrived.
    pub latency_ms: f64,
    pub intact: bool,
}

/// Stream over the loopback interface with `induced_loss` of the data
/// packets dropped at the sender, and time every block end to end.
pub fn loopback_bench(
    stream: &StreamProfile,
    induced_loss: f64,
    params: &PlanParams,
    session: &SessionConfig,
    seed: u64,
) -> Result<Vec<BenchSample>, TransportError> {
    let localhost: SocketAddr = ([127, 0, 0, 1], 0).into();
    let rx_socket = bind_udp(localhost)?;
    let tx_socket = bind_udp(localhost)?;
    let rx_addr = rx_socket.local_addr()?;
    let n_frames = stream.frame_count();
    let stop = Arc::new(AtomicBool::new(false));
    let (deliveries, delivered) = mpsc::channel();

    let rx_cfg = UdpReceiverConfig {
        session: session.clone(),
        idle_timeout: Duration::from_secs(2),
        expected_blocks: None,
    };
    let rx_stop = stop.clone();
    let receiver = thread::spawn(move || {
        run_udp_receiver(&rx_socket, &rx_cfg, &rx_stop, |blk, at| {
            let intact = blk.data == frame_payload(blk.block_id, blk.data.len());
            let _ = deliveries.send((blk.block_id, at, intact));
        })
    });

    let mut submitted = vec![None; n_frames as usize];
    let tx_cfg = UdpSenderConfig {
        remote: rx_addr,
        stream: stream.clone(),
        params: *params,
        session: session.clone(),
        induced_loss,
        seed,
        rtt: Duration::from_millis(1),
    };
    let sent = run_udp_sender(&tx_socket, &tx_cfg, |f, at| submitted[f as usize] = Some(at));
    stop.store(true, Ordering::Relaxed);
    let received = receiver.join().expect("receiver thread panicked");
    sent?;
    received?;

    let mut samples: Vec<BenchSample> = (0..n_frames)
        .map(|f| BenchSample {
            frame_id: f,
            size_bytes: stream.frame_size(f),
            latency_ms: -1.0,
            intact: false,
        })
        .collect();
    for (id, at, intact) in delivered.try_iter() {
        if let (Some(s), Some(Some(t0))) = (samples.get_mut(id as usize), submitted.get(id as usize)) {
            s.latency_ms = at.saturating_duration_since(*t0).as_secs_f64() * 1000.0;
            s.intact = intact;
        }
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_failure_is_distinct() {
        let a = bind_udp(([127, 0, 0, 1], 0).into()).unwrap();
        let taken = a.local_addr().unwrap();
        match bind_udp(taken) {
            Err(TransportError::Bind { addr, .. }) => assert_eq!(addr, taken),
            other => panic!("expected bind error, got {other:?}"),
        }
    }

    #[test]
    fn loopback_delivers_intact_blocks() {
        let stream = StreamProfile {
            fps: 60.0,
            frame_size_pattern: vec![20_000, 1],
            duration_s: 0.25,
        };
        let samples = loopback_bench(&stream, 0.1, &PlanParams::default(), &SessionConfig::default(), 3).unwrap();
        assert_eq!(samples.len(), 15);
        for s in &samples {
            assert!(s.latency_ms >= 0.0, "frame {} missing", s.frame_id);
            assert!(s.intact);
        }
    }
}
