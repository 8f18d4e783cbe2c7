//! `liquid`: run simulations, emulated scenarios, real UDP endpoints and
//! benchmarks of the liquid block delivery protocol.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad usage or malformed
//! scenario, 3 socket bind failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use liquid_core::codec::{CodecKind, SourceBlock};
use liquid_core::emu::{SessionConfig, StreamProfile};
use liquid_core::metrics::{mean, percentile};
use liquid_core::planner::PlanParams;
use liquid_core::scenario::{Mode, ScenarioError, ScenarioFile, BUILTIN};
use liquid_core::udp::{self, TransportError, UdpReceiverConfig, UdpSenderConfig};
use liquid_core::ConfigError;
use serde::Serialize;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "liquid", version, about = "Fountain-coded block delivery without retransmissions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Paired slotted simulation: liquid protocol against the retransmission oracle.
    /// Writes frames.csv, bandwidth.csv and run.json.
    Simulate(RunArgs),
    /// Emulated impaired-network run. Writes frames.csv and run.json.
    Emurun(RunArgs),
    /// Stream generated frames to a receiver over UDP.
    Send(SendArgs),
    /// Receive and decode a stream over UDP.
    Recv(RecvArgs),
    /// Encode and decode throughput of the codec.
    BenchCodec(BenchCodecArgs),
    /// End-to-end processing latency over the loopback interface.
    BenchLoopback(BenchLoopbackArgs),
    /// Shipped scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCommand),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON file, or the name of a shipped scenario.
    #[arg(long)]
    scenario: String,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Frame sizes in bytes, repeated for the whole stream.
    #[arg(long, value_delimiter = ',', default_value = "40000")]
    frame_sizes: Vec<u32>,
    #[arg(long, default_value_t = 10.0)]
    duration_s: f64,
}

impl StreamArgs {
    fn profile(&self) -> StreamProfile {
        StreamProfile {
            fps: self.fps,
            frame_size_pattern: self.frame_sizes.clone(),
            duration_s: self.duration_s,
        }
    }
}

#[derive(Args)]
struct SessionArgs {
    #[arg(long, default_value_t = 1250)]
    symbol_size: u16,
    #[arg(long, value_enum, default_value = "linear")]
    codec: CodecArg,
    /// Planner parameters as a JSON object, e.g. '{"z_bin": 1.0}'.
    #[arg(long, default_value = "{}")]
    params: String,
}

impl SessionArgs {
    fn session(&self) -> SessionConfig {
        SessionConfig {
            symbol_size: self.symbol_size,
            codec: self.codec.into(),
            ..SessionConfig::default()
        }
    }

    fn plan_params(&self) -> Result<PlanParams, CliError> {
        let p: PlanParams = serde_json::from_str(&self.params).map_err(ScenarioError::Schema)?;
        p.validate().map_err(ConfigError)?;
        Ok(p)
    }
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CodecArg {
    Linear,
    Ideal,
}

impl From<CodecArg> for CodecKind {
    fn from(c: CodecArg) -> Self {
        match c {
            CodecArg::Linear => CodecKind::Linear,
            CodecArg::Ideal => CodecKind::Ideal,
        }
    }
}

#[derive(Args)]
struct SendArgs {
    /// Receiver address.
    #[arg(long)]
    remote: SocketAddr,
    #[arg(long, default_value = "0.0.0.0:0")]
    bind: SocketAddr,
    #[command(flatten)]
    stream: StreamArgs,
    #[command(flatten)]
    session: SessionArgs,
    /// Fraction of data packets dropped before they are sent.
    #[arg(long, default_value_t = 0.0)]
    induced_loss: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Round-trip time estimate in milliseconds.
    #[arg(long, default_value_t = 40.0)]
    rtt_ms: f64,
    /// Per-frame CSV of what was sent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecvArgs {
    #[arg(long)]
    bind: SocketAddr,
    #[arg(long, default_value_t = 1250)]
    symbol_size: u16,
    #[arg(long, value_enum, default_value = "linear")]
    codec: CodecArg,
    /// Stop after this long without data, once data has arrived.
    #[arg(long, default_value_t = 3000)]
    idle_timeout_ms: u64,
    /// Stop after this many blocks.
    #[arg(long)]
    expected_blocks: Option<u64>,
    /// Per-frame CSV of what was received.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCodecArgs {
    /// Block sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "31250,62500,125000,250000,1250000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 1250)]
    symbol_size: usize,
    /// Blocks per size.
    #[arg(long, default_value_t = 20)]
    iterations: u32,
    /// Fraction of source symbols replaced by repair symbols when decoding.
    #[arg(long, default_value_t = 0.1)]
    loss: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchLoopbackArgs {
    /// Frame sizes in bytes; each gets its own run.
    #[arg(long, value_delimiter = ',', default_value = "31250,62500,125000,250000")]
    sizes: Vec<u32>,
    #[arg(long, default_value_t = 60.0)]
    fps: f64,
    #[arg(long, default_value_t = 5.0)]
    duration_s: f64,
    /// Fraction of data packets dropped at the sender.
    #[arg(long, default_value_t = 0.1)]
    induced_loss: f64,
    #[arg(long, default_value_t = 1250)]
    symbol_size: u16,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Names and descriptions of the shipped scenarios.
    List,
    /// Print a shipped scenario's JSON.
    Show { name: String },
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Scenario(ScenarioError::Read { .. }) => 1,
            Self::Scenario(_) | Self::Config(_) | Self::Usage(_) => 2,
            Self::Transport(TransportError::Bind { .. }) => 3,
            Self::Transport(TransportError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_run(a, Mode::Simulate),
        Command::Emurun(a) => cmd_run(a, Mode::Emurun),
        Command::Send(a) => cmd_send(a),
        Command::Recv(a) => cmd_recv(a),
        Command::BenchCodec(a) => cmd_bench_codec(a),
        Command::BenchLoopback(a) => cmd_bench_loopback(a),
        Command::Scenario(c) => cmd_scenario(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// A path that exists wins over a shipped scenario of the same name.
fn resolve_scenario(arg: &str) -> Result<ScenarioFile, CliError> {
    let path = Path::new(arg);
    if path.exists() {
        return Ok(ScenarioFile::load(path)?);
    }
    let stem = path.file_name().and_then(|n| n.to_str()).unwrap_or(arg);
    ScenarioFile::builtin(stem).ok_or_else(|| CliError::Usage(format!("no scenario file or shipped scenario named {arg}")))
}

fn cmd_run(args: RunArgs, mode: Mode) -> Result<(), CliError> {
    let scenario = resolve_scenario(&args.scenario)?;
    if scenario.mode != mode {
        return Err(CliError::Usage(format!(
            "scenario {} is a {:?} scenario; use the matching subcommand",
            scenario.name, scenario.mode
        )));
    }
    let outcome = scenario.run(args.seed)?;
    let dir = args.out.unwrap_or_else(|| scenario.default_output_dir());
    let files = outcome.write(&scenario.name, &dir)?;
    for (protocol, summary) in outcome.summaries() {
        println!("{protocol}: {summary}");
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn csv_out<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_send(args: SendArgs) -> Result<(), CliError> {
    let socket = udp::bind_udp(args.bind)?;
    let cfg = UdpSenderConfig {
        remote: args.remote,
        stream: args.stream.profile(),
        params: args.session.plan_params()?,
        session: args.session.session(),
        induced_loss: args.induced_loss,
        seed: args.seed,
        rtt: Duration::from_secs_f64(args.rtt_ms / 1000.0),
    };
    let report = udp::run_udp_sender(&socket, &cfg, |_, _| {})?;
    let n = report.frames.len();
    let ratios: Vec<f64> = report.frames.iter().map(|f| f.sent_ratio).collect();
    println!(
        "frames confirmed {}/{} | packets sent {} dropped {} | mean overhead {:.4}",
        n - report.unconfirmed_blocks,
        n,
        report.metrics.packets_sent,
        report.induced_drops,
        mean(&ratios).unwrap_or(f64::NAN)
    );
    if let Some(path) = &args.out {
        csv_out(path, &report.frames)?;
    }
    Ok(())
}

fn cmd_recv(args: RecvArgs) -> Result<(), CliError> {
    let socket = udp::bind_udp(args.bind)?;
    println!("listening on {}", socket.local_addr()?);
    let cfg = UdpReceiverConfig {
        session: SessionConfig {
            symbol_size: args.symbol_size,
            codec: args.codec.into(),
            ..SessionConfig::default()
        },
        idle_timeout: Duration::from_millis(args.idle_timeout_ms),
        expected_blocks: args.expected_blocks,
    };
    let stop = AtomicBool::new(false);
    let report = udp::run_udp_receiver(&socket, &cfg, &stop, |_, _| {})?;
    let intact = report.frames.iter().filter(|f| f.intact).count();
    println!(
        "frames delivered {} ({} intact) | packets received {} | feedback sent {} | malformed {}",
        report.frames.len(),
        intact,
        report.packets_received,
        report.feedback_sent,
        report.malformed_packets
    );
    if let Some(path) = &args.out {
        csv_out(path, &report.frames)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CodecRow {
    size_bytes: usize,
    k: u32,
    symbol_size: usize,
    repair_symbols: u32,
    encode_mbps: f64,
    decode_mbps: f64,
    decode_ms_p50: f64,
}

fn cmd_bench_codec(args: BenchCodecArgs) -> Result<(), CliError> {
    if !(0.0..1.0).contains(&args.loss) || args.iterations == 0 {
        return Err(CliError::Usage("need 0 <= loss < 1 and iterations >= 1".into()));
    }
    let codec = CodecKind::Linear.build();
    let mut rows = Vec::new();
    for &size in &args.sizes {
        let data = liquid_core::emu::frame_payload(size as u64, size);
        let mut encode_s = 0.0;
        let mut decode_times = Vec::new();
        let mut row_k = 0;
        let mut repair = 0;
        for it in 0..args.iterations {
            let block = SourceBlock::new(it as u64, data.clone(), args.symbol_size)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let k = block.k();
            row_k = k;
            // Drop an evenly spread share of source symbols, replace them with
            // repair symbols, and time both halves.
            repair = ((k as f64 * args.loss).round() as u32).min(k);
            let stride = k.checked_div(repair).unwrap_or(u32::MAX);
            let enc = codec.encoder(block);
            let start = Instant::now();
            let mut symbols = Vec::with_capacity(k as usize);
            let mut dropped = 0;
            for esi in 0..k {
                if dropped < repair && esi % stride == 0 {
                    dropped += 1;
                    continue;
                }
                symbols.push((esi, enc.encode(esi).payload));
            }
            for r in 0..dropped {
                let esi = k + r;
                symbols.push((esi, enc.encode(esi).payload));
            }
            encode_s += start.elapsed().as_secs_f64();

            let start = Instant::now();
            let mut dec = codec.decoder(it as u64, size, args.symbol_size);
            let mut esi_extra = k + dropped;
            for (esi, payload) in &symbols {
                dec.add(*esi, payload).map_err(|e| CliError::Failed(e.to_string()))?;
            }
            while !dec.is_complete() {
                let sym = enc.encode(esi_extra);
                dec.add(esi_extra, &sym.payload).map_err(|e| CliError::Failed(e.to_string()))?;
                esi_extra += 1;
            }
            let out = dec.try_finish().map_err(|_| CliError::Failed("decoder did not finish".into()))?;
            decode_times.push(start.elapsed().as_secs_f64());
            if out != data {
                return Err(CliError::Failed(format!("decoded block of {size} bytes differs")));
            }
        }
        let total_mb = size as f64 * args.iterations as f64 / 1e6;
        let row = CodecRow {
            size_bytes: size,
            k: row_k,
            symbol_size: args.symbol_size,
            repair_symbols: repair,
            encode_mbps: total_mb * 8.0 / encode_s,
            decode_mbps: total_mb * 8.0 / decode_times.iter().sum::<f64>(),
            decode_ms_p50: percentile(&decode_times, 50.0).unwrap_or(f64::NAN) * 1e3,
        };
        println!(
            "size {} K {} repair {} | encode {:.0} Mbps | decode {:.0} Mbps, p50 {:.3} ms",
            row.size_bytes, row.k, row.repair_symbols, row.encode_mbps, row.decode_mbps, row.decode_ms_p50
        );
        rows.push(row);
    }
    if let Some(path) = &args.out {
        csv_out(path, &rows)?;
    }
    Ok(())
}

fn cmd_bench_loopback(args: BenchLoopbackArgs) -> Result<(), CliError> {
    let session = SessionConfig {
        symbol_size: args.symbol_size,
        ..SessionConfig::default()
    };
    let mut all = Vec::new();
    for &size in &args.sizes {
        let stream = StreamProfile {
            fps: args.fps,
            frame_size_pattern: vec![size],
            duration_s: args.duration_s,
        };
        let samples = udp::loopback_bench(&stream, args.induced_loss, &PlanParams::default(), &session, args.seed)?;
        let lat: Vec<f64> = samples.iter().map(|s| s.latency_ms).filter(|&l| l >= 0.0).collect();
        let intact = samples.iter().all(|s| s.intact);
        let p = |q| percentile(&lat, q).unwrap_or(f64::NAN);
        println!(
            "size {} | frames delivered {}/{} | latency ms p50 {:.3} p95 {:.3} p99 {:.3} max {:.3} | intact {}",
            size,
            lat.len(),
            samples.len(),
            p(50.0),
            p(95.0),
            p(99.0),
            p(100.0),
            intact
        );
        if !intact {
            return Err(CliError::Failed(format!("corrupted block at size {size}")));
        }
        all.extend(samples);
    }
    if let Some(path) = &args.out {
        csv_out(path, &all)?;
    }
    Ok(())
}

fn cmd_scenario(cmd: ScenarioCommand) -> Result<(), CliError> {
    let mut stdout = io::stdout().lock();
    match cmd {
        ScenarioCommand::List => {
            for (name, _) in BUILTIN {
                let s = ScenarioFile::builtin(name).expect("listed");
                writeln!(stdout, "{name}\t{:?}\t{}", s.mode, s.description)?;
            }
        }
        ScenarioCommand::Show { name } => {
            let stem = name.strip_suffix(".json").unwrap_or(&name);
            let (_, text) = BUILTIN
                .iter()
                .find(|(n, _)| *n == stem)
                .ok_or_else(|| CliError::Usage(format!("no shipped scenario named {name}")))?;
            stdout.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}
