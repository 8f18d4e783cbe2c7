//! Scenario files: one JSON document describing a simulated or emulated run.

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emu::{self, EmuResult, ImpairmentProfile, SessionConfig, StreamProfile};
use crate::metrics::RunSummary;
use crate::planner::PlanParams;
use crate::sim::{self, PairedResult, RunResult, SimConfig};
use crate::ConfigError;

/// Scenarios shipped with the crate, by file stem.
pub const BUILTIN: &[(&str, &str)] = &[
    ("paper_fig3", include_str!("../../../scenarios/paper_fig3.json")),
    ("paper_fig7", include_str!("../../../scenarios/paper_fig7.json")),
    ("paper_fig8", include_str!("../../../scenarios/paper_fig8.json")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
    #[error("schema error: {0}")]
    Schema(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Paired slotted runs of the liquid protocol and the retransmission oracle.
    Simulate,
    /// The liquid protocol over the emulated impaired network.
    Emurun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub mode: Mode,
    /// Required in `simulate` mode.
    #[serde(default)]
    pub sim: Option<SimConfig>,
    /// Required in `emurun` mode.
    #[serde(default)]
    pub stream: Option<StreamProfile>,
    /// Required in `emurun` mode.
    #[serde(default)]
    pub impairment: Option<ImpairmentProfile>,
    /// Only used in `emurun` mode.
    #[serde(default)]
    pub session: Option<SessionConfig>,
    #[serde(default)]
    pub params: PlanParams,
    /// Seeds every random draw of the run.
    pub seed: u64,
    /// Where CSVs go, relative to the working directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ScenarioFile {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".json").unwrap_or(name);
        BUILTIN
            .iter()
            .find(|(n, _)| *n == stem)
            .map(|(_, text)| Self::from_json(text).expect("shipped scenario is valid"))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.to_string()));
        match self.mode {
            Mode::Simulate => {
                let Some(sim) = &self.sim else {
                    return bad("simulate mode needs a `sim` section");
                };
                if self.stream.is_some() || self.impairment.is_some() || self.session.is_some() {
                    return bad("simulate mode takes no `stream`, `impairment` or `session`");
                }
                if sim.seed != 0 {
                    return bad("set the seed at the top level, not inside `sim`");
                }
                sim.validate()?;
            }
            Mode::Emurun => {
                let (Some(stream), Some(imp)) = (&self.stream, &self.impairment) else {
                    return bad("emurun mode needs `stream` and `impairment` sections");
                };
                if self.sim.is_some() {
                    return bad("emurun mode takes no `sim` section");
                }
                if imp.seed != 0 {
                    return bad("set the seed at the top level, not inside `impairment`");
                }
                stream.validate()?;
                imp.validate()?;
                self.session.clone().unwrap_or_default().validate()?;
            }
        }
        self.params.validate().map_err(ConfigError)
    }

    pub fn default_output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| Path::new("out").join(&self.name))
    }

    /// Runs the scenario with `seed` in place of the file's seed.
    pub fn run(&self, seed: Option<u64>) -> Result<ScenarioOutcome, ConfigError> {
        let seed = seed.unwrap_or(self.seed);
        match self.mode {
            Mode::Simulate => {
                let mut cfg = self.sim.clone().expect("validated");
                cfg.seed = seed;
                let paired = sim::paired_run(&cfg, &self.params)?;
                Ok(ScenarioOutcome::Simulate {
                    k: cfg.packets_per_frame,
                    seed,
                    result: paired,
                })
            }
            Mode::Emurun => {
                let stream = self.stream.clone().expect("validated");
                let mut imp = self.impairment.clone().expect("validated");
                imp.seed = seed;
                let session = self.session.clone().unwrap_or_default();
                let result = emu::run_emulated(&stream, &imp, &self.params, &session)?;
                Ok(ScenarioOutcome::Emurun { seed, result })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum ScenarioOutcome {
    Simulate { k: u32, seed: u64, result: PairedResult },
    Emurun { seed: u64, result: EmuResult },
}

/// Summary of one simulated protocol run; overhead is packets sent over K.
pub fn sim_summary(run: &RunResult, k: u32) -> RunSummary {
    let overheads: Vec<f64> = run.frames.iter().map(|f| f.packets_sent as f64 / k as f64).collect();
    RunSummary::from_frames(&run.latencies_ms(), &overheads)
}

pub fn emu_summary(result: &EmuResult) -> RunSummary {
    let overheads: Vec<f64> = result.frames.iter().map(|f| f.sent_ratio).collect();
    RunSummary::from_frames(&result.latencies_ms(), &overheads)
}

#[derive(Serialize)]
struct SimRunJson<'a> {
    scenario: &'a str,
    mode: Mode,
    seed: u64,
    liquid: SimProtocolJson,
    oracle: SimProtocolJson,
}

#[derive(Serialize)]
struct SimProtocolJson {
    summary: RunSummary,
    packets_sent: u64,
    packets_lost: u64,
    packets_arrived: u64,
    duplicate_sends: u64,
    slots_run: u64,
}

impl SimProtocolJson {
    fn new(run: &RunResult, k: u32) -> Self {
        Self {
            summary: sim_summary(run, k),
            packets_sent: run.packets_sent,
            packets_lost: run.packets_lost,
            packets_arrived: run.packets_arrived,
            duplicate_sends: run.duplicate_sends,
            slots_run: run.slots_run,
        }
    }
}

#[derive(Serialize)]
struct EmuRunJson<'a> {
    scenario: &'a str,
    mode: Mode,
    seed: u64,
    summary: RunSummary,
    feedback_fraction: f64,
    metadata: &'a emu::RunMetadata,
}

fn create(dir: &Path, name: &str) -> io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

impl ScenarioOutcome {
    /// Summary lines, one per protocol run.
    pub fn summaries(&self) -> Vec<(&'static str, RunSummary)> {
        match self {
            Self::Simulate { k, result, .. } => vec![
                ("liquid", sim_summary(&result.liquid, *k)),
                ("oracle", sim_summary(&result.oracle, *k)),
            ],
            Self::Emurun { result, .. } => vec![("liquid", emu_summary(result))],
        }
    }

    /// Writes `frames.csv`, `run.json` and, for simulations, `bandwidth.csv`.
    /// Returns the files written.
    pub fn write(&self, scenario: &str, dir: &Path) -> io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut written = vec![dir.join("frames.csv")];
        match self {
            Self::Simulate { k, seed, result } => {
                sim::write_frames_csv(create(dir, "frames.csv")?, &[&result.liquid, &result.oracle])?;
                sim::write_bandwidth_csv(create(dir, "bandwidth.csv")?, &result.bandwidth)?;
                written.push(dir.join("bandwidth.csv"));
                let doc = SimRunJson {
                    scenario,
                    mode: Mode::Simulate,
                    seed: *seed,
                    liquid: SimProtocolJson::new(&result.liquid, *k),
                    oracle: SimProtocolJson::new(&result.oracle, *k),
                };
                serde_json::to_writer_pretty(create(dir, "run.json")?, &doc)?;
            }
            Self::Emurun { seed, result } => {
                emu::write_frames_csv(create(dir, "frames.csv")?, &result.frames)?;
                let doc = EmuRunJson {
                    scenario,
                    mode: Mode::Emurun,
                    seed: *seed,
                    summary: emu_summary(result),
                    feedback_fraction: result.metadata.feedback_fraction(),
                    metadata: &result.metadata,
                };
                serde_json::to_writer_pretty(create(dir, "run.json")?, &doc)?;
            }
        }
        written.push(dir.join("run.json"));
        Ok(written)
    }
}
