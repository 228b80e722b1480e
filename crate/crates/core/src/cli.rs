//! Command-line front end. A run directory looks like
//!
//! ```text
//! <out>/config.echo        effective settings (JSON)
//! <out>/checkpoints/       ep-000100.json, ..., final.json (+ .replay.json for maddpg)
//! <out>/metrics.report     RunReport (JSON)
//! <out>/telemetry.jsonl    one learner record per episode
//! <out>/traces/train.jsonl step traces
//! ```
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime abort, 4 I/O error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::explain::{read_traces, render_svg, top_k_influential, RenderOptions, StepTrace, TraceHeader, TraceWriter};
use crate::maddpg::{MaddpgConfig, MaddpgSnapshot, MaddpgTrainer, Transition};
use crate::mappo::{MappoSnapshot, MappoTrainer, PpoConfig};
use crate::metrics::{compare_runs, EpisodeMetrics, MetricsError, RunReport};
use crate::replay::PrioritizedReplay;
use crate::sim::{Scenario, ScenarioError};
use crate::train::{evaluate, Policy, Telemetry, TrainError, TrainSink};

pub const CHECKPOINT_FORMAT: &str = "marl-drive-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Sink(crate::explain::TraceError::Io(io)) => CliError::Io(io.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "marl-drive", version, about = "Multi-agent driving: train, evaluate and explain MADDPG/MAPPO policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy and write a run directory.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Render every episode of a trace file as SVG.
    Replay(ReplayArgs),
    /// Priority attribution table for a MADDPG run.
    Explain(ExplainArgs),
    /// Compare two metric reports.
    Compare(CompareArgs),
    /// Print a built-in scenario as TOML.
    DumpScenario {
        name: String,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// maddpg or mappo
    #[arg(long)]
    pub algo: Option<String>,
    /// Built-in scenario name or path to a scenario TOML file.
    #[arg(long, default_value = "merge")]
    pub scenario: String,
    #[arg(long, default_value_t = 2)]
    pub agents: usize,
    #[arg(long, default_value_t = 100)]
    pub episodes: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Hyperparameter override `key=value` (value parsed as JSON when possible).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub no_trace: bool,
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: u64,
    /// Keep the replay sidecar of every periodic checkpoint, not just the newest.
    #[arg(long)]
    pub keep_all_replay: bool,
    /// Continue a run from one of its checkpoints.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub episodes: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate on another scenario than the one trained on.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Proceed even if the scenario differs from the checkpoint's.
    #[arg(long)]
    pub force: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write step traces.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario to draw; defaults to the one named in the trace header.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub waypoint_stride: usize,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    pub run_dir: PathBuf,
    #[arg(long, default_value_t = crate::explain::DEFAULT_TOP_K)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub report_a: PathBuf,
    pub report_b: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Maddpg,
    Mappo,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "maddpg" => Ok(Algo::Maddpg),
            "mappo" => Ok(Algo::Mappo),
            other => Err(CliError::Config(format!("unknown algo {other:?} (expected maddpg or mappo)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algo::Maddpg => "maddpg",
            Algo::Mappo => "mappo",
        }
    }
}

/// Every effective setting of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algo: Algo,
    pub scenario: String,
    pub scenario_source: String,
    pub agents: usize,
    pub seed: u64,
    pub episodes: u64,
    pub checkpoint_every: u64,
    pub trace: bool,
    pub hyperparameters: Value,
}

impl RunConfig {
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config is serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn scenario(&self) -> Result<Arc<Scenario>, CliError> {
        Ok(Arc::new(Scenario::from_toml_str(&self.scenario_source)?))
    }

    pub fn maddpg(&self) -> Result<MaddpgConfig, CliError> {
        typed(&self.hyperparameters)
    }

    pub fn mappo(&self) -> Result<PpoConfig, CliError> {
        typed(&self.hyperparameters)
    }

    /// Flat map echoed into reports.
    pub fn report_hyperparameters(&self) -> BTreeMap<String, Value> {
        let mut map: BTreeMap<String, Value> = self
            .hyperparameters
            .as_object()
            .map(|o| o.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
            .unwrap_or_default();
        map.insert("agents".into(), self.agents.into());
        map.insert("episodes".into(), self.episodes.into());
        map.insert("seed".into(), self.seed.into());
        map.insert("scenario".into(), self.scenario.clone().into());
        map.insert(
            "scenario_digest".into(),
            hex::encode(Sha256::digest(self.scenario_source.as_bytes())).into(),
        );
        map
    }
}

fn typed<T: for<'de> Deserialize<'de>>(value: &Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(value.clone())
        .map_err(|e| CliError::Config(format!("hyperparameter {}: {}", e.path(), e.inner())))
}

/// Applies `key=value` overrides to a serialized config. Dotted keys reach
/// nested tables; a key that does not exist is an error.
pub fn apply_overrides(base: &Value, overrides: &[String]) -> Result<Value, CliError> {
    let mut value = base.clone();
    for item in overrides {
        let Some((key, raw)) = item.split_once('=') else {
            return Err(CliError::Config(format!("override {item:?} is not key=value")));
        };
        let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cursor = &mut value;
        for part in key.split('.') {
            cursor = cursor
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| CliError::Config(format!("unknown hyperparameter {key:?}")))?;
        }
        *cursor = parsed;
    }
    Ok(value)
}

/// Builds the run configuration for a fresh training run.
pub fn run_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let algo = Algo::parse(
        args.algo
            .as_deref()
            .ok_or_else(|| CliError::Config("--algo is required (maddpg or mappo)".into()))?,
    )?;
    let scenario = Scenario::load(&args.scenario)?;
    let base = match algo {
        Algo::Maddpg => serde_json::to_value(MaddpgConfig::default()),
        Algo::Mappo => serde_json::to_value(PpoConfig::default()),
    }
    .expect("config is serializable");
    let hyperparameters = apply_overrides(&base, &args.overrides)?;
    let cfg = RunConfig {
        algo,
        scenario: args.scenario.clone(),
        scenario_source: scenario.to_toml_string(),
        agents: args.agents,
        seed: args.seed,
        episodes: args.episodes,
        checkpoint_every: args.checkpoint_every,
        trace: !args.no_trace,
        hyperparameters,
    };
    match algo {
        Algo::Maddpg => cfg.maddpg()?.validate()?,
        Algo::Mappo => cfg.mappo()?.validate()?,
    }
    if cfg.checkpoint_every == 0 {
        return Err(CliError::Config("checkpoint_every must be at least 1".into()));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", content = "learner", rename_all = "snake_case")]
pub enum LearnerState {
    Maddpg(MaddpgSnapshot),
    Mappo(MappoSnapshot),
}

/// Portable training state. MADDPG's replay contents live in the sidecar
/// file named by `replay_file`; the checkpoint itself carries only the
/// buffer statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_digest: String,
    pub config: RunConfig,
    pub episodes_done: u64,
    pub metrics: Vec<EpisodeMetrics>,
    pub replay_file: Option<String>,
    pub state: LearnerState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string(self).expect("checkpoint is serializable");
        s.push('\n');
        s
    }

    /// Parses and checks a checkpoint. Errors name the field that failed.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("checkpoint is not valid JSON: {e}")))?;
        let format = value.get("format").and_then(Value::as_str).unwrap_or("");
        let version = value.get("version").and_then(Value::as_u64).unwrap_or(0);
        if format != CHECKPOINT_FORMAT || version != u64::from(CHECKPOINT_VERSION) {
            return Err(CliError::Config(format!(
                "checkpoint format {format:?} version {version} is not supported (expected {CHECKPOINT_FORMAT:?} version {CHECKPOINT_VERSION})"
            )));
        }
        let ckpt: Checkpoint = serde_path_to_error::deserialize(value)
            .map_err(|e| CliError::Config(format!("checkpoint field {}: {}", e.path(), e.inner())))?;
        if ckpt.config.digest() != ckpt.config_digest {
            return Err(CliError::Config("checkpoint field config_digest: does not match config".into()));
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::from_json(&read_file(path)?)
    }
}

/// Writes metrics, telemetry and traces into a run directory.
struct RunSink {
    trace: Option<TraceWriter<BufWriter<File>>>,
    telemetry: BufWriter<File>,
    metrics: Vec<EpisodeMetrics>,
}

impl TrainSink for RunSink {
    fn episode(&mut self, metrics: &EpisodeMetrics, telemetry: &Telemetry) -> Result<(), TrainError> {
        self.metrics.push(metrics.clone());
        let line = serde_json::to_string(telemetry).expect("telemetry is serializable");
        writeln!(self.telemetry, "{line}").map_err(crate::explain::TraceError::Io)?;
        self.telemetry.flush().map_err(crate::explain::TraceError::Io)?;
        if let Some(t) = &mut self.trace {
            t.flush()?;
        }
        Ok(())
    }

    fn wants_traces(&self) -> bool {
        self.trace.is_some()
    }

    fn step(&mut self, trace: &StepTrace) -> Result<(), TrainError> {
        if let Some(t) = &mut self.trace {
            t.record(trace)?;
        }
        Ok(())
    }
}

enum Learner {
    Maddpg(MaddpgTrainer),
    Mappo(MappoTrainer),
}

impl Learner {
    fn episodes_done(&self) -> u64 {
        match self {
            Learner::Maddpg(t) => t.episodes_done(),
            Learner::Mappo(t) => t.episodes_done(),
        }
    }

    fn run_episode(&mut self, sink: &mut dyn TrainSink) -> Result<EpisodeMetrics, TrainError> {
        match self {
            Learner::Maddpg(t) => t.run_episode(sink),
            Learner::Mappo(t) => t.run_episode(sink),
        }
    }
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn save_checkpoint(
    out: &Path,
    name: &str,
    cfg: &RunConfig,
    learner: &Learner,
    metrics: &[EpisodeMetrics],
) -> Result<PathBuf, CliError> {
    let dir = checkpoint_dir(out);
    let (state, replay_file) = match learner {
        Learner::Maddpg(t) => {
            let replay_name = format!("{name}.replay.json");
            let text = serde_json::to_string(t.replay()).expect("replay is serializable");
            write_file(&dir.join(&replay_name), &text)?;
            (LearnerState::Maddpg(t.snapshot()), Some(replay_name))
        }
        Learner::Mappo(t) => (LearnerState::Mappo(t.snapshot()?), None),
    };
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config_digest: cfg.digest(),
        config: cfg.clone(),
        episodes_done: learner.episodes_done(),
        metrics: metrics.to_vec(),
        replay_file,
        state,
    };
    let path = dir.join(format!("{name}.json"));
    write_file(&path, &ckpt.to_json())?;
    Ok(path)
}

/// Keeps only the newest periodic replay sidecar (the final one is kept too).
fn prune_replay_sidecars(out: &Path, keep: &str) -> Result<(), CliError> {
    let dir = checkpoint_dir(out);
    let entries = fs::read_dir(&dir).map_err(|e| io_err(&dir, e))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("ep-") && name.ends_with(".replay.json") && name != keep {
            fs::remove_file(entry.path()).map_err(|e| io_err(&entry.path(), e))?;
        }
    }
    Ok(())
}

fn report_for(cfg: &RunConfig, metrics: Vec<EpisodeMetrics>) -> Result<RunReport, CliError> {
    let scenario = cfg.scenario()?;
    RunReport::new(
        cfg.algo.name().to_uppercase(),
        cfg.algo.name(),
        scenario.name(),
        cfg.seed,
        cfg.digest(),
        cfg.report_hyperparameters(),
        metrics,
    )
    .map_err(|e| CliError::Runtime(e.to_string()))
}

/// `train`: returns the path of the run's report.
pub fn cmd_train(args: &TrainArgs) -> Result<PathBuf, CliError> {
    let (cfg, mut learner, mut metrics) = match &args.resume {
        Some(path) => resume_learner(path)?,
        None => {
            let cfg = run_config(args)?;
            let learner = fresh_learner(&cfg)?;
            (cfg, learner, Vec::new())
        }
    };
    let out = &args.out;
    fs::create_dir_all(checkpoint_dir(out)).map_err(|e| io_err(out, e))?;
    fs::create_dir_all(out.join("traces")).map_err(|e| io_err(out, e))?;
    let echo = serde_json::to_string_pretty(&cfg).expect("config is serializable") + "\n";
    write_file(&out.join("config.echo"), &echo)?;
    let trace = if cfg.trace {
        let path = out.join("traces").join("train.jsonl");
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let header = TraceHeader::new(cfg.algo.name(), &cfg.scenario, cfg.agents);
        Some(TraceWriter::new(BufWriter::new(file), &header).map_err(|e| CliError::Io(e.to_string()))?)
    } else {
        None
    };
    let tel_path = out.join("telemetry.jsonl");
    let telemetry = BufWriter::new(File::create(&tel_path).map_err(|e| io_err(&tel_path, e))?);
    let mut sink = RunSink {
        trace,
        telemetry,
        metrics: Vec::new(),
    };
    while learner.episodes_done() < cfg.episodes {
        match learner.run_episode(&mut sink) {
            Ok(m) => metrics.push(m),
            Err(e) => {
                let saved = save_checkpoint(out, "abort", &cfg, &learner, &metrics);
                let note = match saved {
                    Ok(p) => format!(" (partial checkpoint at {})", p.display()),
                    Err(_) => String::new(),
                };
                return Err(CliError::Runtime(format!("{e}{note}")));
            }
        }
        let done = learner.episodes_done();
        if done % cfg.checkpoint_every == 0 {
            let name = format!("ep-{done:06}");
            save_checkpoint(out, &name, &cfg, &learner, &metrics)?;
            if !args.keep_all_replay {
                prune_replay_sidecars(out, &format!("{name}.replay.json"))?;
            }
        }
    }
    save_checkpoint(out, "final", &cfg, &learner, &metrics)?;
    if let Some(t) = &mut sink.trace {
        t.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    let report = report_for(&cfg, metrics)?;
    let path = out.join("metrics.report");
    write_file(&path, &report.to_json())?;
    Ok(path)
}

fn fresh_learner(cfg: &RunConfig) -> Result<Learner, CliError> {
    let scenario = cfg.scenario()?;
    Ok(match cfg.algo {
        Algo::Maddpg => Learner::Maddpg(MaddpgTrainer::new(
            scenario,
            cfg.maddpg()?,
            cfg.agents,
            cfg.seed,
            cfg.episodes,
        )?),
        Algo::Mappo => Learner::Mappo(MappoTrainer::new(scenario, cfg.mappo()?, cfg.agents, cfg.seed)?),
    })
}

fn resume_learner(path: &Path) -> Result<(RunConfig, Learner, Vec<EpisodeMetrics>), CliError> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ckpt.config.clone();
    let scenario = cfg.scenario()?;
    let learner = match ckpt.state {
        LearnerState::Maddpg(snap) => {
            let name = ckpt
                .replay_file
                .as_deref()
                .ok_or_else(|| CliError::Config("checkpoint field replay_file: missing".into()))?;
            let replay_path = path.parent().unwrap_or(Path::new(".")).join(name);
            let text = read_file(&replay_path)?;
            let replay: PrioritizedReplay<Transition> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", replay_path.display())))?;
            Learner::Maddpg(MaddpgTrainer::restore(
                scenario,
                cfg.maddpg()?,
                cfg.seed,
                cfg.episodes,
                snap,
                replay,
            )?)
        }
        LearnerState::Mappo(snap) => Learner::Mappo(MappoTrainer::restore(scenario, cfg.mappo()?, cfg.seed, snap)?),
    };
    Ok((cfg, learner, ckpt.metrics))
}

struct EvalSink {
    trace: Option<TraceWriter<BufWriter<File>>>,
}

impl TrainSink for EvalSink {
    fn wants_traces(&self) -> bool {
        self.trace.is_some()
    }

    fn step(&mut self, trace: &StepTrace) -> Result<(), TrainError> {
        if let Some(t) = &mut self.trace {
            t.record(trace)?;
        }
        Ok(())
    }
}

/// `eval`: greedy rollouts of a checkpoint. `warn` receives the scenario
/// mismatch notice when `--force` overrides it.
pub fn cmd_eval(args: &EvalArgs, warn: &mut dyn Write) -> Result<RunReport, CliError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(name) = &args.scenario {
        let other = Scenario::load(name)?;
        let source = other.to_toml_string();
        if source != cfg.scenario_source {
            if !args.force {
                return Err(CliError::Config(format!(
                    "scenario {name:?} differs from the checkpoint's scenario {:?}; pass --force to evaluate anyway",
                    cfg.scenario
                )));
            }
            let _ = writeln!(
                warn,
                "warning: evaluating on {name:?}, checkpoint was trained on {:?}",
                cfg.scenario
            );
        }
        cfg.scenario = name.clone();
        cfg.scenario_source = source;
    }
    let scenario = cfg.scenario()?;
    let trace = match &args.trace {
        Some(path) => {
            let file = File::create(path).map_err(|e| io_err(path, e))?;
            let header = TraceHeader::new(cfg.algo.name(), &cfg.scenario, cfg.agents);
            Some(TraceWriter::new(BufWriter::new(file), &header).map_err(|e| CliError::Io(e.to_string()))?)
        }
        None => None,
    };
    let mut sink = EvalSink { trace };
    let policy: Box<dyn Policy> = match ckpt.state {
        LearnerState::Maddpg(s) => Box::new(s.agents),
        LearnerState::Mappo(s) => Box::new(s.nets),
    };
    if policy.n_agents() > scenario.spawns().len() {
        return Err(CliError::Config(format!(
            "checkpoint has {} agents but scenario {} has {} spawns",
            policy.n_agents(),
            scenario.name(),
            scenario.spawns().len()
        )));
    }
    let metrics = evaluate(policy.as_ref(), scenario.clone(), args.episodes, args.seed, &mut sink)?;
    if let Some(t) = &mut sink.trace {
        t.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    let mut hyper = cfg.report_hyperparameters();
    hyper.insert("eval_episodes".into(), args.episodes.into());
    hyper.insert("eval_seed".into(), args.seed.into());
    hyper.insert("trained_episodes".into(), ckpt.episodes_done.into());
    let report = RunReport::new(
        cfg.algo.name().to_uppercase(),
        cfg.algo.name(),
        scenario.name(),
        args.seed,
        ckpt.config_digest,
        hyper,
        metrics,
    )
    .map_err(|e| match e {
        MetricsError::Empty => CliError::Config("eval needs at least one episode".into()),
        other => CliError::Runtime(other.to_string()),
    })?;
    if let Some(out) = &args.out {
        write_file(out, &report.to_json())?;
    }
    Ok(report)
}

/// `replay`: one SVG per episode; returns the written paths.
pub fn cmd_replay(args: &ReplayArgs) -> Result<Vec<PathBuf>, CliError> {
    let text = read_file(&args.trace)?;
    let file = read_traces(&text).map_err(|e| CliError::Config(format!("{}: {e}", args.trace.display())))?;
    if file.steps.is_empty() {
        return Err(CliError::Config(format!("{}: trace has no steps", args.trace.display())));
    }
    let scenario = Scenario::load(args.scenario.as_deref().unwrap_or(&file.header.scenario))?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let opts = RenderOptions {
        waypoint_stride: args.waypoint_stride,
        ..RenderOptions::default()
    };
    let mut written = Vec::new();
    for (id, steps) in file.episodes() {
        let svg = render_svg(&scenario, &steps, &opts).map_err(|e| CliError::Runtime(e.to_string()))?;
        let path = args.out.join(format!("episode-{id:06}.svg"));
        write_file(&path, &svg)?;
        written.push(path);
    }
    Ok(written)
}

/// `explain`: attribution table for a run directory.
pub fn cmd_explain(args: &ExplainArgs) -> Result<String, CliError> {
    let path = args.run_dir.join("traces").join("train.jsonl");
    let text = read_file(&path)?;
    let file = read_traces(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let has_records = file.steps.iter().any(|s| !s.priorities.is_empty());
    if file.header.algo != "maddpg" || !has_records {
        return Err(CliError::Config(format!(
            "not applicable to this {} run: transparent attribution requires priority replay",
            file.header.algo
        )));
    }
    let report = top_k_influential(&file.steps, args.k).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(report.to_string())
}

/// `compare`: comparison table of two reports.
pub fn cmd_compare(args: &CompareArgs) -> Result<String, CliError> {
    let load = |p: &Path| -> Result<RunReport, CliError> {
        RunReport::from_json(&read_file(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
    };
    let a = load(&args.report_a)?;
    let b = load(&args.report_b)?;
    Ok(compare_runs(&a, &b).to_string())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|p| format!("wrote {}\n", p.display())),
        Command::Eval(a) => cmd_eval(&a, err).map(|r| {
            if a.out.is_some() {
                String::new()
            } else {
                r.to_json()
            }
        }),
        Command::Replay(a) => cmd_replay(&a).map(|paths| {
            paths
                .iter()
                .map(|p| format!("wrote {}\n", p.display()))
                .collect::<String>()
        }),
        Command::Explain(a) => cmd_explain(&a),
        Command::Compare(a) => cmd_compare(&a).map(|s| s + "\n"),
        Command::DumpScenario { name } => Scenario::builtin_source(&name)
            .map(str::to_string)
            .map_err(CliError::from),
    };
    match result {
        Ok(text) => {
            let _ = write!(out, "{text}");
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
