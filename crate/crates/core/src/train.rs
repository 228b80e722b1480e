//! Pieces shared by the two trainers: the sink interface that receives
//! metrics, telemetry and traces, and seed derivation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::explain::{AgentTrace, Pose, StepTrace, TraceError};
use crate::metrics::{score_episode, EpisodeLog, EpisodeMetrics, MetricsError};
use crate::nn::NetError;
use crate::replay::{ReplayError, ReplayStats};
use crate::sim::{reset, step, AgentAction, AgentEvents, JointObservation, Scenario, SimError, SimState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sink: {0}")]
    Sink(#[from] TraceError),
    #[error("non-finite {what} at update {update}")]
    NonFinite { what: String, update: u64 },
}

/// Per-episode learner statistics. Fields that do not apply to an
/// algorithm, or to an episode without updates, are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub episode: u64,
    pub env_steps: u64,
    pub updates: u64,
    pub sigma: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub replay: Option<ReplayStats>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub clip_fraction: Option<f64>,
}

/// Receives everything a training run emits, in order.
pub trait TrainSink {
    fn episode(&mut self, _metrics: &EpisodeMetrics, _telemetry: &Telemetry) -> Result<(), TrainError> {
        Ok(())
    }

    /// Whether step traces should be built at all.
    fn wants_traces(&self) -> bool {
        false
    }

    fn step(&mut self, _trace: &StepTrace) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

/// Keeps everything in memory; handy for tests and bindings.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub keep_traces: bool,
    pub metrics: Vec<EpisodeMetrics>,
    pub telemetry: Vec<Telemetry>,
    pub traces: Vec<StepTrace>,
}

impl TrainSink for MemorySink {
    fn episode(&mut self, metrics: &EpisodeMetrics, telemetry: &Telemetry) -> Result<(), TrainError> {
        self.metrics.push(metrics.clone());
        self.telemetry.push(telemetry.clone());
        Ok(())
    }

    fn wants_traces(&self) -> bool {
        self.keep_traces
    }

    fn step(&mut self, trace: &StepTrace) -> Result<(), TrainError> {
        self.traces.push(trace.clone());
        Ok(())
    }
}

/// Environment seed of one episode (splitmix64 of the run seed and index).
pub fn episode_seed(run_seed: u64, episode: u64) -> u64 {
    let mut z = run_seed ^ episode.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean, or `None` for an empty slice.
pub(crate) fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// A deterministic joint policy in normalized action space.
pub trait Policy {
    fn n_agents(&self) -> usize;

    fn greedy(&self, obs: &JointObservation) -> Result<Vec<[f64; 2]>, TrainError>;
}

/// Greedy rollouts; nothing about the policy changes.
pub fn evaluate(
    policy: &dyn Policy,
    scenario: Arc<Scenario>,
    episodes: u64,
    seed: u64,
    sink: &mut dyn TrainSink,
) -> Result<Vec<EpisodeMetrics>, TrainError> {
    let n = policy.n_agents();
    let mut out = Vec::with_capacity(episodes as usize);
    for episode in 0..episodes {
        let (mut state, mut obs) = reset(scenario.clone(), n, episode_seed(seed, episode))?;
        let mut log = EpisodeLog::new(episode, n, scenario.max_steps());
        loop {
            let active: Vec<bool> = state.vehicles().iter().map(|v| v.is_alive()).collect();
            let mut actions = policy.greedy(&obs)?;
            for (a, &on) in actions.iter_mut().zip(&active) {
                if !on {
                    *a = [0.0, 0.0];
                }
            }
            let physical: Vec<AgentAction> = actions.iter().map(|&a| AgentAction::from_normalized(a)).collect();
            let (next, outcome) = step(&state, &physical)?;
            if sink.wants_traces() {
                sink.step(&StepTrace {
                    episode_id: episode,
                    step: state.step_count(),
                    agents: trace_agents(&state, &next, &obs, &actions, &outcome.events.agents, &active),
                    priorities: Vec::new(),
                })?;
            }
            log.push(active, outcome.events);
            state = next;
            obs = outcome.observation;
            if outcome.done {
                break;
            }
        }
        let metrics = score_episode(&log)?;
        sink.episode(
            &metrics,
            &Telemetry {
                episode,
                ..Telemetry::default()
            },
        )?;
        out.push(metrics);
    }
    Ok(out)
}

pub(crate) fn trace_agents(
    state: &SimState,
    next: &SimState,
    obs: &JointObservation,
    actions: &[[f64; 2]],
    events: &[AgentEvents],
    active: &[bool],
) -> Vec<AgentTrace> {
    (0..state.n_agents())
        .map(|i| {
            let v = &state.vehicles()[i];
            AgentTrace {
                active: active[i],
                pose: Pose {
                    x: v.x,
                    y: v.y,
                    heading: v.heading,
                    speed: v.speed,
                },
                next_position: next.vehicles()[i].position(),
                action: actions[i],
                waypoints: obs.waypoints(i),
                events: events[i].clone(),
            }
        })
        .collect()
}

