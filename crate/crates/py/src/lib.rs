//! Python bindings: the simulator, the two trainers, metrics and the
//! explainability helpers. Structured results come back as plain Python
//! dicts and lists.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use marl_drive::explain::{read_traces, render_svg, top_k_influential, RenderOptions};
use marl_drive::maddpg::{self, MaddpgConfig};
use marl_drive::mappo::{self, PpoConfig};
use marl_drive::metrics::{aggregate, compare_runs, score_episode, EpisodeLog, RunReport};
use marl_drive::replay::{event_score as score_events, EventWeights};
use marl_drive::sim::{self, AgentAction, AgentEvents, SimState};
use marl_drive::train::{MemorySink, NullSink};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(value).map_err(runtime_err)?)
}

fn parse_config<T: for<'de> serde::Deserialize<'de> + Default>(config: Option<&str>) -> PyResult<T> {
    match config {
        Some(text) => serde_json::from_str(text).map_err(value_err),
        None => Ok(T::default()),
    }
}

/// `(observations, rewards, done, events)` of one simulator step.
type StepResult<'py> = (Vec<Vec<f64>>, Vec<f64>, bool, Bound<'py, PyAny>);

/// A validated road layout.
#[pyclass(name = "Scenario", module = "marl_drive_py", frozen)]
struct PyScenario {
    inner: Arc<sim::Scenario>,
}

#[pymethods]
impl PyScenario {
    /// Built-in layout: "merge", "intersection" or "straight".
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        let inner = sim::Scenario::builtin(name).map_err(value_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = sim::Scenario::from_toml_str(text).map_err(value_err)?;
        Ok(Self { inner: Arc::new(inner) })
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.inner.max_steps()
    }

    /// Largest supported agent count.
    #[getter]
    fn max_agents(&self) -> usize {
        self.inner.spawns().len()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn __repr__(&self) -> String {
        format!("Scenario({:?})", self.inner.name())
    }
}

/// One episode of the simulator. Actions are normalized `[accel, yaw_rate]`
/// pairs in `[-1, 1]`.
#[pyclass(name = "Simulator", module = "marl_drive_py")]
struct PySimulator {
    scenario: Arc<sim::Scenario>,
    n_agents: usize,
    state: SimState,
    obs: Vec<Vec<f64>>,
}

#[pymethods]
impl PySimulator {
    #[new]
    #[pyo3(signature = (scenario, n_agents, seed=0))]
    fn new(scenario: &PyScenario, n_agents: usize, seed: u64) -> PyResult<Self> {
        let (state, obs) = sim::reset(scenario.inner.clone(), n_agents, seed).map_err(value_err)?;
        Ok(Self {
            scenario: scenario.inner.clone(),
            n_agents,
            state,
            obs: obs.agents,
        })
    }

    /// Starts a new episode; returns the observations.
    fn reset(&mut self, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let (state, obs) = sim::reset(self.scenario.clone(), self.n_agents, seed).map_err(value_err)?;
        self.state = state;
        self.obs = obs.agents;
        Ok(self.obs.clone())
    }

    /// Returns `(observations, rewards, done, events)`.
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        actions: Vec<[f64; 2]>,
    ) -> PyResult<StepResult<'py>> {
        let physical: Vec<AgentAction> = actions.iter().map(|&a| AgentAction::from_normalized(a)).collect();
        let (next, out) = sim::step(&self.state, &physical).map_err(value_err)?;
        self.state = next;
        self.obs = out.observation.agents;
        let events = to_py(py, &out.events.agents)?;
        Ok((self.obs.clone(), out.rewards, out.done, events))
    }

    #[getter]
    fn observations(&self) -> Vec<Vec<f64>> {
        self.obs.clone()
    }

    #[getter]
    fn done(&self) -> bool {
        self.state.is_done()
    }

    #[getter]
    fn step_count(&self) -> usize {
        self.state.step_count()
    }

    /// `(x, y, heading, speed, status)` per agent.
    fn poses(&self) -> Vec<(f64, f64, f64, f64, String)> {
        self.state
            .vehicles()
            .iter()
            .map(|v| {
                let status = if v.crashed() {
                    "crashed"
                } else if v.reached_goal() {
                    "reached_goal"
                } else {
                    "alive"
                };
                (v.x, v.y, v.heading, v.speed, status.to_string())
            })
            .collect()
    }
}

/// Driving-event score of one agent step, split into its weighted terms.
#[pyfunction]
#[pyo3(signature = (events, speed_delta, completion_delta, weights_json=None))]
fn event_score<'py>(
    py: Python<'py>,
    events: &Bound<'py, PyDict>,
    speed_delta: f64,
    completion_delta: f64,
    weights_json: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let text: String = py.import("json")?.call_method1("dumps", (events,))?.extract()?;
    let ev: AgentEvents = serde_json::from_str(&text).map_err(value_err)?;
    let weights: EventWeights = parse_config(weights_json)?;
    let score = score_events(&ev, speed_delta, completion_delta, &weights);
    let out = to_py(py, &score)?;
    out.set_item("total", score.total())?;
    Ok(out)
}

/// Generalized advantage estimates and returns.
#[pyfunction]
fn compute_gae(
    rewards: Vec<f64>,
    values: Vec<f64>,
    dones: Vec<bool>,
    last_value: f64,
    gamma: f64,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PyValueError::new_err("rewards, values and dones must have equal length"));
    }
    Ok(mappo::compute_gae(&rewards, &values, &dones, last_value, gamma, lam))
}

#[pyfunction]
fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    mappo::clipped_surrogate(ratio, advantage, clip_eps)
}

/// Scores an episode log given as JSON (`{"episode_id", "n_agents",
/// "max_steps", "steps": [{"active", "events": {"agents": [...]}}]}`).
#[pyfunction]
fn score_episode_json<'py>(py: Python<'py>, log_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let log: EpisodeLog = serde_json::from_str(log_json).map_err(value_err)?;
    to_py(py, &score_episode(&log).map_err(value_err)?)
}

/// Per-metric mean/std/min/max of a list of episode metric dicts.
#[pyfunction]
fn aggregate_metrics<'py>(py: Python<'py>, episodes: &Bound<'py, PyList>) -> PyResult<Bound<'py, PyAny>> {
    let text: String = py.import("json")?.call_method1("dumps", (episodes,))?.extract()?;
    let eps = serde_json::from_str::<Vec<_>>(&text).map_err(value_err)?;
    to_py(py, &aggregate(&eps).map_err(value_err)?)
}

/// Comparison table of two report documents.
#[pyfunction]
fn compare_reports(report_a: &str, report_b: &str) -> PyResult<String> {
    let a = RunReport::from_json(report_a).map_err(value_err)?;
    let b = RunReport::from_json(report_b).map_err(value_err)?;
    Ok(compare_runs(&a, &b).to_string())
}

/// Trains MADDPG; returns the per-episode metrics. `config_json` holds
/// hyperparameter overrides.
#[pyfunction]
#[pyo3(signature = (scenario, n_agents, episodes, seed=0, config_json=None))]
fn train_maddpg<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    n_agents: usize,
    episodes: u64,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: MaddpgConfig = parse_config(config_json)?;
    let sc = scenario.inner.clone();
    let metrics = py
        .detach(|| maddpg::train(sc, config, n_agents, episodes, seed, &mut NullSink).map(|(_, m)| m))
        .map_err(runtime_err)?;
    to_py(py, &metrics)
}

/// Trains MAPPO for exactly `env_steps` environment steps; returns the
/// metrics of every completed episode.
#[pyfunction]
#[pyo3(signature = (scenario, n_agents, env_steps, seed=0, config_json=None))]
fn train_mappo<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    n_agents: usize,
    env_steps: u64,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let config: PpoConfig = parse_config(config_json)?;
    let sc = scenario.inner.clone();
    let metrics = py
        .detach(|| mappo::train(sc, config, n_agents, env_steps, seed, &mut NullSink).map(|(_, m)| m))
        .map_err(runtime_err)?;
    to_py(py, &metrics)
}

/// Trains MADDPG with traces kept and returns `(metrics, attribution_table)`
/// for the `k` most influential transitions.
#[pyfunction]
#[pyo3(signature = (scenario, n_agents, episodes, k=20, seed=0, config_json=None))]
fn explain_maddpg<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    n_agents: usize,
    episodes: u64,
    k: usize,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<(Bound<'py, PyAny>, String)> {
    let config: MaddpgConfig = parse_config(config_json)?;
    let sc = scenario.inner.clone();
    let sink = py
        .detach(|| {
            let mut sink = MemorySink {
                keep_traces: true,
                ..MemorySink::default()
            };
            maddpg::train(sc, config, n_agents, episodes, seed, &mut sink).map(|_| sink)
        })
        .map_err(runtime_err)?;
    let report = top_k_influential(&sink.traces, k).map_err(runtime_err)?;
    Ok((to_py(py, &sink.metrics)?, report.to_string()))
}

/// Renders every episode of a trace file's text as SVG documents.
#[pyfunction]
#[pyo3(signature = (scenario, trace_text, waypoint_stride=10))]
fn render_trace(scenario: &PyScenario, trace_text: &str, waypoint_stride: usize) -> PyResult<Vec<(u64, String)>> {
    let file = read_traces(trace_text).map_err(value_err)?;
    let opts = RenderOptions {
        waypoint_stride,
        ..RenderOptions::default()
    };
    file.episodes()
        .into_iter()
        .map(|(id, steps)| Ok((id, render_svg(&scenario.inner, &steps, &opts).map_err(runtime_err)?)))
        .collect()
}

#[pymodule]
fn marl_drive_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OBS_DIM", sim::OBS_DIM)?;
    m.add("ACT_DIM", sim::ACT_DIM)?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PySimulator>()?;
    m.add_function(wrap_pyfunction!(event_score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gae, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_surrogate, m)?)?;
    m.add_function(wrap_pyfunction!(score_episode_json, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compare_reports, m)?)?;
    m.add_function(wrap_pyfunction!(train_maddpg, m)?)?;
    m.add_function(wrap_pyfunction!(train_mappo, m)?)?;
    m.add_function(wrap_pyfunction!(explain_maddpg, m)?)?;
    m.add_function(wrap_pyfunction!(render_trace, m)?)?;
    Ok(())
}
