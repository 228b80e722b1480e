use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geometry::{dist, wrap_angle, Projection};
use super::observe::{observe, JointObservation};
use super::scenario::Scenario;
use super::{A_MAX, LOOKAHEAD, OFF_ROAD_SLACK, OMEGA_MAX, RULE_SLACK, VEHICLE_RADIUS, V_MAX};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("requested {requested} agents but scenario {scenario:?} has only {available} spawns")]
    TooManyAgents {
        requested: usize,
        available: usize,
        scenario: String,
    },
    #[error("at least one agent is required")]
    NoAgents,
    #[error("step called after the episode finished")]
    StepAfterDone,
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action for agent {agent} is not finite")]
    NonFiniteAction { agent: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Alive,
    Crashed,
    ReachedGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Heading in `(-pi, pi]`.
    pub heading: f64,
    pub speed: f64,
    /// Last applied acceleration command.
    pub accel: f64,
    /// Last applied yaw-rate command.
    pub yaw_rate: f64,
    /// Index into [`Scenario::lanes`].
    pub lane: usize,
    /// Arclength along the current lane.
    pub arclength: f64,
    pub status: Status,
}

impl VehicleState {
    pub fn is_alive(&self) -> bool {
        self.status == Status::Alive
    }

    pub fn crashed(&self) -> bool {
        self.status == Status::Crashed
    }

    pub fn reached_goal(&self) -> bool {
        self.status == Status::ReachedGoal
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// A control command. Out-of-range values are clamped when applied.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentAction {
    pub accel: f64,
    pub yaw_rate: f64,
}

impl AgentAction {
    pub fn new(accel: f64, yaw_rate: f64) -> Self {
        Self { accel, yaw_rate }
    }

    /// Maps a policy output in `[-1, 1]²` onto the physical command range.
    pub fn from_normalized(a: [f64; 2]) -> Self {
        Self {
            accel: a[0].clamp(-1.0, 1.0) * A_MAX,
            yaw_rate: a[1].clamp(-1.0, 1.0) * OMEGA_MAX,
        }
    }

    pub fn clamped(self) -> Self {
        Self {
            accel: self.accel.clamp(-A_MAX, A_MAX),
            yaw_rate: self.yaw_rate.clamp(-OMEGA_MAX, OMEGA_MAX),
        }
    }
}

/// Everything that happened to one agent during one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentEvents {
    pub collision: bool,
    pub off_road: bool,
    pub wrong_way: bool,
    pub speed_over_limit: bool,
    pub lane_change_violation: bool,
    pub goal_reached: bool,
    pub linear_jerk: f64,
    pub angular_jerk: f64,
    pub lane_center_offset: f64,
    pub min_obstacle_distance: f64,
}

impl AgentEvents {
    pub fn rule_violations(&self) -> u32 {
        u32::from(self.wrong_way) + u32::from(self.speed_over_limit) + u32::from(self.lane_change_violation)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepEvents {
    pub agents: Vec<AgentEvents>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: JointObservation,
    pub rewards: Vec<f64>,
    pub events: StepEvents,
    pub done: bool,
}

/// World state for one episode.
#[derive(Debug, Clone)]
pub struct SimState {
    scenario: Arc<Scenario>,
    vehicles: Vec<VehicleState>,
    progress: Vec<f64>,
    step_count: usize,
    done: bool,
    seed: u64,
}

impl SimState {
    /// Places caller-supplied vehicles in the scenario. Agent `i` follows the
    /// route of spawn `i`; lanes and progress are recomputed from the poses.
    pub fn with_vehicles(scenario: Arc<Scenario>, mut vehicles: Vec<VehicleState>) -> Result<Self, SimError> {
        check_agent_count(&scenario, vehicles.len())?;
        let mut progress = Vec::with_capacity(vehicles.len());
        for (i, v) in vehicles.iter_mut().enumerate() {
            let (lane, proj) = locate(&scenario, v.lane.min(scenario.lanes.len() - 1), v.position());
            v.lane = lane;
            v.arclength = proj.s;
            progress.push(scenario.routes[i].path.project(v.position()).s);
        }
        Ok(Self {
            scenario,
            vehicles,
            progress,
            step_count: 0,
            done: false,
            seed: 0,
        })
    }

    pub fn scenario(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn vehicles(&self) -> &[VehicleState] {
        &self.vehicles
    }

    pub fn n_agents(&self) -> usize {
        self.vehicles.len()
    }

    /// Route arclength reached by each agent.
    pub fn progress(&self) -> &[f64] {
        &self.progress
    }

    /// Fraction of each agent's route covered, in `[0, 1]`.
    pub fn completion(&self, agent: usize) -> f64 {
        let r = &self.scenario.routes[agent];
        ((self.progress[agent] - r.start) / r.length()).clamp(0.0, 1.0)
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lane_id(&self, agent: usize) -> &str {
        &self.scenario.lanes[self.vehicles[agent].lane].id
    }
}

fn check_agent_count(scenario: &Scenario, n: usize) -> Result<(), SimError> {
    if n == 0 {
        return Err(SimError::NoAgents);
    }
    if n > scenario.spawns().len() {
        return Err(SimError::TooManyAgents {
            requested: n,
            available: scenario.spawns().len(),
            scenario: scenario.name().to_string(),
        });
    }
    Ok(())
}

/// Starts an episode with the first `n_agents` spawns.
pub fn reset(scenario: Arc<Scenario>, n_agents: usize, seed: u64) -> Result<(SimState, JointObservation), SimError> {
    check_agent_count(&scenario, n_agents)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = scenario.spawn_jitter();
    let mut vehicles = Vec::with_capacity(n_agents);
    for sp in scenario.spawns().iter().take(n_agents) {
        let lane_idx = scenario.lane_index(&sp.lane).expect("validated spawn lane");
        let lane = &scenario.lanes[lane_idx];
        let mut s = sp.s;
        if jitter > 0.0 {
            s = (s + rng.random_range(-jitter..=jitter)).clamp(0.0, lane.centerline.length());
        }
        let (p, heading) = lane.centerline.point_at(s);
        vehicles.push(VehicleState {
            x: p[0],
            y: p[1],
            heading: wrap_angle(heading),
            speed: sp.speed.min(V_MAX),
            accel: 0.0,
            yaw_rate: 0.0,
            lane: lane_idx,
            arclength: s,
            status: Status::Alive,
        });
    }
    let mut state = SimState::with_vehicles(scenario, vehicles)?;
    state.seed = seed;
    let obs = observe(&state);
    Ok((state, obs))
}

/// Finds the lane a point belongs to, preferring to stay on `current`.
///
/// A vehicle keeps its lane while it is inside the lane's extent and within
/// half a lane width of the centerline. Otherwise successors and adjacent
/// lanes are tried, then every lane; ties go to the lower lane index.
fn locate(scenario: &Scenario, current: usize, p: [f64; 2]) -> (usize, Projection) {
    let lanes = &scenario.lanes;
    let here = lanes[current].centerline.project(p);
    if here.overshoot == 0.0 && here.lateral.abs() <= lanes[current].half_width() {
        return (current, here);
    }
    let fits = |idx: usize| {
        let pr = lanes[idx].centerline.project(p);
        (pr.overshoot == 0.0 && pr.distance <= lanes[idx].half_width()).then_some(pr)
    };
    let mut best: Option<(usize, Projection)> = None;
    let preferred = lanes[current].successors.iter().chain(&lanes[current].adjacent);
    for &idx in preferred {
        if let Some(pr) = fits(idx) {
            if best.is_none_or(|(_, b)| pr.distance < b.distance) {
                best = Some((idx, pr));
            }
        }
    }
    if best.is_none() {
        for idx in 0..lanes.len() {
            if idx == current {
                continue;
            }
            if let Some(pr) = fits(idx) {
                if best.is_none_or(|(_, b)| pr.distance < b.distance) {
                    best = Some((idx, pr));
                }
            }
        }
    }
    best.unwrap_or((current, here))
}

fn off_road(scenario: &Scenario, p: [f64; 2]) -> bool {
    scenario
        .lanes
        .iter()
        .all(|l| l.centerline.project(p).distance > l.half_width() + OFF_ROAD_SLACK)
}

/// Derives the per-agent events of the transition `before -> after`.
///
/// Only agents alive in `before` take part; the status fields of `after` are
/// ignored, so calling this on the state returned by [`step`] reproduces the
/// events that step reported.
pub fn detect_events(before: &SimState, after: &SimState) -> StepEvents {
    let scenario = &after.scenario;
    let dt = scenario.dt();
    let n = before.vehicles.len();
    let active: Vec<bool> = before.vehicles.iter().map(VehicleState::is_alive).collect();
    let mut agents = vec![AgentEvents::default(); n];

    for i in 0..n {
        if !active[i] {
            continue;
        }
        let (b, a) = (&before.vehicles[i], &after.vehicles[i]);
        let lane = &scenario.lanes[a.lane];
        let proj = lane.centerline.project(a.position());
        let ev = &mut agents[i];
        ev.linear_jerk = (a.accel - b.accel) / dt;
        ev.angular_jerk = (a.yaw_rate - b.yaw_rate) / dt;
        ev.lane_center_offset = proj.lateral.abs();
        ev.wrong_way = a.speed * (a.heading - proj.tangent).cos() < -RULE_SLACK;
        ev.speed_over_limit = a.speed > lane.speed_limit + RULE_SLACK;
        if a.lane != b.lane {
            let from = &scenario.lanes[b.lane];
            ev.lane_change_violation = !from.successors.contains(&a.lane) && !from.adjacent.contains(&a.lane);
        }
        ev.off_road = off_road(scenario, a.position());

        let mut gap = LOOKAHEAD;
        for j in 0..n {
            if j == i || !active[j] {
                continue;
            }
            let d = dist(a.position(), after.vehicles[j].position());
            if d < 2.0 * VEHICLE_RADIUS {
                ev.collision = true;
            }
            gap = gap.min((d - 2.0 * VEHICLE_RADIUS).max(0.0));
        }
        ev.min_obstacle_distance = gap;
        if ev.off_road {
            ev.collision = true;
        }
        ev.goal_reached =
            !ev.collision && dist(a.position(), scenario.goal_points[i]) < scenario.goals()[i].radius;
    }
    StepEvents { agents }
}

fn reward(ev: &AgentEvents, progress_delta: f64, dt: f64) -> f64 {
    let progress = (progress_delta / (dt * V_MAX)).clamp(-1.0, 1.0);
    let rule = if ev.rule_violations() > 0 { 1.0 } else { 0.0 };
    progress + 10.0 * f64::from(u8::from(ev.goal_reached)) - 10.0 * f64::from(u8::from(ev.collision))
        - rule
        - 0.1 * (ev.linear_jerk.abs() + ev.angular_jerk.abs()) * dt
}

/// Advances the world by one `dt`. Actions of agents that are no longer
/// alive are ignored but still have to be supplied.
pub fn step(state: &SimState, actions: &[AgentAction]) -> Result<(SimState, StepOutcome), SimError> {
    if state.done {
        return Err(SimError::StepAfterDone);
    }
    if actions.len() != state.vehicles.len() {
        return Err(SimError::ActionCount {
            expected: state.vehicles.len(),
            got: actions.len(),
        });
    }
    for (i, (a, v)) in actions.iter().zip(&state.vehicles).enumerate() {
        if v.is_alive() && !(a.accel.is_finite() && a.yaw_rate.is_finite()) {
            return Err(SimError::NonFiniteAction { agent: i });
        }
    }
    let scenario = Arc::clone(&state.scenario);
    let dt = scenario.dt();

    let mut next = state.clone();
    for (v, act) in next.vehicles.iter_mut().zip(actions) {
        if !v.is_alive() {
            continue;
        }
        let act = act.clamped();
        v.accel = act.accel;
        v.yaw_rate = act.yaw_rate;
        v.speed = (v.speed + act.accel * dt).clamp(0.0, V_MAX);
        v.heading = wrap_angle(v.heading + act.yaw_rate * dt);
        v.x += v.speed * v.heading.cos() * dt;
        v.y += v.speed * v.heading.sin() * dt;
        let (lane, proj) = locate(&scenario, v.lane, v.position());
        v.lane = lane;
        v.arclength = proj.s;
    }

    let events = detect_events(state, &next);
    let mut rewards = vec![0.0; next.vehicles.len()];
    for (i, ev) in events.agents.iter().enumerate() {
        if !state.vehicles[i].is_alive() {
            continue;
        }
        let new_progress = scenario.routes[i].path.project(next.vehicles[i].position()).s;
        let delta = new_progress - next.progress[i];
        next.progress[i] = new_progress;
        rewards[i] = reward(ev, delta, dt);
        if ev.collision {
            next.vehicles[i].status = Status::Crashed;
        } else if ev.goal_reached {
            next.vehicles[i].status = Status::ReachedGoal;
        }
    }
    next.step_count += 1;
    next.done = next.vehicles.iter().all(|v| !v.is_alive()) || next.step_count >= scenario.max_steps();
    let observation = observe(&next);
    let done = next.done;
    Ok((
        next,
        StepOutcome {
            observation,
            rewards,
            events,
            done,
        },
    ))
}
