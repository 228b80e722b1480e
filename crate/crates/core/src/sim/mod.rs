//! Deterministic 2D lane-graph driving world.
//!
//! Vehicles are unicycles driven by acceleration and yaw-rate commands and
//! integrated with semi-implicit Euler. Each step reports per-agent events
//! (collisions, rule violations, jerks) that feed the reward, the replay
//! priorities and the evaluation metrics.

mod geometry;
mod observe;
mod scenario;
mod world;

pub use geometry::{dist, from_ego, to_ego, wrap_angle, Polyline, Projection};
pub use observe::{observe, JointObservation};
pub use scenario::{
    GoalSpec, Lane, LaneSpec, Route, Scenario, ScenarioError, ScenarioSpec, SimSpec, SpawnSpec,
    BUILTIN_NAMES,
};
pub use world::{
    detect_events, reset, step, AgentAction, AgentEvents, SimError, SimState, Status, StepEvents,
    StepOutcome, VehicleState,
};

/// Maximum longitudinal acceleration command (m/s²).
pub const A_MAX: f64 = 4.0;
/// Maximum yaw-rate command (rad/s).
pub const OMEGA_MAX: f64 = 0.5;
/// Speed cap (m/s).
pub const V_MAX: f64 = 20.0;
pub const DEFAULT_DT: f64 = 0.1;
/// Collision disc radius (m).
pub const VEHICLE_RADIUS: f64 = 1.4;
pub const MIN_LANE_WIDTH: f64 = 2.0;
/// Extra distance beyond the lane half-width before a vehicle counts as off-road.
pub const OFF_ROAD_SLACK: f64 = 0.5;
/// Tolerance (m/s) on wrong-way and speed-limit checks.
pub const RULE_SLACK: f64 = 0.5;

/// Neighbours encoded in an observation.
pub const NEIGHBORS: usize = 3;
/// Route waypoints encoded in an observation.
pub const WAYPOINTS: usize = 5;
/// Spacing of route waypoints (m).
pub const WAYPOINT_SPACING: f64 = 5.0;
/// Normalisation distance for relative positions (m). Also caps obstacle distance.
pub const LOOKAHEAD: f64 = 25.0;
/// Observation width: 4 ego features, 3 per neighbour, 2 per waypoint.
pub const OBS_DIM: usize = 4 + 3 * NEIGHBORS + 2 * WAYPOINTS;
/// Action width (acceleration, yaw rate).
pub const ACT_DIM: usize = 2;

/// Offset of the first waypoint feature inside an observation vector.
pub const WAYPOINT_OFFSET: usize = 4 + 3 * NEIGHBORS;
