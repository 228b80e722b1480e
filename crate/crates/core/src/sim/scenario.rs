//! Scenario files: lane graph, spawns, goals and simulation settings.
//!
//! Scenarios are TOML documents:
//!
//! ```toml
//! name = "straight"
//!
//! [sim]
//! dt = 0.1
//! max_steps = 120
//!
//! [[lanes]]
//! id = "main"
//! centerline = [[0.0, 0.0], [120.0, 0.0]]
//! width = 3.5
//! speed_limit = 13.9
//! successors = []
//!
//! [[spawns]]
//! lane = "main"
//! s = 5.0
//! speed = 8.0
//!
//! [[goals]]
//! lane = "main"
//! s = 65.0
//! radius = 3.0
//! ```
//!
//! Agent `i` starts at `spawns[i]` and drives to `goals[i]` along the
//! successor chain between the two lanes.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::geometry::{dist, Polyline};
use super::{DEFAULT_DT, MIN_LANE_WIDTH};

const MERGE: &str = include_str!("builtin/merge.toml");
const INTERSECTION: &str = include_str!("builtin/intersection.toml");
const STRAIGHT: &str = include_str!("builtin/straight.toml");

/// Names accepted by [`Scenario::builtin`].
pub const BUILTIN_NAMES: [&str; 3] = ["merge", "intersection", "straight"];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown built-in scenario {0:?} (expected one of merge, intersection, straight)")]
    UnknownBuiltin(String),
    #[error("cannot read scenario file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSpec {
    pub id: String,
    pub centerline: Vec<[f64; 2]>,
    pub width: f64,
    pub speed_limit: f64,
    #[serde(default)]
    pub successors: Vec<String>,
    /// Lanes a vehicle may legally change into sideways.
    #[serde(default)]
    pub adjacent: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnSpec {
    pub lane: String,
    pub s: f64,
    pub speed: f64,
}

fn default_goal_radius() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalSpec {
    pub lane: String,
    pub s: f64,
    #[serde(default = "default_goal_radius")]
    pub radius: f64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub max_steps: usize,
    /// Half-width (m) of the uniform longitudinal jitter applied to spawns at
    /// reset. Zero disables it.
    #[serde(default)]
    pub spawn_jitter: f64,
}

/// Raw, serializable scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    pub sim: SimSpec,
    pub lanes: Vec<LaneSpec>,
    pub spawns: Vec<SpawnSpec>,
    pub goals: Vec<GoalSpec>,
}

#[derive(Debug, Clone)]
pub struct Lane {
    pub id: String,
    pub centerline: Polyline,
    pub width: f64,
    pub speed_limit: f64,
    pub successors: Vec<usize>,
    pub adjacent: Vec<usize>,
}

impl Lane {
    pub fn half_width(&self) -> f64 {
        self.width / 2.0
    }
}

/// The path an agent follows from its spawn to its goal, flattened into one
/// polyline so progress is a single arclength.
#[derive(Debug, Clone)]
pub struct Route {
    pub lanes: Vec<usize>,
    pub path: Polyline,
    /// Route arclength of the spawn point.
    pub start: f64,
    /// Route arclength of the goal point.
    pub goal: f64,
}

impl Route {
    /// Distance from spawn to goal along the route.
    pub fn length(&self) -> f64 {
        self.goal - self.start
    }
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    spec: ScenarioSpec,
    pub lanes: Vec<Lane>,
    pub routes: Vec<Route>,
    pub goal_points: Vec<[f64; 2]>,
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let upto = &source[..offset.min(source.len())];
    let line = upto.matches('\n').count() + 1;
    let column = upto.len() - upto.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl Scenario {
    /// Parses and validates scenario text.
    pub fn from_toml_str(source: &str) -> Result<Self, ScenarioError> {
        let spec: ScenarioSpec = toml::from_str(source).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |r| line_col(source, r.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        Self::from_spec(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn builtin(name: &str) -> Result<Self, ScenarioError> {
        Self::from_toml_str(Self::builtin_source(name)?)
    }

    pub fn builtin_source(name: &str) -> Result<&'static str, ScenarioError> {
        match name {
            "merge" => Ok(MERGE),
            "intersection" => Ok(INTERSECTION),
            "straight" => Ok(STRAIGHT),
            other => Err(ScenarioError::UnknownBuiltin(other.to_string())),
        }
    }

    /// Resolves a built-in name or a path to a scenario file.
    pub fn load(name_or_path: &str) -> Result<Self, ScenarioError> {
        if BUILTIN_NAMES.contains(&name_or_path) {
            Self::builtin(name_or_path)
        } else {
            Self::from_file(Path::new(name_or_path))
        }
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn dt(&self) -> f64 {
        self.spec.sim.dt
    }

    pub fn max_steps(&self) -> usize {
        self.spec.sim.max_steps
    }

    pub fn spawn_jitter(&self) -> f64 {
        self.spec.sim.spawn_jitter
    }

    pub fn spawns(&self) -> &[SpawnSpec] {
        &self.spec.spawns
    }

    pub fn goals(&self) -> &[GoalSpec] {
        &self.spec.goals
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.spec).expect("scenario spec is always serializable")
    }

    pub fn lane_index(&self, id: &str) -> Option<usize> {
        self.lanes.iter().position(|l| l.id == id)
    }

    /// Axis-aligned bounds of all lane geometry, widened by half a lane width.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for lane in &self.lanes {
            for p in lane.centerline.points() {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k] - lane.half_width());
                    hi[k] = hi[k].max(p[k] + lane.half_width());
                }
            }
        }
        (lo, hi)
    }

    pub fn from_spec(spec: ScenarioSpec) -> Result<Self, ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if spec.name.trim().is_empty() {
            return invalid("name must not be empty".into());
        }
        if !(spec.sim.dt.is_finite() && spec.sim.dt > 0.0) {
            return invalid(format!("sim.dt must be > 0 (got {})", spec.sim.dt));
        }
        if spec.sim.max_steps < 1 {
            return invalid("sim.max_steps must be >= 1".into());
        }
        if !(spec.sim.spawn_jitter.is_finite() && spec.sim.spawn_jitter >= 0.0) {
            return invalid("sim.spawn_jitter must be >= 0".into());
        }
        if spec.lanes.is_empty() {
            return invalid("scenario has no lanes".into());
        }

        let mut ids: HashMap<&str, usize> = HashMap::new();
        for (i, lane) in spec.lanes.iter().enumerate() {
            if ids.insert(lane.id.as_str(), i).is_some() {
                return invalid(format!("duplicate lane id {:?}", lane.id));
            }
        }
        let resolve = |id: &str, ctx: &str| -> Result<usize, ScenarioError> {
            ids.get(id)
                .copied()
                .ok_or_else(|| ScenarioError::Invalid(format!("{ctx} references unknown lane {id:?}")))
        };

        let mut lanes = Vec::with_capacity(spec.lanes.len());
        for l in &spec.lanes {
            if l.centerline.len() < 2 {
                return invalid(format!("lane {:?} centerline needs at least 2 points", l.id));
            }
            if l.centerline.iter().flatten().any(|v| !v.is_finite()) {
                return invalid(format!("lane {:?} has a non-finite point", l.id));
            }
            for w in l.centerline.windows(2) {
                if dist(w[0], w[1]) <= 1e-9 {
                    return invalid(format!("lane {:?} has repeated consecutive points", l.id));
                }
            }
            if !(l.width.is_finite() && l.width >= MIN_LANE_WIDTH) {
                return invalid(format!(
                    "lane {:?} width {} is below the {MIN_LANE_WIDTH} m minimum",
                    l.id, l.width
                ));
            }
            if !(l.speed_limit.is_finite() && l.speed_limit > 0.0) {
                return invalid(format!("lane {:?} speed_limit must be > 0", l.id));
            }
            let successors = l
                .successors
                .iter()
                .map(|s| resolve(s, &format!("lane {:?} successors", l.id)))
                .collect::<Result<Vec<_>, _>>()?;
            let adjacent = l
                .adjacent
                .iter()
                .map(|s| resolve(s, &format!("lane {:?} adjacent", l.id)))
                .collect::<Result<Vec<_>, _>>()?;
            lanes.push(Lane {
                id: l.id.clone(),
                centerline: Polyline::new(l.centerline.clone()),
                width: l.width,
                speed_limit: l.speed_limit,
                successors,
                adjacent,
            });
        }

        if spec.spawns.is_empty() {
            return invalid("scenario has no spawns".into());
        }
        if spec.spawns.len() != spec.goals.len() {
            return invalid(format!(
                "{} spawns but {} goals (each spawn needs a goal)",
                spec.spawns.len(),
                spec.goals.len()
            ));
        }
        let mut routes = Vec::with_capacity(spec.spawns.len());
        let mut goal_points = Vec::with_capacity(spec.goals.len());
        for (i, (sp, g)) in spec.spawns.iter().zip(&spec.goals).enumerate() {
            let sl = resolve(&sp.lane, &format!("spawn {i}"))?;
            let gl = resolve(&g.lane, &format!("goal {i}"))?;
            let slen = lanes[sl].centerline.length();
            if !(sp.s.is_finite() && (0.0..=slen).contains(&sp.s)) {
                return invalid(format!(
                    "spawn beyond lane: spawn {i} at s={} on lane {:?} of length {slen:.3}",
                    sp.s, sp.lane
                ));
            }
            if !(sp.speed.is_finite() && sp.speed >= 0.0) {
                return invalid(format!("spawn {i} speed must be >= 0"));
            }
            let glen = lanes[gl].centerline.length();
            if !(g.s.is_finite() && (0.0..=glen).contains(&g.s)) {
                return invalid(format!(
                    "goal beyond lane: goal {i} at s={} on lane {:?} of length {glen:.3}",
                    g.s, g.lane
                ));
            }
            if !(g.radius.is_finite() && g.radius > 0.0) {
                return invalid(format!("goal {i} radius must be > 0"));
            }
            let chain = lane_chain(&lanes, sl, gl).ok_or_else(|| {
                ScenarioError::Invalid(format!(
                    "goal {i} on lane {:?} is unreachable from spawn lane {:?}",
                    g.lane, sp.lane
                ))
            })?;
            let path = route_polyline(&lanes, &chain);
            let spawn_pt = lanes[sl].centerline.point_at(sp.s).0;
            let goal_pt = lanes[gl].centerline.point_at(g.s).0;
            let start = path.project(spawn_pt).s;
            let goal = path.project(goal_pt).s;
            if goal <= start {
                return invalid(format!("goal {i} does not lie ahead of spawn {i} on its route"));
            }
            routes.push(Route {
                lanes: chain,
                path,
                start,
                goal,
            });
            goal_points.push(goal_pt);
        }

        Ok(Self {
            spec,
            lanes,
            routes,
            goal_points,
        })
    }
}

/// Shortest successor chain (by lane count) from `from` to `to`; ties follow
/// successor declaration order.
fn lane_chain(lanes: &[Lane], from: usize, to: usize) -> Option<Vec<usize>> {
    let mut prev = vec![usize::MAX; lanes.len()];
    let mut seen = vec![false; lanes.len()];
    let mut queue = VecDeque::from([from]);
    seen[from] = true;
    while let Some(l) = queue.pop_front() {
        if l == to {
            let mut chain = vec![to];
            let mut cur = to;
            while cur != from {
                cur = prev[cur];
                chain.push(cur);
            }
            chain.reverse();
            return Some(chain);
        }
        for &n in &lanes[l].successors {
            if !seen[n] {
                seen[n] = true;
                prev[n] = l;
                queue.push_back(n);
            }
        }
    }
    None
}

/// Concatenates the lanes of a chain. Each successor is entered at the
/// projection of its predecessor's end point.
fn route_polyline(lanes: &[Lane], chain: &[usize]) -> Polyline {
    let mut pts: Vec<[f64; 2]> = lanes[chain[0]].centerline.points().to_vec();
    for &next in &chain[1..] {
        let lane = &lanes[next].centerline;
        let end = *pts.last().expect("non-empty");
        let entry = lane.project(end).s;
        let push = |p: [f64; 2], pts: &mut Vec<[f64; 2]>| {
            if dist(*pts.last().expect("non-empty"), p) > 1e-9 {
                pts.push(p);
            }
        };
        push(lane.point_at(entry).0, &mut pts);
        let mut acc = 0.0;
        let lp = lane.points();
        for k in 1..lp.len() {
            acc += dist(lp[k - 1], lp[k]);
            if acc > entry + 1e-9 {
                push(lp[k], &mut pts);
            }
        }
    }
    Polyline::new(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_load() {
        let m = Scenario::builtin("merge").unwrap();
        assert_eq!(m.lanes.len(), 3);
        assert_eq!(m.lanes[2].successors, vec![1]);
        let i = Scenario::builtin("intersection").unwrap();
        assert_eq!(i.lanes.len(), 8);
        let s = Scenario::builtin("straight").unwrap();
        assert_eq!(s.spawns().len(), 1);
        assert!(matches!(
            Scenario::builtin("roundabout"),
            Err(ScenarioError::UnknownBuiltin(_))
        ));
    }

    #[test]
    fn merge_ramp_route_joins_mainline() {
        let m = Scenario::builtin("merge").unwrap();
        let r = &m.routes[0];
        assert_eq!(r.lanes, vec![2, 1]);
        // ramp end sits on the right mainline centerline, so the route is continuous
        let ramp_len = m.lanes[2].centerline.length();
        assert!((r.path.length() - (ramp_len + 220.0 - 80.0)).abs() < 1e-9);
    }

    #[test]
    fn spawn_beyond_lane_rejected() {
        let text = r#"
name = "bad"
[sim]
max_steps = 10
[[lanes]]
id = "a"
centerline = [[0.0, 0.0], [500.0, 0.0]]
width = 3.5
speed_limit = 10.0
[[spawns]]
lane = "a"
s = 900.0
speed = 1.0
[[goals]]
lane = "a"
s = 400.0
"#;
        let err = Scenario::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("spawn beyond lane"), "{err}");
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "name = \"x\"\n[sim]\nmax_steps = \"many\"\n";
        match Scenario::from_toml_str(text).unwrap_err() {
            ScenarioError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_lane_reference_rejected() {
        let text = Scenario::builtin_source("straight")
            .unwrap()
            .replace("lane = \"main\"\ns = 65.0", "lane = \"nope\"\ns = 65.0");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("unknown lane"), "{err}");
    }

    #[test]
    fn narrow_lane_rejected() {
        let text = Scenario::builtin_source("straight")
            .unwrap()
            .replace("width = 3.5", "width = 1.9");
        let err = Scenario::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn dump_round_trips() {
        for name in BUILTIN_NAMES {
            let s = Scenario::builtin(name).unwrap();
            let again = Scenario::from_toml_str(&s.to_toml_string()).unwrap();
            assert_eq!(s.spec(), again.spec());
        }
    }
}
