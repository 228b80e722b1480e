use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::geometry::{dist, to_ego, wrap_angle};
use super::world::SimState;
use super::{LOOKAHEAD, NEIGHBORS, OBS_DIM, V_MAX, WAYPOINTS, WAYPOINT_OFFSET, WAYPOINT_SPACING};

/// One fixed-width feature vector per agent.
///
/// Layout: `[speed, heading error, lateral offset, remaining route,
/// 3 x (dx, dy, dv) neighbours, 5 x (dx, dy) waypoints]`, every entry in
/// `[-1, 1]`. Positions are in the ego frame and divided by [`LOOKAHEAD`].
/// Missing neighbours and waypoints are encoded as zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointObservation {
    pub agents: Vec<Vec<f64>>,
}

impl JointObservation {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Concatenation of all agents' vectors in agent order.
    pub fn flatten(&self) -> Vec<f64> {
        self.agents.iter().flatten().copied().collect()
    }

    /// Waypoint features (`WAYPOINTS` pairs) of one agent.
    pub fn waypoints(&self, agent: usize) -> Vec<[f64; 2]> {
        let o = &self.agents[agent];
        (0..WAYPOINTS)
            .map(|k| [o[WAYPOINT_OFFSET + 2 * k], o[WAYPOINT_OFFSET + 2 * k + 1]])
            .collect()
    }
}

fn unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Builds every agent's observation. Agents that are no longer alive get an
/// all-zero vector.
pub fn observe(state: &SimState) -> JointObservation {
    let scenario = state.scenario();
    let vehicles = state.vehicles();
    let mut agents = Vec::with_capacity(vehicles.len());
    for (i, v) in vehicles.iter().enumerate() {
        let mut o = vec![0.0; OBS_DIM];
        if !v.is_alive() {
            agents.push(o);
            continue;
        }
        let lane = &scenario.lanes[v.lane];
        let proj = lane.centerline.project(v.position());
        let route = &scenario.routes[i];
        let progress = state.progress()[i];
        o[0] = unit(v.speed / V_MAX);
        o[1] = unit(wrap_angle(v.heading - proj.tangent) / PI);
        o[2] = unit(proj.lateral / lane.half_width());
        o[3] = unit((route.goal - progress) / route.length());

        let mut others: Vec<(f64, usize)> = vehicles
            .iter()
            .enumerate()
            .filter(|&(j, u)| j != i && u.is_alive())
            .map(|(j, u)| (dist(v.position(), u.position()), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (k, &(_, j)) in others.iter().take(NEIGHBORS).enumerate() {
            let u = &vehicles[j];
            let (ex, ey) = to_ego(u.x - v.x, u.y - v.y, v.heading);
            o[4 + 3 * k] = unit(ex / LOOKAHEAD);
            o[4 + 3 * k + 1] = unit(ey / LOOKAHEAD);
            o[4 + 3 * k + 2] = unit((u.speed - v.speed) / V_MAX);
        }

        for k in 0..WAYPOINTS {
            let at = progress + WAYPOINT_SPACING * (k + 1) as f64;
            if at > route.path.length() {
                break;
            }
            let (p, _) = route.path.point_at(at);
            let (ex, ey) = to_ego(p[0] - v.x, p[1] - v.y, v.heading);
            o[WAYPOINT_OFFSET + 2 * k] = unit(ex / LOOKAHEAD);
            o[WAYPOINT_OFFSET + 2 * k + 1] = unit(ey / LOOKAHEAD);
        }
        agents.push(o);
    }
    JointObservation { agents }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::sim::{Scenario, Status, VehicleState};

    fn at(x: f64, y: f64, heading: f64, speed: f64) -> VehicleState {
        VehicleState {
            x,
            y,
            heading,
            speed,
            accel: 0.0,
            yaw_rate: 0.0,
            lane: 0,
            arclength: 0.0,
            status: Status::Alive,
        }
    }

    fn lane4() -> Arc<Scenario> {
        let text = r#"
name = "wide"
[sim]
max_steps = 50
[[lanes]]
id = "a"
centerline = [[0.0, 0.0], [200.0, 0.0]]
width = 4.0
speed_limit = 13.9
[[spawns]]
lane = "a"
s = 10.0
speed = 10.0
[[spawns]]
lane = "a"
s = 20.0
speed = 10.0
[[goals]]
lane = "a"
s = 150.0
[[goals]]
lane = "a"
s = 160.0
"#;
        Arc::new(Scenario::from_toml_str(text).unwrap())
    }

    #[test]
    fn centered_agent() {
        let st = SimState::with_vehicles(lane4(), vec![at(20.0, 0.0, 0.0, 10.0)]).unwrap();
        let o = &observe(&st).agents[0];
        assert_eq!(o[1], 0.0);
        assert_eq!(o[2], 0.0);
        assert_eq!(o[0], 0.5);
        // remaining 130 of 140 m
        assert!((o[3] - 130.0 / 140.0).abs() < 1e-12);
        // first waypoint 5 m straight ahead
        assert!((o[WAYPOINT_OFFSET] - 0.2).abs() < 1e-12);
        assert_eq!(o[WAYPOINT_OFFSET + 1], 0.0);
        // no neighbours
        assert!(o[4..WAYPOINT_OFFSET].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lateral_offset_normalised_by_half_width() {
        let st = SimState::with_vehicles(lane4(), vec![at(20.0, 1.0, 0.0, 10.0)]).unwrap();
        assert_eq!(observe(&st).agents[0][2], 0.5);
    }

    #[test]
    fn neighbour_block_in_ego_frame() {
        // ego heading 30 deg, neighbour at world delta (6, 2)
        let h = PI / 6.0;
        let st = SimState::with_vehicles(
            lane4(),
            vec![at(20.0, 0.0, h, 10.0), at(26.0, 1.5, 0.0, 14.0)],
        )
        .unwrap();
        let obs = observe(&st);
        let o = &obs.agents[0];
        // rotation by -h written out by hand
        let (c, s) = (h.cos(), h.sin());
        let ex = c * 6.0 + s * 1.5;
        let ey = -s * 6.0 + c * 1.5;
        assert!((o[4] - ex / 25.0).abs() < 1e-12);
        assert!((o[5] - ey / 25.0).abs() < 1e-12);
        assert!((o[6] - 4.0 / 20.0).abs() < 1e-12);
        // the neighbour sees the ego behind it
        let n = &obs.agents[1];
        assert!((n[4] + 6.0 / 25.0).abs() < 1e-12);
        assert!((n[5] + 1.5 / 25.0).abs() < 1e-12);
        assert!((n[6] + 0.2).abs() < 1e-12);
    }

    #[test]
    fn waypoints_stop_at_route_end() {
        let st = SimState::with_vehicles(lane4(), vec![at(190.0, 0.0, 0.0, 10.0)]).unwrap();
        let wp = observe(&st).waypoints(0);
        assert!((wp[0][0] - 0.2).abs() < 1e-12);
        assert!((wp[1][0] - 0.4).abs() < 1e-12);
        assert_eq!(wp[2], [0.0, 0.0]);
        assert_eq!(wp[4], [0.0, 0.0]);
    }
}
