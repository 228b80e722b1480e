//! Explainability records: per-step traces written as JSON lines, priority
//! attribution over the replay records they carry, and SVG replays.

use std::fmt::{self, Write as _};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::replay::{EventScore, PriorityRecord};
use crate::sim::{from_ego, AgentEvents, Scenario, LOOKAHEAD};

pub const TRACE_SCHEMA: &str = "marl-drive-trace";
pub const TRACE_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace write failed: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace is empty")]
    Empty,
    #[error("trace schema {found:?} version {version} is not supported")]
    Schema { found: String, version: u32 },
    #[error("record ({episode}, {step}) written after ({prev_episode}, {prev_step})")]
    OutOfOrder {
        episode: u64,
        step: usize,
        prev_episode: u64,
        prev_step: usize,
    },
    #[error("traces span several episodes ({0} and {1})")]
    MixedEpisodes(u64, u64),
}

/// First line of every trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema: String,
    pub version: u32,
    pub algo: String,
    pub scenario: String,
    pub n_agents: usize,
}

impl TraceHeader {
    pub fn new(algo: &str, scenario: &str, n_agents: usize) -> Self {
        Self {
            schema: TRACE_SCHEMA.into(),
            version: TRACE_VERSION,
            algo: algo.into(),
            scenario: scenario.into(),
            n_agents,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    /// Alive when the step started.
    pub active: bool,
    /// Pose the policy observed.
    pub pose: Pose,
    /// Position after the step.
    pub next_position: [f64; 2],
    /// Normalized action in `[-1, 1]^2`.
    pub action: [f64; 2],
    /// Waypoint features exactly as they appear in the observation
    /// (ego frame, divided by the lookahead).
    pub waypoints: Vec<[f64; 2]>,
    pub events: AgentEvents,
}

/// Priority breakdown of one transition stored during the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityTrace {
    pub slot: usize,
    pub serial: u64,
    pub record: PriorityRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub episode_id: u64,
    pub step: usize,
    pub agents: Vec<AgentTrace>,
    pub priorities: Vec<PriorityTrace>,
}

/// Append-only JSON-lines writer. Every record is one complete line, so a
/// file cut short loses at most its last record.
pub struct TraceWriter<W: Write> {
    out: W,
    last: Option<(u64, usize)>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, header: &TraceHeader) -> Result<Self, TraceError> {
        let line = serde_json::to_string(header).expect("header is serializable");
        writeln!(out, "{line}")?;
        Ok(Self { out, last: None })
    }

    pub fn record(&mut self, trace: &StepTrace) -> Result<(), TraceError> {
        let key = (trace.episode_id, trace.step);
        if let Some(prev) = self.last {
            if key <= prev {
                return Err(TraceError::OutOfOrder {
                    episode: key.0,
                    step: key.1,
                    prev_episode: prev.0,
                    prev_step: prev.1,
                });
            }
        }
        let line = serde_json::to_string(trace).expect("trace is serializable");
        writeln!(self.out, "{line}")?;
        self.last = Some(key);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), TraceError> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub steps: Vec<StepTrace>,
    /// True when a partial last line was dropped.
    pub truncated: bool,
}

impl TraceFile {
    /// Step traces grouped by episode id, in file order.
    pub fn episodes(&self) -> Vec<(u64, Vec<StepTrace>)> {
        let mut out: Vec<(u64, Vec<StepTrace>)> = Vec::new();
        for s in &self.steps {
            match out.last_mut() {
                Some((id, v)) if *id == s.episode_id => v.push(s.clone()),
                _ => out.push((s.episode_id, vec![s.clone()])),
            }
        }
        out
    }
}

/// Parses a trace file. An unterminated final line that fails to parse is
/// treated as a torn write and dropped; any other bad line is an error.
pub fn read_traces(text: &str) -> Result<TraceFile, TraceError> {
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let Some(first) = lines.first() else {
        return Err(TraceError::Empty);
    };
    let header: TraceHeader = serde_json::from_str(first.trim_end()).map_err(|e| TraceError::Parse {
        line: 1,
        message: format!("bad header: {e}"),
    })?;
    if header.schema != TRACE_SCHEMA || header.version != TRACE_VERSION {
        return Err(TraceError::Schema {
            found: header.schema,
            version: header.version,
        });
    }
    let mut steps = Vec::new();
    let mut truncated = false;
    for (k, raw) in lines.iter().enumerate().skip(1) {
        let body = raw.trim_end();
        if body.is_empty() {
            continue;
        }
        match serde_json::from_str::<StepTrace>(body) {
            Ok(s) => steps.push(s),
            Err(_) if k + 1 == lines.len() && !raw.ends_with('\n') => truncated = true,
            Err(e) => {
                return Err(TraceError::Parse {
                    line: k + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(TraceFile {
        header,
        steps,
        truncated,
    })
}

/// Fraction of a priority explained by each term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub td: f64,
    pub accident: f64,
    pub rule: f64,
    pub jerk: f64,
    pub speed: f64,
    pub completion: f64,
}

impl Shares {
    pub const COLUMNS: [&'static str; 6] = ["td", "accident", "rule", "jerk", "speed", "completion"];

    /// Shares of `td` and the event terms. A record with nothing to explain
    /// is attributed entirely to the TD term.
    pub fn of(td_abs: f64, ev: &EventScore) -> Self {
        let parts = [td_abs, ev.accident, ev.rule, ev.jerk, ev.speed, ev.completion];
        let sum: f64 = parts.iter().sum();
        if sum <= 0.0 {
            return Self {
                td: 1.0,
                ..Self::default()
            };
        }
        Self {
            td: parts[0] / sum,
            accident: parts[1] / sum,
            rule: parts[2] / sum,
            jerk: parts[3] / sum,
            speed: parts[4] / sum,
            completion: parts[5] / sum,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [self.td, self.accident, self.rule, self.jerk, self.speed, self.completion]
    }

    pub fn sum(&self) -> f64 {
        self.values().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub episode_id: u64,
    pub step: usize,
    pub slot: usize,
    pub priority: f64,
    pub td_abs: f64,
    pub events: EventScore,
    pub shares: Shares,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub rows: Vec<AttributionRow>,
    /// Component totals over every record, as shares of the grand total.
    pub aggregate: Shares,
    pub records: usize,
}

/// The `k` highest-priority transitions, ties broken by (episode, step).
pub fn top_k_influential(traces: &[StepTrace], k: usize) -> Result<AttributionReport, TraceError> {
    let mut rows: Vec<AttributionRow> = traces
        .iter()
        .flat_map(|t| {
            t.priorities.iter().map(move |p| AttributionRow {
                episode_id: t.episode_id,
                step: t.step,
                slot: p.slot,
                priority: p.record.priority,
                td_abs: p.record.td_abs,
                events: p.record.events,
                shares: Shares::of(p.record.td_abs, &p.record.events),
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(TraceError::Empty);
    }
    let records = rows.len();
    let mut td_total = 0.0;
    let mut ev_total = EventScore::default();
    for r in &rows {
        td_total += r.td_abs;
        ev_total.add(&r.events);
    }
    rows.sort_by(|a, b| {
        b.priority
            .total_cmp(&a.priority)
            .then(a.episode_id.cmp(&b.episode_id))
            .then(a.step.cmp(&b.step))
    });
    rows.truncate(k);
    Ok(AttributionReport {
        rows,
        aggregate: Shares::of(td_total, &ev_total),
        records,
    })
}

impl fmt::Display for AttributionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:>4} {:>8} {:>6} {:>10}", "rank", "episode", "step", "priority")?;
        for c in Shares::COLUMNS {
            write!(f, " {c:>10}")?;
        }
        writeln!(f)?;
        for (i, r) in self.rows.iter().enumerate() {
            write!(f, "{:>4} {:>8} {:>6} {:>10.4}", i + 1, r.episode_id, r.step, r.priority)?;
            for v in r.shares.values() {
                write!(f, " {v:>10.4}")?;
            }
            writeln!(f)?;
        }
        write!(f, "{:>31}", format!("all {} records", self.records))?;
        for v in self.aggregate.values() {
            write!(f, " {v:>10.4}")?;
        }
        writeln!(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Document width in pixels.
    pub width: f64,
    pub margin: f64,
    /// Draw the policy's waypoints every this many steps (and at the last step).
    pub waypoint_stride: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            width: 800.0,
            margin: 20.0,
            waypoint_stride: 10,
        }
    }
}

/// World to viewport map: `vx = margin + (x - lo_x) * scale`,
/// `vy = margin + (hi_y - y) * scale` (SVG's y axis points down).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewport {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub scale: f64,
    pub margin: f64,
    pub width: f64,
    pub height: f64,
}

impl Viewport {
    pub fn for_scenario(scenario: &Scenario, opts: &RenderOptions) -> Self {
        let (lo, hi) = scenario.bounds();
        let span_x = (hi[0] - lo[0]).max(1.0);
        let span_y = (hi[1] - lo[1]).max(1.0);
        let scale = (opts.width - 2.0 * opts.margin) / span_x;
        Self {
            lo,
            hi,
            scale,
            margin: opts.margin,
            width: opts.width,
            height: 2.0 * opts.margin + span_y * scale,
        }
    }

    pub fn to_view(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.margin + (p[0] - self.lo[0]) * self.scale,
            self.margin + (self.hi[1] - p[1]) * self.scale,
        ]
    }

    pub fn to_world(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.lo[0] + (v[0] - self.margin) / self.scale,
            self.hi[1] - (v[1] - self.margin) / self.scale,
        ]
    }
}

/// World position of a waypoint feature observed from `pose`.
pub fn waypoint_world(pose: &Pose, feature: [f64; 2]) -> [f64; 2] {
    let (dx, dy) = from_ego(feature[0] * LOOKAHEAD, feature[1] * LOOKAHEAD, pose.heading);
    [pose.x + dx, pose.y + dy]
}

fn fmt_points(vp: &Viewport, pts: impl Iterator<Item = [f64; 2]>) -> String {
    pts.map(|p| {
        let v = vp.to_view(p);
        format!("{:.3},{:.3}", v[0], v[1])
    })
    .collect::<Vec<_>>()
    .join(" ")
}

/// Renders one episode: gray lanes, red trajectories and cars, blue
/// waypoints and a cross at every collision.
pub fn render_svg(scenario: &Scenario, steps: &[StepTrace], opts: &RenderOptions) -> Result<String, TraceError> {
    let Some(first) = steps.first() else {
        return Err(TraceError::Empty);
    };
    if let Some(other) = steps.iter().find(|s| s.episode_id != first.episode_id) {
        return Err(TraceError::MixedEpisodes(first.episode_id, other.episode_id));
    }
    let vp = Viewport::for_scenario(scenario, opts);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.3} {h:.3}">"#,
        w = vp.width,
        h = vp.height
    );
    let _ = writeln!(
        svg,
        r#"<!-- episode {} of {}; view = margin + (world - lo) * scale, y flipped; lo=({:.6},{:.6}) hi=({:.6},{:.6}) scale={:.6} margin={:.3} -->"#,
        first.episode_id,
        scenario.name(),
        vp.lo[0],
        vp.lo[1],
        vp.hi[0],
        vp.hi[1],
        vp.scale,
        vp.margin
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for lane in &scenario.lanes {
        let d = format!("M {}", fmt_points(&vp, lane.centerline.points().iter().copied()).replace(' ', " L "));
        let _ = writeln!(
            svg,
            r##"<path class="lane" data-lane="{}" d="{d}" fill="none" stroke="#d9d9d9" stroke-width="{:.3}" stroke-linejoin="round"/>"##,
            lane.id,
            lane.width * vp.scale
        );
        let _ = writeln!(
            svg,
            r##"<path class="lane-center" d="{d}" fill="none" stroke="#8c8c8c" stroke-width="1" stroke-dasharray="4 4"/>"##
        );
    }
    let n_agents = first.agents.len();
    for i in 0..n_agents {
        let poses: Vec<&AgentTrace> = steps
            .iter()
            .filter_map(|s| s.agents.get(i))
            .filter(|a| a.active)
            .collect();
        if poses.len() >= 2 {
            let _ = writeln!(
                svg,
                r##"<polyline class="trajectory" data-agent="{i}" points="{}" fill="none" stroke="#d62728" stroke-width="2"/>"##,
                fmt_points(&vp, poses.iter().map(|a| [a.pose.x, a.pose.y]))
            );
        }
        if let Some(last) = poses.last() {
            let v = vp.to_view([last.pose.x, last.pose.y]);
            let _ = writeln!(
                svg,
                r##"<circle class="car" data-agent="{i}" cx="{:.3}" cy="{:.3}" r="{:.3}" fill="#d62728"/>"##,
                v[0],
                v[1],
                (1.4 * vp.scale).max(2.0)
            );
        }
    }
    let last_index = steps.len() - 1;
    for (k, s) in steps.iter().enumerate() {
        if !(k % opts.waypoint_stride.max(1) == 0 || k == last_index) {
            continue;
        }
        for (i, a) in s.agents.iter().enumerate() {
            if !a.active {
                continue;
            }
            for w in a.waypoints.iter().filter(|w| **w != [0.0, 0.0]) {
                let v = vp.to_view(waypoint_world(&a.pose, *w));
                let _ = writeln!(
                    svg,
                    r##"<circle class="waypoint" data-agent="{i}" data-step="{}" cx="{:.3}" cy="{:.3}" r="3" fill="#1f77b4"/>"##,
                    s.step,
                    v[0],
                    v[1]
                );
            }
        }
    }
    for s in steps {
        for (i, a) in s.agents.iter().enumerate() {
            if !(a.active && a.events.collision) {
                continue;
            }
            let v = vp.to_view(a.next_position);
            let r = 6.0;
            let _ = writeln!(
                svg,
                r##"<g class="collision" data-agent="{i}" data-step="{}" stroke="#000000" stroke-width="2"><line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/><line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}"/></g>"##,
                s.step,
                v[0] - r,
                v[1] - r,
                v[0] + r,
                v[1] + r,
                v[0] - r,
                v[1] + r,
                v[0] + r,
                v[1] - r
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(x: f64, y: f64) -> AgentTrace {
        AgentTrace {
            active: true,
            pose: Pose {
                x,
                y,
                heading: 0.0,
                speed: 10.0,
            },
            next_position: [x + 1.0, y],
            action: [0.25, -0.5],
            waypoints: vec![[0.2, 0.0], [0.4, 0.0], [0.6, 0.0], [0.8, 0.0], [1.0, 0.0]],
            events: AgentEvents::default(),
        }
    }

    fn step(ep: u64, t: usize, priorities: &[f64]) -> StepTrace {
        StepTrace {
            episode_id: ep,
            step: t,
            agents: vec![agent(10.0 + t as f64, 0.0)],
            priorities: priorities
                .iter()
                .map(|&p| PriorityTrace {
                    slot: t,
                    serial: t as u64,
                    record: PriorityRecord {
                        td_abs: 0.5,
                        td_known: true,
                        events: EventScore {
                            rule: 1.0,
                            ..Default::default()
                        },
                        priority: p,
                    },
                })
                .collect(),
        }
    }

    fn write(steps: &[StepTrace]) -> String {
        let mut w = TraceWriter::new(Vec::new(), &TraceHeader::new("maddpg", "merge", 1)).unwrap();
        for s in steps {
            w.record(s).unwrap();
        }
        String::from_utf8(w.into_inner()).unwrap()
    }

    #[test]
    fn round_trip_in_order() {
        let steps = vec![step(0, 0, &[1.0]), step(0, 1, &[0.1 + 0.2])];
        let back = read_traces(&write(&steps)).unwrap();
        assert_eq!(back.steps, steps);
        assert!(!back.truncated);
    }

    #[test]
    fn out_of_order_rejected() {
        let mut w = TraceWriter::new(Vec::new(), &TraceHeader::new("maddpg", "merge", 1)).unwrap();
        w.record(&step(1, 0, &[])).unwrap();
        assert!(matches!(w.record(&step(0, 5, &[])), Err(TraceError::OutOfOrder { .. })));
    }

    #[test]
    fn torn_tail_is_dropped() {
        let text = write(&[step(0, 0, &[1.0]), step(0, 1, &[2.0])]);
        let cut = &text[..text.len() - 10];
        let back = read_traces(cut).unwrap();
        assert_eq!(back.steps.len(), 1);
        assert!(back.truncated);
        let bad = text.replacen("\"step\":0", "\"step\":\"x\"", 1);
        assert!(matches!(read_traces(&bad), Err(TraceError::Parse { line: 2, .. })));
        assert!(matches!(read_traces(""), Err(TraceError::Empty)));
    }

    #[test]
    fn collision_only_record() {
        let mut s = step(0, 0, &[]);
        s.priorities.push(PriorityTrace {
            slot: 0,
            serial: 0,
            record: PriorityRecord::compute(
                0.0,
                EventScore {
                    accident: 2.0,
                    ..Default::default()
                },
                1e-3,
                0.6,
            ),
        });
        let r = top_k_influential(&[s], 20).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].shares.accident, 1.0);
    }

    #[test]
    fn top_k_order_and_ties() {
        let traces = vec![step(0, 0, &[3.0]), step(0, 1, &[5.0]), step(0, 2, &[1.0]), step(0, 3, &[5.0])];
        let r = top_k_influential(&traces, 2).unwrap();
        assert_eq!(r.rows.iter().map(|x| x.step).collect::<Vec<_>>(), vec![1, 3]);
        let all = top_k_influential(&traces, 10).unwrap();
        assert_eq!(all.rows.len(), 4);
        assert!(top_k_influential(&[step(0, 0, &[])], 3).is_err());
    }

    #[test]
    fn svg_structure() {
        let sc = Scenario::builtin("merge").unwrap();
        let one = render_svg(&sc, &[step(0, 0, &[])], &RenderOptions::default()).unwrap();
        assert_eq!(one.matches("class=\"lane\"").count(), 3);
        assert_eq!(one.matches("class=\"car\"").count(), 1);
        assert_eq!(one.matches("fill=\"#d62728\"").count(), 1);
        assert_eq!(one.matches("class=\"trajectory\"").count(), 0);

        let mut steps: Vec<StepTrace> = (0..5).map(|t| step(2, t, &[])).collect();
        steps[4].agents[0].events.collision = true;
        let doc = render_svg(&sc, &steps, &RenderOptions::default()).unwrap();
        assert_eq!(doc.matches("class=\"collision\"").count(), 1);
        assert_eq!(doc, render_svg(&sc, &steps, &RenderOptions::default()).unwrap());
        assert!(render_svg(&sc, &[], &RenderOptions::default()).is_err());
    }

    #[test]
    fn viewport_inverts() {
        let sc = Scenario::builtin("intersection").unwrap();
        let vp = Viewport::for_scenario(&sc, &RenderOptions::default());
        for p in [[0.0, 0.0], [-31.5, 12.25], [50.0, -50.0]] {
            let back = vp.to_world(vp.to_view(p));
            assert!((back[0] - p[0]).abs() < 1e-9 && (back[1] - p[1]).abs() < 1e-9);
        }
    }
}
