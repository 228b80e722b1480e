//! Episode scoring on the four driving metrics and run-level reports.
//!
//! All four metrics are lower-is-better:
//!
//! * completion: crashes in the episode,
//! * time: agent-steps spent driving (a crashed or finished agent stops counting),
//! * humanness: mean of four raw sums over agent-steps (obstacle distance,
//!   |angular jerk|, |linear jerk|, |lane-centre offset|),
//! * rules: wrong-way, speed-limit and lane-change violations.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::StepEvents;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("malformed episode log: {0}")]
    MalformedLog(String),
    #[error("cannot aggregate an empty episode list")]
    Empty,
    #[error("report schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u64, expected: u32 },
    #[error("report parse error: {0}")]
    Parse(String),
    #[error("report statistics do not match its episodes: {0}")]
    Inconsistent(String),
}

/// One simulated step as seen by the scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// Which agents were alive when the step started.
    pub active: Vec<bool>,
    pub events: StepEvents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode_id: u64,
    pub n_agents: usize,
    pub max_steps: usize,
    pub steps: Vec<StepLog>,
}

impl EpisodeLog {
    pub fn new(episode_id: u64, n_agents: usize, max_steps: usize) -> Self {
        Self {
            episode_id,
            n_agents,
            max_steps,
            steps: Vec::new(),
        }
    }

    pub fn push(&mut self, active: Vec<bool>, events: StepEvents) {
        self.steps.push(StepLog { active, events });
    }
}

/// The four humanness sums before averaging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HumannessTerms {
    pub obstacle_distance: f64,
    pub angular_jerk: f64,
    pub linear_jerk: f64,
    pub lane_offset: f64,
}

impl HumannessTerms {
    pub fn mean(&self) -> f64 {
        (self.obstacle_distance + self.angular_jerk + self.linear_jerk + self.lane_offset) / 4.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode_id: u64,
    pub n_agents: usize,
    pub completion: u32,
    pub time: u64,
    pub humanness: f64,
    pub rules: u32,
    pub goals_reached: u32,
    pub steps: usize,
    pub humanness_terms: HumannessTerms,
}

/// Scores one complete episode log.
pub fn score_episode(log: &EpisodeLog) -> Result<EpisodeMetrics, MetricsError> {
    let n = log.n_agents;
    if n == 0 {
        return Err(MetricsError::MalformedLog("episode has no agents".into()));
    }
    if log.steps.len() > log.max_steps {
        return Err(MetricsError::MalformedLog(format!(
            "{} steps exceed max_steps {}",
            log.steps.len(),
            log.max_steps
        )));
    }
    let mut finished = vec![false; n];
    let mut completion = 0u32;
    let mut goals_reached = 0u32;
    let mut time = 0u64;
    let mut rules = 0u32;
    let mut terms = HumannessTerms::default();
    for (t, step) in log.steps.iter().enumerate() {
        if step.active.len() != n || step.events.agents.len() != n {
            return Err(MetricsError::MalformedLog(format!(
                "step {t} has {} activity flags and {} event records for {n} agents",
                step.active.len(),
                step.events.agents.len()
            )));
        }
        for (i, (&active, ev)) in step.active.iter().zip(&step.events.agents).enumerate() {
            if !active {
                continue;
            }
            if finished[i] {
                return Err(MetricsError::MalformedLog(format!(
                    "agent {i} is active at step {t} after it finished"
                )));
            }
            let values = [
                ev.linear_jerk,
                ev.angular_jerk,
                ev.lane_center_offset,
                ev.min_obstacle_distance,
            ];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(MetricsError::MalformedLog(format!("non-finite event value for agent {i} at step {t}")));
            }
            time += 1;
            rules += ev.rule_violations();
            terms.obstacle_distance += ev.min_obstacle_distance;
            terms.angular_jerk += ev.angular_jerk.abs();
            terms.linear_jerk += ev.linear_jerk.abs();
            terms.lane_offset += ev.lane_center_offset;
            if ev.collision {
                completion += 1;
                finished[i] = true;
            } else if ev.goal_reached {
                goals_reached += 1;
                finished[i] = true;
            }
        }
    }
    Ok(EpisodeMetrics {
        episode_id: log.episode_id,
        n_agents: n,
        completion,
        time,
        humanness: terms.mean(),
        rules,
        goals_reached,
        steps: log.steps.len(),
        humanness_terms: terms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Completion,
    Time,
    Humanness,
    Rules,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Completion, Metric::Time, Metric::Humanness, Metric::Rules];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Completion => "completion",
            Metric::Time => "time",
            Metric::Humanness => "humanness",
            Metric::Rules => "rules",
        }
    }

    pub fn of(self, m: &EpisodeMetrics) -> f64 {
        match self {
            Metric::Completion => f64::from(m.completion),
            Metric::Time => m.time as f64,
            Metric::Humanness => m.humanness,
            Metric::Rules => f64::from(m.rules),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub completion: Stats,
    pub time: Stats,
    pub humanness: Stats,
    pub rules: Stats,
}

impl Summary {
    pub fn get(&self, metric: Metric) -> &Stats {
        match metric {
            Metric::Completion => &self.completion,
            Metric::Time => &self.time,
            Metric::Humanness => &self.humanness,
            Metric::Rules => &self.rules,
        }
    }
}

/// Per-metric statistics over episodes, in episode order.
pub fn aggregate(episodes: &[EpisodeMetrics]) -> Result<Summary, MetricsError> {
    let col = |m: Metric| Stats::of(&episodes.iter().map(|e| m.of(e)).collect::<Vec<_>>());
    Ok(Summary {
        completion: col(Metric::Completion)?,
        time: col(Metric::Time)?,
        humanness: col(Metric::Humanness)?,
        rules: col(Metric::Rules)?,
    })
}

/// Metrics of a whole run plus enough metadata to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub label: String,
    pub algo: String,
    pub scenario: String,
    pub seed: u64,
    pub config_digest: String,
    /// Every effective setting of the run.
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    pub summary: Summary,
    pub episodes: Vec<EpisodeMetrics>,
}

impl RunReport {
    pub fn new(
        label: impl Into<String>,
        algo: impl Into<String>,
        scenario: impl Into<String>,
        seed: u64,
        config_digest: impl Into<String>,
        hyperparameters: BTreeMap<String, serde_json::Value>,
        episodes: Vec<EpisodeMetrics>,
    ) -> Result<Self, MetricsError> {
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.into(),
            algo: algo.into(),
            scenario: scenario.into(),
            seed,
            config_digest: config_digest.into(),
            hyperparameters,
            summary: aggregate(&episodes)?,
            episodes,
        })
    }

    /// Recomputes the summary from the stored episodes.
    pub fn verify(&self) -> Result<(), MetricsError> {
        let again = aggregate(&self.episodes)?;
        if again != self.summary {
            return Err(MetricsError::Inconsistent(format!("{again:?} != {:?}", self.summary)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| MetricsError::Parse(e.to_string()))?;
        let found = value
            .get("schema_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| MetricsError::Parse("missing schema_version".into()))?;
        if found != u64::from(REPORT_SCHEMA_VERSION) {
            return Err(MetricsError::SchemaVersion {
                found,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        let report: RunReport = serde_path_to_error::deserialize(value)
            .map_err(|e| MetricsError::Parse(format!("{}: {}", e.path(), e.inner())))?;
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    ABetter,
    BBetter,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: Metric,
    pub a_mean: f64,
    pub b_mean: f64,
    /// `a_mean - b_mean`; negative means `a` is better.
    pub gap: f64,
    pub pooled_std: f64,
    /// Gap divided by the pooled standard deviation; `None` when both runs
    /// have zero spread.
    pub gap_in_std: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a_label: String,
    pub b_label: String,
    pub rows: Vec<MetricComparison>,
}

impl Comparison {
    pub fn row(&self, metric: Metric) -> &MetricComparison {
        self.rows.iter().find(|r| r.metric == metric).expect("all metrics compared")
    }

    /// Plain-language verdict for one metric, e.g. `"a better on rules"`.
    pub fn verdict_text(&self, metric: Metric) -> String {
        match self.row(metric).verdict {
            Verdict::ABetter => format!("{} better on {}", self.a_label, metric.name()),
            Verdict::BBetter => format!("{} better on {}", self.b_label, metric.name()),
            Verdict::Tie => format!("tie on {}", metric.name()),
        }
    }

    /// One-line summary grouping metrics by winner.
    pub fn headline(&self) -> String {
        let group = |v: Verdict| -> Vec<&str> {
            self.rows.iter().filter(|r| r.verdict == v).map(|r| r.metric.name()).collect()
        };
        let join = |names: Vec<&str>| match names.len() {
            0 => String::new(),
            1 => names[0].to_string(),
            _ => format!("{} and {}", names[..names.len() - 1].join(", "), names[names.len() - 1]),
        };
        let mut parts = Vec::new();
        let a = group(Verdict::ABetter);
        if !a.is_empty() {
            parts.push(format!("{} better on {}", self.a_label, join(a)));
        }
        let b = group(Verdict::BBetter);
        if !b.is_empty() {
            parts.push(format!("{} better on {}", self.b_label, join(b)));
        }
        let t = group(Verdict::Tie);
        if !t.is_empty() {
            parts.push(format!("tie on {}", join(t)));
        }
        parts.join("; ")
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<11} {:>14} {:>14} {:>14} {:>10}  verdict",
            "metric", self.a_label, self.b_label, "gap", "gap/std"
        )?;
        for r in &self.rows {
            let units = r.gap_in_std.map_or_else(|| "-".to_string(), |u| format!("{u:.3}"));
            writeln!(
                f,
                "{:<11} {:>14.4} {:>14.4} {:>14.4} {:>10}  {}",
                r.metric.name(),
                r.a_mean,
                r.b_mean,
                r.gap,
                units,
                self.verdict_text(r.metric)
            )?;
        }
        write!(f, "{}", self.headline())
    }
}

/// Compares two runs metric by metric; lower means is better.
pub fn compare_runs(a: &RunReport, b: &RunReport) -> Comparison {
    let mut a_label = a.label.clone();
    let mut b_label = b.label.clone();
    if a_label.is_empty() || a_label == b_label {
        a_label = "a".into();
        b_label = "b".into();
    }
    let rows = Metric::ALL
        .iter()
        .map(|&metric| {
            let (sa, sb) = (a.summary.get(metric), b.summary.get(metric));
            let gap = sa.mean - sb.mean;
            let pooled_std = ((sa.std * sa.std + sb.std * sb.std) / 2.0).sqrt();
            let gap_in_std = if pooled_std > 0.0 {
                Some(gap / pooled_std)
            } else if gap == 0.0 {
                Some(0.0)
            } else {
                None
            };
            let verdict = if gap < 0.0 {
                Verdict::ABetter
            } else if gap > 0.0 {
                Verdict::BBetter
            } else {
                Verdict::Tie
            };
            MetricComparison {
                metric,
                a_mean: sa.mean,
                b_mean: sb.mean,
                gap,
                pooled_std,
                gap_in_std,
                verdict,
            }
        })
        .collect();
    Comparison { a_label, b_label, rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::AgentEvents;

    fn quiet(n: usize) -> StepEvents {
        StepEvents {
            agents: vec![
                AgentEvents {
                    min_obstacle_distance: 25.0,
                    ..Default::default()
                };
                n
            ],
        }
    }

    fn metrics(id: u64, completion: u32, humanness: f64, rules: u32) -> EpisodeMetrics {
        EpisodeMetrics {
            episode_id: id,
            n_agents: 2,
            completion,
            time: 10,
            humanness,
            rules,
            goals_reached: 0,
            steps: 5,
            humanness_terms: HumannessTerms::default(),
        }
    }

    fn report(label: &str, eps: Vec<EpisodeMetrics>) -> RunReport {
        RunReport::new(label, "x", "merge", 0, "d", BTreeMap::new(), eps).unwrap()
    }

    #[test]
    fn quiet_episode_with_goals() {
        let mut log = EpisodeLog::new(0, 2, 100);
        for t in 0..10 {
            let mut ev = quiet(2);
            if t == 9 {
                ev.agents[0].goal_reached = true;
                ev.agents[1].goal_reached = true;
            }
            log.push(vec![true, true], ev);
        }
        let m = score_episode(&log).unwrap();
        assert_eq!(m.completion, 0);
        assert_eq!(m.rules, 0);
        assert_eq!(m.humanness_terms.angular_jerk, 0.0);
        assert_eq!(m.humanness_terms.linear_jerk, 0.0);
        assert_eq!(m.humanness, 20.0 * 25.0 / 4.0);
        assert_eq!(m.goals_reached, 2);
    }

    #[test]
    fn crash_and_finish_time() {
        let mut log = EpisodeLog::new(3, 2, 200);
        for t in 1..=120 {
            let active = vec![t <= 50, true];
            let mut ev = quiet(2);
            if !active[0] {
                ev.agents[0] = AgentEvents::default();
            }
            if t == 50 {
                ev.agents[0].collision = true;
            }
            if t == 120 {
                ev.agents[1].goal_reached = true;
            }
            log.push(active, ev);
        }
        let m = score_episode(&log).unwrap();
        assert_eq!(m.completion, 1);
        assert_eq!(m.time, 170);
    }

    #[test]
    fn malformed_logs() {
        let mut log = EpisodeLog::new(0, 2, 10);
        log.push(vec![true], quiet(2));
        assert!(matches!(score_episode(&log), Err(MetricsError::MalformedLog(_))));

        let mut log = EpisodeLog::new(0, 1, 10);
        let mut ev = quiet(1);
        ev.agents[0].collision = true;
        log.push(vec![true], ev);
        log.push(vec![true], quiet(1));
        assert!(score_episode(&log).is_err());

        let mut log = EpisodeLog::new(0, 1, 1);
        log.push(vec![true], quiet(1));
        log.push(vec![true], quiet(1));
        assert!(score_episode(&log).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let one = aggregate(&[metrics(0, 3, 2.0, 1)]).unwrap();
        assert_eq!(one.completion.mean, 3.0);
        assert_eq!(one.completion.std, 0.0);
        let two = aggregate(&[metrics(0, 0, 1.0, 0), metrics(1, 2, 1.0, 0)]).unwrap();
        assert_eq!(two.completion.mean, 1.0);
        assert_eq!(two.completion.std, 1.0);
        assert_eq!(aggregate(&[]).unwrap_err(), MetricsError::Empty);
    }

    #[test]
    fn report_round_trip_and_verify() {
        let r = report("maddpg", vec![metrics(0, 1, 3.5, 2), metrics(1, 0, 1.25, 0)]);
        r.verify().unwrap();
        let back = RunReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let mut bad = r.clone();
        bad.summary.rules.mean = 9.0;
        assert!(bad.verify().is_err());
        let v2 = r.to_json().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(
            RunReport::from_json(&v2),
            Err(MetricsError::SchemaVersion { found: 2, .. })
        ));
    }

    #[test]
    fn identical_runs_tie() {
        let r = report("x", vec![metrics(0, 1, 3.5, 2), metrics(1, 0, 1.25, 0)]);
        let c = compare_runs(&r, &r);
        assert!(c.rows.iter().all(|row| row.gap == 0.0 && row.verdict == Verdict::Tie));
        assert_eq!(c.headline(), "tie on completion, time, humanness and rules");
    }

    #[test]
    fn lower_rules_wins() {
        let a = report("a", vec![metrics(0, 1, 1362.7, 0)]);
        let mut b = report("b", vec![metrics(0, 1, 4865.07, 1)]);
        // table-style means: 0.22 vs 0.72
        let mut a2 = a.clone();
        a2.summary.rules.mean = 0.22;
        b.summary.rules.mean = 0.72;
        let c = compare_runs(&a2, &b);
        assert_eq!(c.verdict_text(Metric::Rules), "a better on rules");
        assert_eq!(c.verdict_text(Metric::Humanness), "a better on humanness");
    }
}
