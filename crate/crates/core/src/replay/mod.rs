//! Prioritized experience replay keyed on TD error plus driving events.
//!
//! A transition's priority is `(|td| + event_score + eps)^alpha`, where the
//! event score adds up crashes, rule violations, jerk, speed change and
//! route-completion change. The score's components are kept next to each
//! stored transition so they can be attributed later.

mod sum_tree;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sum_tree::SumTree;

use crate::sim::{AgentEvents, V_MAX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplayError {
    #[error("buffer holds {size} transitions, cannot sample a batch of {batch}")]
    Underfull { size: usize, batch: usize },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("{indices} indices but {values} values")]
    LengthMismatch { indices: usize, values: usize },
    #[error("invalid replay setting: {0}")]
    Config(String),
}

/// Weights of the driving-event priority terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventWeights {
    pub accident: f64,
    pub rule: f64,
    pub jerk: f64,
    pub speed: f64,
    pub completion: f64,
    /// Jerk magnitude (m/s³) that counts as one unit.
    pub jerk_norm: f64,
}

impl Default for EventWeights {
    fn default() -> Self {
        Self {
            accident: 2.0,
            rule: 1.0,
            jerk: 0.5,
            speed: 0.5,
            completion: 1.0,
            jerk_norm: 40.0,
        }
    }
}

impl EventWeights {
    pub fn zero() -> Self {
        Self {
            accident: 0.0,
            rule: 0.0,
            jerk: 0.0,
            speed: 0.0,
            completion: 0.0,
            jerk_norm: 40.0,
        }
    }
}

/// Event score split into its weighted terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EventScore {
    pub accident: f64,
    pub rule: f64,
    pub jerk: f64,
    pub speed: f64,
    pub completion: f64,
}

impl EventScore {
    pub fn total(&self) -> f64 {
        self.accident + self.rule + self.jerk + self.speed + self.completion
    }

    pub fn add(&mut self, other: &EventScore) {
        self.accident += other.accident;
        self.rule += other.rule;
        self.jerk += other.jerk;
        self.speed += other.speed;
        self.completion += other.completion;
    }
}

/// Scores one agent's step. Every term is clamped at zero.
pub fn event_score(
    events: &AgentEvents,
    speed_delta: f64,
    completion_delta: f64,
    weights: &EventWeights,
) -> EventScore {
    let nonneg = |v: f64| if v.is_finite() { v.max(0.0) } else { 0.0 };
    let jerk = (events.linear_jerk.abs() + events.angular_jerk.abs()) / weights.jerk_norm;
    EventScore {
        accident: nonneg(weights.accident * f64::from(u8::from(events.collision))),
        rule: nonneg(weights.rule * f64::from(events.rule_violations())),
        jerk: nonneg(weights.jerk * jerk),
        speed: nonneg(weights.speed * speed_delta.abs() / V_MAX),
        completion: nonneg(weights.completion * completion_delta.abs()),
    }
}

/// Priority of one stored transition with the parts it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityRecord {
    pub td_abs: f64,
    /// False until a critic update has measured the TD error.
    pub td_known: bool,
    pub events: EventScore,
    pub priority: f64,
}

impl PriorityRecord {
    pub fn compute(td_abs: f64, events: EventScore, eps: f64, alpha: f64) -> Self {
        let td_abs = td_abs.abs();
        Self {
            td_abs,
            td_known: true,
            events,
            priority: (td_abs + events.total() + eps).powf(alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub alpha: f64,
    /// Floor added before exponentiation so every priority is positive.
    pub eps: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            capacity: 1 << 17,
            alpha: 0.6,
            eps: 1e-3,
        }
    }
}

/// Handle to a sampled slot. The serial number detects slots that were
/// overwritten between sampling and the priority update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub slot: usize,
    pub serial: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Slot<T> {
    item: T,
    record: PriorityRecord,
    serial: u64,
}

#[derive(Debug, Clone)]
pub struct Sample<'a, T> {
    pub items: Vec<&'a T>,
    pub indices: Vec<SampleIndex>,
    /// Importance-sampling weights normalised by the batch maximum.
    pub weights: Vec<f64>,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub size: usize,
    pub capacity: usize,
    pub max_priority: f64,
    pub total_priority: f64,
    pub skipped_updates: u64,
}

/// Ring buffer with sum-tree proportional sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrioritizedReplay<T> {
    config: ReplayConfig,
    tree: SumTree,
    slots: Vec<Option<Slot<T>>>,
    cursor: usize,
    size: usize,
    max_priority: f64,
    next_serial: u64,
    skipped_updates: u64,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(config: ReplayConfig) -> Result<Self, ReplayError> {
        if config.capacity == 0 {
            return Err(ReplayError::Config("capacity must be > 0".into()));
        }
        if !(config.eps > 0.0 && config.eps.is_finite()) {
            return Err(ReplayError::Config("eps must be > 0".into()));
        }
        if !(config.alpha >= 0.0 && config.alpha.is_finite()) {
            return Err(ReplayError::Config("alpha must be >= 0".into()));
        }
        let tree = SumTree::new(config.capacity);
        let capacity = tree.capacity();
        let mut slots = Vec::with_capacity(capacity);
        slots.resize_with(capacity, || None);
        Ok(Self {
            config: ReplayConfig { capacity, ..config },
            tree,
            slots,
            cursor: 0,
            size: 0,
            max_priority: 1.0,
            next_serial: 0,
            skipped_updates: 0,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn stats(&self) -> ReplayStats {
        ReplayStats {
            size: self.size,
            capacity: self.config.capacity,
            max_priority: self.max_priority,
            total_priority: self.tree.total(),
            skipped_updates: self.skipped_updates,
        }
    }

    pub fn record(&self, slot: usize) -> Option<&PriorityRecord> {
        self.slots.get(slot)?.as_ref().map(|s| &s.record)
    }

    pub fn item(&self, slot: usize) -> Option<&T> {
        self.slots.get(slot)?.as_ref().map(|s| &s.item)
    }

    /// Stores a transition with an explicit priority record, overwriting the
    /// oldest slot once full.
    pub fn insert(&mut self, item: T, record: PriorityRecord) -> SampleIndex {
        let slot = self.cursor;
        let serial = self.next_serial;
        self.next_serial += 1;
        self.tree.set(slot, record.priority);
        self.max_priority = self.max_priority.max(record.priority);
        self.slots[slot] = Some(Slot { item, record, serial });
        self.cursor = (self.cursor + 1) % self.config.capacity;
        self.size = (self.size + 1).min(self.config.capacity);
        SampleIndex { slot, serial }
    }

    /// Stores a transition whose TD error is not known yet at the largest
    /// priority seen so far. The record is flagged with `td_known = false`.
    pub fn insert_with_max_priority(&mut self, item: T, events: EventScore) -> SampleIndex {
        let record = PriorityRecord {
            td_abs: 0.0,
            td_known: false,
            events,
            priority: self.max_priority,
        };
        self.insert(item, record)
    }

    /// Stratified proportional sampling: the priority mass is cut into
    /// `batch_size` equal segments and one point is drawn uniformly in each.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, beta: f64, rng: &mut R) -> Result<Sample<'_, T>, ReplayError> {
        if batch_size == 0 {
            return Err(ReplayError::EmptyBatch);
        }
        if self.size < batch_size {
            return Err(ReplayError::Underfull {
                size: self.size,
                batch: batch_size,
            });
        }
        let total = self.tree.total();
        let segment = total / batch_size as f64;
        let mut items = Vec::with_capacity(batch_size);
        let mut indices = Vec::with_capacity(batch_size);
        let mut probabilities = Vec::with_capacity(batch_size);
        let mut weights = Vec::with_capacity(batch_size);
        for j in 0..batch_size {
            let u: f64 = rng.random();
            let leaf = self.tree.find((j as f64 + u) * segment).min(self.size - 1);
            let slot = self.slots[leaf].as_ref().expect("leaves below size are filled");
            let p = self.tree.get(leaf) / total;
            items.push(&slot.item);
            indices.push(SampleIndex {
                slot: leaf,
                serial: slot.serial,
            });
            probabilities.push(p);
            weights.push((self.size as f64 * p).powf(-beta));
        }
        let max_w = weights.iter().copied().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        Ok(Sample {
            items,
            indices,
            weights,
            probabilities,
        })
    }

    /// Recomputes priorities from fresh TD errors. Event scores are replaced
    /// when given, otherwise the stored ones are kept. Stale handles are
    /// skipped and counted.
    pub fn update_priorities(
        &mut self,
        indices: &[SampleIndex],
        td_abs: &[f64],
        event_scores: Option<&[EventScore]>,
    ) -> Result<(), ReplayError> {
        if td_abs.len() != indices.len() {
            return Err(ReplayError::LengthMismatch {
                indices: indices.len(),
                values: td_abs.len(),
            });
        }
        if let Some(ev) = event_scores {
            if ev.len() != indices.len() {
                return Err(ReplayError::LengthMismatch {
                    indices: indices.len(),
                    values: ev.len(),
                });
            }
        }
        for (k, idx) in indices.iter().enumerate() {
            let Some(slot) = self.slots.get_mut(idx.slot).and_then(Option::as_mut) else {
                self.skipped_updates += 1;
                continue;
            };
            if slot.serial != idx.serial {
                self.skipped_updates += 1;
                continue;
            }
            let events = event_scores.map_or(slot.record.events, |e| e[k]);
            slot.record = PriorityRecord::compute(td_abs[k], events, self.config.eps, self.config.alpha);
            self.tree.set(idx.slot, slot.record.priority);
            self.max_priority = self.max_priority.max(slot.record.priority);
        }
        Ok(())
    }
}

/// Linear annealing of the importance-sampling exponent over training.
pub fn anneal_beta(start: f64, end: f64, fraction: f64) -> f64 {
    start + (end - start) * fraction.clamp(0.0, 1.0)
}
