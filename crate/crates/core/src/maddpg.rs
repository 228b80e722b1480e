//! MADDPG: deterministic per-agent actors, centralized critics over the
//! joint observation and joint action, target networks, Gaussian
//! exploration and the event-prioritized replay buffer.
//!
//! Actions live in the normalized box `[-1, 1]^2` everywhere inside the
//! learner; [`AgentAction::from_normalized`] maps them to physical commands.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::explain::{PriorityTrace, StepTrace};
use crate::metrics::{score_episode, EpisodeLog, EpisodeMetrics};
use crate::nn::{Activation, AdamState, Mlp, Tensor2};
use crate::replay::{
    anneal_beta, event_score, EventScore, EventWeights, PrioritizedReplay, PriorityRecord, ReplayConfig, ReplayStats,
    SampleIndex,
};
use crate::sim::{reset, step, AgentAction, JointObservation, Scenario, SimState, ACT_DIM, OBS_DIM};
use crate::train::{episode_seed, mean_of, trace_agents, Policy, Telemetry, TrainError, TrainSink};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaddpgConfig {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub sigma_0: f64,
    pub sigma_min: f64,
    /// Multiplier applied to sigma after every episode.
    pub sigma_decay: f64,
    pub updates_per_env_step: usize,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub priority_eps: f64,
    pub event_weights: EventWeights,
    /// Trailing fraction of the planned episodes trained with scaled-down
    /// learning rates.
    pub fine_tune_fraction: f64,
    pub fine_tune_lr_scale: f64,
}

impl Default for MaddpgConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            tau: 0.01,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            batch_size: 256,
            warmup_steps: 2000,
            sigma_0: 0.3,
            sigma_min: 0.05,
            sigma_decay: 0.9995,
            updates_per_env_step: 1,
            hidden: vec![128, 128],
            buffer_capacity: 1 << 17,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            priority_eps: 1e-3,
            event_weights: EventWeights::default(),
            fine_tune_fraction: 0.2,
            fine_tune_lr_scale: 0.5,
        }
    }
}

impl MaddpgConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0, 1)");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must be in (0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 || self.updates_per_env_step == 0 || self.buffer_capacity == 0 {
            return bad("batch_size, updates_per_env_step and buffer_capacity must be positive");
        }
        if self.buffer_capacity < self.batch_size {
            return bad("buffer_capacity must be at least batch_size");
        }
        if !(self.sigma_min >= 0.0 && self.sigma_min <= self.sigma_0) {
            return bad("need 0 <= sigma_min <= sigma_0");
        }
        if !(self.sigma_decay > 0.0 && self.sigma_decay <= 1.0) {
            return bad("sigma_decay must be in (0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(self.alpha >= 0.0 && self.beta_start >= 0.0 && self.beta_end >= 0.0 && self.priority_eps > 0.0) {
            return bad("alpha and beta must be >= 0 and priority_eps > 0");
        }
        if !(0.0..=1.0).contains(&self.fine_tune_fraction) || self.fine_tune_lr_scale <= 0.0 {
            return bad("fine_tune_fraction must be in [0, 1] and fine_tune_lr_scale positive");
        }
        Ok(())
    }
}

/// Online and target networks of one agent plus their optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaddpgAgent {
    pub actor: Mlp,
    pub target_actor: Mlp,
    pub critic: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub noise_sigma: f64,
}

impl MaddpgAgent {
    pub fn new(n_agents: usize, hidden: &[usize], sigma: f64, seed: u64) -> Result<Self, TrainError> {
        let sizes = |input: usize, output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let actor = Mlp::new(&sizes(OBS_DIM, ACT_DIM), Activation::Tanh, seed)?;
        let critic = Mlp::new(
            &sizes(n_agents * (OBS_DIM + ACT_DIM), 1),
            Activation::Linear,
            seed.wrapping_add(1),
        )?;
        Ok(Self {
            actor_opt: AdamState::new(&actor),
            critic_opt: AdamState::new(&critic),
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            noise_sigma: sigma,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.critic.input_size() / (OBS_DIM + ACT_DIM)
    }
}

/// One joint transition as stored in the replay buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// Agent was alive when the step started.
    pub active: Vec<bool>,
    /// No bootstrapping past this step for the agent.
    pub dones: Vec<bool>,
}

/// A sampled minibatch laid out as matrices, one row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n_agents: usize,
    pub obs: Tensor2,
    pub actions: Tensor2,
    pub rewards: Tensor2,
    pub next_obs: Tensor2,
    pub active: Tensor2,
    pub dones: Tensor2,
    pub weights: Vec<f64>,
}

impl Batch {
    pub fn new(items: &[&Transition], weights: Vec<f64>) -> Result<Self, TrainError> {
        let Some(first) = items.first() else {
            return Err(TrainError::Config("empty batch".into()));
        };
        if weights.len() != items.len() {
            return Err(TrainError::Config("one importance weight per transition required".into()));
        }
        let n = first.rewards.len();
        let m = items.len();
        let mat = |cols: usize, f: &dyn Fn(&Transition) -> Vec<f64>| -> Result<Tensor2, TrainError> {
            let mut data = Vec::with_capacity(m * cols);
            for t in items {
                let row = f(t);
                if row.len() != cols {
                    return Err(TrainError::Config("transition width differs within batch".into()));
                }
                data.extend(row);
            }
            Ok(Tensor2::from_vec(m, cols, data)?)
        };
        let flag = |v: &[bool]| v.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
        Ok(Self {
            n_agents: n,
            obs: mat(n * OBS_DIM, &|t| t.obs.clone())?,
            actions: mat(n * ACT_DIM, &|t| t.actions.clone())?,
            rewards: mat(n, &|t| t.rewards.clone())?,
            next_obs: mat(n * OBS_DIM, &|t| t.next_obs.clone())?,
            active: mat(n, &|t| flag(&t.active))?,
            dones: mat(n, &|t| flag(&t.dones))?,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn agent_obs(obs: &Tensor2, i: usize) -> Tensor2 {
        obs.columns(i * OBS_DIM, OBS_DIM)
    }
}

fn critic_input(obs: &Tensor2, actions: &Tensor2) -> Result<Tensor2, TrainError> {
    Ok(Tensor2::hcat(&[obs, actions])?)
}

/// Joint action in normalized space. With `explore`, each agent adds
/// `N(0, sigma^2)` noise before clamping; otherwise no randomness is drawn.
pub fn act<R: Rng + ?Sized>(
    agents: &[MaddpgAgent],
    obs: &JointObservation,
    explore: bool,
    rng: &mut R,
) -> Result<Vec<[f64; 2]>, TrainError> {
    if obs.n_agents() != agents.len() {
        return Err(TrainError::Config(format!(
            "{} observations for {} agents",
            obs.n_agents(),
            agents.len()
        )));
    }
    agents
        .iter()
        .zip(&obs.agents)
        .map(|(agent, o)| {
            let mu = agent.actor.predict_one(o)?;
            let mut a = [mu[0], mu[1]];
            if explore {
                for v in &mut a {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += agent.noise_sigma * z;
                }
            }
            Ok([a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)])
        })
        .collect()
}

/// `y_i = r_i + gamma (1 - done_i) Q'_i(o', mu'_1(o'_1), ..., mu'_N(o'_N))`,
/// returned as a `(batch, agents)` matrix. Agents that are done at the next
/// state contribute a zero action.
pub fn critic_target(agents: &[MaddpgAgent], batch: &Batch, gamma: f64) -> Result<Tensor2, TrainError> {
    let n = batch.n_agents;
    let m = batch.len();
    let mut next_actions = Tensor2::zeros(m, n * ACT_DIM);
    for (j, agent) in agents.iter().enumerate() {
        let a = agent.target_actor.predict(&Batch::agent_obs(&batch.next_obs, j))?;
        for b in 0..m {
            if batch.dones.get(b, j) == 0.0 {
                for k in 0..ACT_DIM {
                    next_actions.set(b, j * ACT_DIM + k, a.get(b, k));
                }
            }
        }
    }
    let input = critic_input(&batch.next_obs, &next_actions)?;
    let mut y = Tensor2::zeros(m, n);
    for (i, agent) in agents.iter().enumerate() {
        let q = agent.target_critic.predict(&input)?;
        for b in 0..m {
            let boot = gamma * (1.0 - batch.dones.get(b, i)) * q.get(b, 0);
            y.set(b, i, batch.rewards.get(b, i) + boot);
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticUpdate {
    /// `sum(w * mask * delta^2) / sum(mask)`.
    pub loss: f64,
    /// `|y - Q|` per sample; zero where the agent was inactive.
    pub td_abs: Vec<f64>,
}

/// One Adam step on agent `i`'s critic towards the targets `y`.
pub fn update_critic(
    agent: &mut MaddpgAgent,
    i: usize,
    batch: &Batch,
    y: &[f64],
    lr: f64,
) -> Result<CriticUpdate, TrainError> {
    let m = batch.len();
    if y.len() != m {
        return Err(TrainError::Config("one target per sample required".into()));
    }
    let input = critic_input(&batch.obs, &batch.actions)?;
    let cache = agent.critic.forward(&input)?;
    let q = cache.output();
    let count: f64 = (0..m).map(|b| batch.active.get(b, i)).sum();
    let mut td_abs = vec![0.0; m];
    if count == 0.0 {
        return Ok(CriticUpdate { loss: 0.0, td_abs });
    }
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(m, 1);
    for b in 0..m {
        let mask = batch.active.get(b, i);
        let delta = y[b] - q.get(b, 0);
        td_abs[b] = mask * delta.abs();
        loss += batch.weights[b] * mask * delta * delta;
        grad.set(b, 0, -2.0 * batch.weights[b] * mask * delta / count);
    }
    loss /= count;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            what: format!("critic loss of agent {i}"),
            update: agent.critic_opt.step_count,
        });
    }
    let grads = agent.critic.param_grads(&cache, &grad)?;
    agent.critic_opt.step(&mut agent.critic, &grads, lr)?;
    Ok(CriticUpdate { loss, td_abs })
}

/// Mean `Q_i` over agent `i`'s active samples with its own action slot
/// replaced by `mu_i(o_i)`, and the gradient of that mean with respect to
/// the actor's parameters.
pub fn actor_objective(
    agent: &MaddpgAgent,
    i: usize,
    batch: &Batch,
) -> Result<(f64, crate::nn::MlpGrads), TrainError> {
    let m = batch.len();
    let n = batch.n_agents;
    let actor_cache = agent.actor.forward(&Batch::agent_obs(&batch.obs, i))?;
    let mu = actor_cache.output();
    let mut actions = batch.actions.clone();
    for b in 0..m {
        for k in 0..ACT_DIM {
            actions.set(b, i * ACT_DIM + k, mu.get(b, k));
        }
    }
    let input = critic_input(&batch.obs, &actions)?;
    let critic_cache = agent.critic.forward(&input)?;
    let q = critic_cache.output();
    let count: f64 = (0..m).map(|b| batch.active.get(b, i)).sum();
    if count == 0.0 {
        return Ok((0.0, agent.actor.zero_grads()));
    }
    let mut objective = 0.0;
    let mut dq = Tensor2::zeros(m, 1);
    for b in 0..m {
        let mask = batch.active.get(b, i);
        objective += mask * q.get(b, 0);
        dq.set(b, 0, mask / count);
    }
    objective /= count;
    let (_, input_grad) = agent.critic.backward(&critic_cache, &dq)?;
    let offset = n * OBS_DIM + i * ACT_DIM;
    let da = input_grad.columns(offset, ACT_DIM);
    let (grads, _) = agent.actor.backward(&actor_cache, &da)?;
    Ok((objective, grads))
}

/// One Adam ascent step on the actor objective; returns the objective
/// before the step.
pub fn update_actor(agent: &mut MaddpgAgent, i: usize, batch: &Batch, lr: f64) -> Result<f64, TrainError> {
    let (objective, mut grads) = actor_objective(agent, i, batch)?;
    if !objective.is_finite() {
        return Err(TrainError::NonFinite {
            what: format!("actor objective of agent {i}"),
            update: agent.actor_opt.step_count,
        });
    }
    grads.scale(-1.0);
    agent.actor_opt.step(&mut agent.actor, &grads, lr)?;
    Ok(objective)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchUpdate {
    pub critic_loss: f64,
    pub actor_objective: f64,
    /// Mean `|delta|` over the agents active in each sample; this is the
    /// TD term written back as the sample's priority.
    pub td_abs: Vec<f64>,
}

/// Targets, critic steps, actor steps and target blending for one batch.
/// Priorities are left to the caller.
pub fn learn_on_batch(
    agents: &mut [MaddpgAgent],
    batch: &Batch,
    config: &MaddpgConfig,
    lr_scale: f64,
) -> Result<BatchUpdate, TrainError> {
    let m = batch.len();
    let y = critic_target(agents, batch, config.gamma)?;
    let mut td_sum = vec![0.0; m];
    let mut losses = Vec::with_capacity(agents.len());
    for (i, agent) in agents.iter_mut().enumerate() {
        let yi: Vec<f64> = (0..m).map(|b| y.get(b, i)).collect();
        let up = update_critic(agent, i, batch, &yi, config.critic_lr * lr_scale)?;
        for (s, d) in td_sum.iter_mut().zip(&up.td_abs) {
            *s += d;
        }
        losses.push(up.loss);
    }
    let td_abs = (0..m)
        .map(|b| {
            let active: f64 = (0..batch.n_agents).map(|i| batch.active.get(b, i)).sum();
            if active > 0.0 {
                td_sum[b] / active
            } else {
                0.0
            }
        })
        .collect();
    let mut objectives = Vec::with_capacity(agents.len());
    for (i, agent) in agents.iter_mut().enumerate() {
        objectives.push(update_actor(agent, i, batch, config.actor_lr * lr_scale)?);
    }
    for agent in agents.iter_mut() {
        agent.target_critic.polyak_update(&agent.critic, config.tau)?;
        agent.target_actor.polyak_update(&agent.actor, config.tau)?;
    }
    Ok(BatchUpdate {
        critic_loss: mean_of(&losses).unwrap_or(0.0),
        actor_objective: mean_of(&objectives).unwrap_or(0.0),
        td_abs,
    })
}

/// Learner state that a checkpoint must carry (the replay contents are
/// stored separately).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaddpgSnapshot {
    pub agents: Vec<MaddpgAgent>,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes_done: u64,
    pub replay_stats: ReplayStats,
}

pub struct MaddpgTrainer {
    scenario: Arc<Scenario>,
    config: MaddpgConfig,
    n_agents: usize,
    seed: u64,
    planned_episodes: u64,
    agents: Vec<MaddpgAgent>,
    replay: PrioritizedReplay<Transition>,
    rng: ChaCha8Rng,
    env_steps: u64,
    updates: u64,
    episodes_done: u64,
}

impl MaddpgTrainer {
    /// Fresh learner. `planned_episodes` drives the beta schedule and the
    /// fine-tuning window.
    pub fn new(
        scenario: Arc<Scenario>,
        config: MaddpgConfig,
        n_agents: usize,
        seed: u64,
        planned_episodes: u64,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if n_agents == 0 || n_agents > scenario.spawns().len() {
            return Err(TrainError::Config(format!(
                "scenario {} supports 1..={} agents, got {n_agents}",
                scenario.name(),
                scenario.spawns().len()
            )));
        }
        let agents = (0..n_agents)
            .map(|i| MaddpgAgent::new(n_agents, &config.hidden, config.sigma_0, episode_seed(seed ^ 0xA5A5, i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let replay = PrioritizedReplay::new(ReplayConfig {
            capacity: config.buffer_capacity,
            alpha: config.alpha,
            eps: config.priority_eps,
        })?;
        Ok(Self {
            scenario,
            config,
            n_agents,
            seed,
            planned_episodes,
            agents,
            replay,
            rng: ChaCha8Rng::seed_from_u64(episode_seed(seed, u64::MAX)),
            env_steps: 0,
            updates: 0,
            episodes_done: 0,
        })
    }

    /// Rebuilds a learner from a snapshot and the replay buffer saved with it.
    pub fn restore(
        scenario: Arc<Scenario>,
        config: MaddpgConfig,
        seed: u64,
        planned_episodes: u64,
        snapshot: MaddpgSnapshot,
        replay: PrioritizedReplay<Transition>,
    ) -> Result<Self, TrainError> {
        let n_agents = snapshot.agents.len();
        let mut t = Self::new(scenario, config, n_agents, seed, planned_episodes)?;
        for (fresh, saved) in t.agents.iter().zip(&snapshot.agents) {
            if fresh.actor.layer_sizes() != saved.actor.layer_sizes()
                || fresh.critic.layer_sizes() != saved.critic.layer_sizes()
            {
                return Err(TrainError::Config("snapshot network shapes do not match the config".into()));
            }
            saved.actor_opt.validate_for(&saved.actor)?;
            saved.critic_opt.validate_for(&saved.critic)?;
        }
        if replay.stats() != snapshot.replay_stats {
            return Err(TrainError::Config("replay state does not match the snapshot's buffer statistics".into()));
        }
        t.agents = snapshot.agents;
        t.rng = snapshot.rng;
        t.env_steps = snapshot.env_steps;
        t.updates = snapshot.updates;
        t.episodes_done = snapshot.episodes_done;
        t.replay = replay;
        Ok(t)
    }

    pub fn snapshot(&self) -> MaddpgSnapshot {
        MaddpgSnapshot {
            agents: self.agents.clone(),
            rng: self.rng.clone(),
            env_steps: self.env_steps,
            updates: self.updates,
            episodes_done: self.episodes_done,
            replay_stats: self.replay.stats(),
        }
    }

    pub fn agents(&self) -> &[MaddpgAgent] {
        &self.agents
    }

    pub fn replay(&self) -> &PrioritizedReplay<Transition> {
        &self.replay
    }

    pub fn config(&self) -> &MaddpgConfig {
        &self.config
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    fn lr_scale(&self) -> f64 {
        let start = (1.0 - self.config.fine_tune_fraction) * self.planned_episodes as f64;
        if self.planned_episodes > 0 && self.episodes_done as f64 >= start {
            self.config.fine_tune_lr_scale
        } else {
            1.0
        }
    }

    fn beta(&self) -> f64 {
        let frac = if self.planned_episodes == 0 {
            1.0
        } else {
            self.episodes_done as f64 / self.planned_episodes as f64
        };
        anneal_beta(self.config.beta_start, self.config.beta_end, frac)
    }

    fn update(&mut self, lr_scale: f64) -> Result<BatchUpdate, TrainError> {
        let beta = self.beta();
        let (batch, indices): (Batch, Vec<SampleIndex>) = {
            let sample = self.replay.sample(self.config.batch_size, beta, &mut self.rng)?;
            (Batch::new(&sample.items, sample.weights.clone())?, sample.indices.clone())
        };
        let result = learn_on_batch(&mut self.agents, &batch, &self.config, lr_scale)?;
        self.replay.update_priorities(&indices, &result.td_abs, None)?;
        self.updates += 1;
        Ok(result)
    }

    /// TD magnitude of a single transition under the current networks,
    /// used only for the priority breakdown written to traces.
    fn probe_td(&self, t: &Transition) -> Result<f64, TrainError> {
        let batch = Batch::new(&[t], vec![1.0])?;
        let y = critic_target(&self.agents, &batch, self.config.gamma)?;
        let input = critic_input(&batch.obs, &batch.actions)?;
        let mut sum = 0.0;
        let mut count = 0.0;
        for (i, agent) in self.agents.iter().enumerate() {
            if t.active[i] {
                sum += (y.get(0, i) - agent.critic.predict(&input)?.get(0, 0)).abs();
                count += 1.0;
            }
        }
        Ok(if count > 0.0 { sum / count } else { 0.0 })
    }

    /// Runs one exploring episode with learning after warmup.
    pub fn run_episode(&mut self, sink: &mut dyn TrainSink) -> Result<EpisodeMetrics, TrainError> {
        let episode = self.episodes_done;
        let (mut state, mut obs) = reset(
            self.scenario.clone(),
            self.n_agents,
            episode_seed(self.seed, episode),
        )?;
        let mut log = EpisodeLog::new(episode, self.n_agents, self.scenario.max_steps());
        let lr_scale = self.lr_scale();
        let mut critic_losses = Vec::new();
        let mut objectives = Vec::new();
        let want_traces = sink.wants_traces();
        loop {
            let active: Vec<bool> = state.vehicles().iter().map(|v| v.is_alive()).collect();
            let mut actions = act(&self.agents, &obs, true, &mut self.rng)?;
            for (a, &on) in actions.iter_mut().zip(&active) {
                if !on {
                    *a = [0.0, 0.0];
                }
            }
            let physical: Vec<AgentAction> = actions.iter().map(|&a| AgentAction::from_normalized(a)).collect();
            let (next, out) = step(&state, &physical)?;
            let events = self.joint_event_score(&state, &next, &out.events.agents, &active);
            let dones: Vec<bool> = (0..self.n_agents)
                .map(|i| !active[i] || out.done || !next.vehicles()[i].is_alive())
                .collect();
            let transition = Transition {
                obs: obs.flatten(),
                actions: actions.iter().flatten().copied().collect(),
                rewards: (0..self.n_agents)
                    .map(|i| if active[i] { out.rewards[i] } else { 0.0 })
                    .collect(),
                next_obs: out.observation.flatten(),
                active: active.clone(),
                dones,
            };
            let trace_record = if want_traces {
                let td = self.probe_td(&transition)?;
                Some(PriorityRecord::compute(td, events, self.config.priority_eps, self.config.alpha))
            } else {
                None
            };
            let index = self.replay.insert_with_max_priority(transition, events);
            self.env_steps += 1;
            if self.env_steps >= self.config.warmup_steps && self.replay.len() >= self.config.batch_size {
                for _ in 0..self.config.updates_per_env_step {
                    let up = self.update(lr_scale)?;
                    critic_losses.push(up.critic_loss);
                    objectives.push(up.actor_objective);
                }
            }
            if let Some(record) = trace_record {
                sink.step(&StepTrace {
                    episode_id: episode,
                    step: state.step_count(),
                    agents: trace_agents(&state, &next, &obs, &actions, &out.events.agents, &active),
                    priorities: vec![PriorityTrace {
                        slot: index.slot,
                        serial: index.serial,
                        record,
                    }],
                })?;
            }
            log.push(active, out.events);
            state = next;
            obs = out.observation;
            if out.done {
                break;
            }
        }
        for agent in &mut self.agents {
            agent.noise_sigma = (agent.noise_sigma * self.config.sigma_decay).max(self.config.sigma_min);
        }
        self.episodes_done += 1;
        let metrics = score_episode(&log)?;
        let telemetry = Telemetry {
            episode,
            env_steps: self.env_steps,
            updates: self.updates,
            sigma: self.agents.first().map(|a| a.noise_sigma),
            critic_loss: mean_of(&critic_losses),
            actor_objective: mean_of(&objectives),
            replay: Some(self.replay.stats()),
            ..Telemetry::default()
        };
        sink.episode(&metrics, &telemetry)?;
        Ok(metrics)
    }

    fn joint_event_score(
        &self,
        before: &SimState,
        after: &SimState,
        events: &[crate::sim::AgentEvents],
        active: &[bool],
    ) -> EventScore {
        let mut total = EventScore::default();
        for i in (0..self.n_agents).filter(|&i| active[i]) {
            let s = event_score(
                &events[i],
                after.vehicles()[i].speed - before.vehicles()[i].speed,
                after.completion(i) - before.completion(i),
                &self.config.event_weights,
            );
            total.add(&s);
        }
        total
    }
}

impl Policy for Vec<MaddpgAgent> {
    fn n_agents(&self) -> usize {
        self.len()
    }

    fn greedy(&self, obs: &JointObservation) -> Result<Vec<[f64; 2]>, TrainError> {
        // no noise is drawn when exploration is off
        act(self, obs, false, &mut ChaCha8Rng::seed_from_u64(0))
    }
}

/// Trains for `episodes` episodes, streaming metrics to `sink`.
pub fn train(
    scenario: Arc<Scenario>,
    config: MaddpgConfig,
    n_agents: usize,
    episodes: u64,
    seed: u64,
    sink: &mut dyn TrainSink,
) -> Result<(MaddpgTrainer, Vec<EpisodeMetrics>), TrainError> {
    let mut trainer = MaddpgTrainer::new(scenario, config, n_agents, seed, episodes)?;
    let mut metrics = Vec::with_capacity(episodes as usize);
    for _ in 0..episodes {
        metrics.push(trainer.run_episode(sink)?);
    }
    Ok((trainer, metrics))
}
