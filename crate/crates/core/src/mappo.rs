//! MAPPO: per-agent diagonal-Gaussian actors, a centralized value network
//! over the joint observation, GAE and the clipped surrogate objective.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::explain::StepTrace;
use crate::metrics::{score_episode, EpisodeLog, EpisodeMetrics};
use crate::nn::{Activation, AdamState, AdamVec, Mlp, Tensor2};
use crate::sim::{reset, step, AgentAction, JointObservation, Scenario, SimState, ACT_DIM, OBS_DIM};
use crate::train::{episode_seed, mean_of, trace_agents, Policy, Telemetry, TrainError, TrainSink};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    /// Environment steps collected between updates.
    pub horizon: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            horizon: 1024,
            lr: 3e-4,
            hidden: vec![64, 64],
            init_log_std: -0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0 && self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return bad("gamma must be in (0, 1] and gae_lambda in [0, 1]");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 || self.horizon == 0 {
            return bad("epochs, minibatches and horizon must be at least 1");
        }
        if !(self.lr > 0.0 && self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return bad("lr must be positive and loss coefficients non-negative");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.init_log_std) {
            return bad("init_log_std must be in [-5, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticActor {
    pub mean: Mlp,
    pub log_std: Vec<f64>,
}

impl StochasticActor {
    pub fn new(hidden: &[usize], init_log_std: f64, seed: u64) -> Result<Self, TrainError> {
        let mut sizes = vec![OBS_DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(ACT_DIM);
        Ok(Self {
            mean: Mlp::new(&sizes, Activation::Tanh, seed)?,
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); ACT_DIM],
        })
    }

    pub fn mean_action(&self, obs: &[f64]) -> Result<[f64; 2], TrainError> {
        let m = self.mean.predict_one(obs)?;
        Ok([m[0], m[1]])
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| 0.5 + 0.5 * (2.0 * PI).ln() + l).sum()
    }
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, l), a)| {
            let z = (a - m) / l.exp();
            -0.5 * z * z - l - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StochasticAction {
    /// Raw Gaussian sample; clamp it to `[-1, 1]` before acting.
    pub action: [f64; 2],
    pub log_prob: f64,
    pub entropy: f64,
}

pub fn act_stochastic<R: Rng + ?Sized>(
    actor: &StochasticActor,
    obs: &[f64],
    rng: &mut R,
) -> Result<StochasticAction, TrainError> {
    let mean = actor.mean_action(obs)?;
    let mut action = [0.0; 2];
    for k in 0..ACT_DIM {
        let z: f64 = rng.sample(StandardNormal);
        action[k] = mean[k] + actor.log_std[k].exp() * z;
    }
    Ok(StochasticAction {
        action,
        log_prob: gaussian_log_prob(&mean, &actor.log_std, &action),
        entropy: actor.entropy(),
    })
}

/// Generalized advantage estimates for one agent's sequence.
/// `last_value` bootstraps the step after the final one.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = rewards.len();
    let mut adv = vec![0.0; t_len];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..t_len).rev() {
        let keep = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * keep * next_value - values[t];
        next_adv = delta + gamma * lambda * keep * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to mean 0, std 1 (population); a single value or a
/// constant batch is only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

/// Per-sample clipped surrogate `min(rho A, clamp(rho, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub joint_obs: Vec<f64>,
    /// Raw (pre-clamp) actions.
    pub actions: Vec<[f64; 2]>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub active: Vec<bool>,
    pub dones: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub steps: Vec<RolloutStep>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Advantages and returns, indexed `[t][agent]`, before normalization.
    pub fn advantages(&self, last_values: &[f64], gamma: f64, lambda: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let t_len = self.steps.len();
        let n = last_values.len();
        let mut adv = vec![vec![0.0; n]; t_len];
        let mut ret = vec![vec![0.0; n]; t_len];
        for i in 0..n {
            let col = |f: &dyn Fn(&RolloutStep) -> f64| self.steps.iter().map(f).collect::<Vec<_>>();
            let r = col(&|s| s.rewards[i]);
            let v = col(&|s| s.values[i]);
            let d: Vec<bool> = self.steps.iter().map(|s| s.dones[i]).collect();
            let (a, g) = compute_gae(&r, &v, &d, last_values[i], gamma, lambda);
            for t in 0..t_len {
                adv[t][i] = a[t];
                ret[t][i] = g[t];
            }
        }
        (adv, ret)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub samples: usize,
}

/// Networks and optimizers of a MAPPO learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappoNets {
    pub actors: Vec<StochasticActor>,
    pub value: Mlp,
    pub actor_opts: Vec<AdamState>,
    pub log_std_opts: Vec<AdamVec>,
    pub value_opt: AdamState,
}

impl MappoNets {
    pub fn new(n_agents: usize, config: &PpoConfig, seed: u64) -> Result<Self, TrainError> {
        let actors = (0..n_agents)
            .map(|i| StochasticActor::new(&config.hidden, config.init_log_std, episode_seed(seed ^ 0x5A5A, i as u64)))
            .collect::<Result<Vec<_>, _>>()?;
        let mut sizes = vec![n_agents * OBS_DIM];
        sizes.extend_from_slice(&config.hidden);
        sizes.push(n_agents);
        let value = Mlp::new(&sizes, Activation::Linear, episode_seed(seed ^ 0x5A5A, u64::MAX))?;
        Ok(Self {
            actor_opts: actors.iter().map(|a| AdamState::new(&a.mean)).collect(),
            log_std_opts: actors.iter().map(|_| AdamVec::new(ACT_DIM)).collect(),
            value_opt: AdamState::new(&value),
            actors,
            value,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.actors.len()
    }

    pub fn values(&self, joint_obs: &[f64]) -> Result<Vec<f64>, TrainError> {
        Ok(self.value.predict_one(joint_obs)?)
    }
}

impl Policy for MappoNets {
    fn n_agents(&self) -> usize {
        self.actors.len()
    }

    /// Mean actions, clamped to the action box.
    fn greedy(&self, obs: &JointObservation) -> Result<Vec<[f64; 2]>, TrainError> {
        self.actors
            .iter()
            .zip(&obs.agents)
            .map(|(a, o)| {
                let m = a.mean_action(o)?;
                Ok([m[0].clamp(-1.0, 1.0), m[1].clamp(-1.0, 1.0)])
            })
            .collect()
    }
}

/// Clipped-surrogate epochs over one rollout. The rollout is cleared
/// afterwards, also when an update fails.
pub fn ppo_update<R: Rng + ?Sized>(
    nets: &mut MappoNets,
    rollout: &mut RolloutBuffer,
    last_values: &[f64],
    config: &PpoConfig,
    rng: &mut R,
) -> Result<PpoReport, TrainError> {
    let steps = std::mem::take(&mut rollout.steps);
    let data = RolloutBuffer { steps };
    let n = nets.n_agents();
    let (adv, ret) = data.advantages(last_values, config.gamma, config.gae_lambda);
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (t, s) in data.steps.iter().enumerate() {
        for i in 0..n {
            if s.active[i] {
                samples.push((t, i));
            }
        }
    }
    if samples.is_empty() {
        return Ok(PpoReport::default());
    }
    let mut flat_adv: Vec<f64> = samples.iter().map(|&(t, i)| adv[t][i]).collect();
    normalize_advantages(&mut flat_adv);
    let mut norm_adv = vec![vec![0.0; n]; data.steps.len()];
    for (k, &(t, i)) in samples.iter().enumerate() {
        norm_adv[t][i] = flat_adv[k];
    }

    let mut report = PpoReport::default();
    let mut batches = 0.0;
    let mut clipped = 0usize;
    let mut seen = 0usize;
    let mut order = samples.clone();
    for _ in 0..config.epochs {
        order.shuffle(rng);
        let per = order.len().div_ceil(config.minibatches);
        for chunk in order.chunks(per.max(1)) {
            let mb = minibatch_step(nets, &data, chunk, &norm_adv, &ret, config)?;
            report.policy_loss += mb.policy_loss;
            report.value_loss += mb.value_loss;
            report.entropy += mb.entropy;
            clipped += mb.clipped;
            seen += chunk.len();
            batches += 1.0;
        }
    }
    report.policy_loss /= batches;
    report.value_loss /= batches;
    report.entropy /= batches;
    report.clip_fraction = clipped as f64 / seen as f64;
    report.samples = samples.len();
    Ok(report)
}

struct MinibatchResult {
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    clipped: usize,
}

fn minibatch_step(
    nets: &mut MappoNets,
    data: &RolloutBuffer,
    chunk: &[(usize, usize)],
    adv: &[Vec<f64>],
    ret: &[Vec<f64>],
    config: &PpoConfig,
) -> Result<MinibatchResult, TrainError> {
    let n = nets.n_agents();
    let m = chunk.len() as f64;
    let mut policy_loss = 0.0;
    let mut entropy = 0.0;
    let mut clipped = 0usize;
    let mut actor_grads = Vec::with_capacity(n);
    for i in 0..n {
        let mine: Vec<(usize, usize)> = chunk.iter().copied().filter(|&(_, j)| j == i).collect();
        let actor = &nets.actors[i];
        let mut log_std_grad = vec![0.0; ACT_DIM];
        if mine.is_empty() {
            actor_grads.push(None);
            continue;
        }
        let rows: Vec<&[f64]> = mine
            .iter()
            .map(|&(t, _)| &data.steps[t].joint_obs[i * OBS_DIM..(i + 1) * OBS_DIM])
            .collect();
        let cache = actor.mean.forward(&Tensor2::from_rows(&rows)?)?;
        let mu = cache.output();
        let std: Vec<f64> = actor.log_std.iter().map(|l| l.exp()).collect();
        let mut dmu = Tensor2::zeros(mine.len(), ACT_DIM);
        for (r, &(t, _)) in mine.iter().enumerate() {
            let a = data.steps[t].actions[i];
            let lp = gaussian_log_prob(mu.row(r), &actor.log_std, &a);
            let ratio = (lp - data.steps[t].log_probs[i]).exp();
            let a_hat = adv[t][i];
            let obj = clipped_surrogate(ratio, a_hat, config.clip_eps);
            policy_loss -= obj / m;
            if (ratio - 1.0).abs() > config.clip_eps {
                clipped += 1;
            }
            // gradient flows only through the unclipped branch when it is the minimum
            if ratio * a_hat <= ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps) * a_hat {
                let dlp = -ratio * a_hat / m;
                for k in 0..ACT_DIM {
                    let z = (a[k] - mu.get(r, k)) / std[k];
                    dmu.set(r, k, dlp * z / std[k]);
                    log_std_grad[k] += dlp * (z * z - 1.0);
                }
            }
            entropy += actor.entropy() / m;
            for g in &mut log_std_grad {
                *g -= config.entropy_coef / m;
            }
        }
        let (grads, _) = actor.mean.backward(&cache, &dmu)?;
        actor_grads.push(Some((grads, log_std_grad)));
    }

    let rows: Vec<&[f64]> = chunk.iter().map(|&(t, _)| data.steps[t].joint_obs.as_slice()).collect();
    let cache = nets.value.forward(&Tensor2::from_rows(&rows)?)?;
    let v = cache.output();
    let mut dv = Tensor2::zeros(chunk.len(), n);
    let mut value_loss = 0.0;
    for (r, &(t, i)) in chunk.iter().enumerate() {
        let err = v.get(r, i) - ret[t][i];
        value_loss += err * err / m;
        dv.set(r, i, config.value_coef * 2.0 * err / m);
    }
    let total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy;
    if !total.is_finite() {
        return Err(TrainError::NonFinite {
            what: "ppo loss".into(),
            update: nets.value_opt.step_count,
        });
    }
    let value_grads = nets.value.param_grads(&cache, &dv)?;
    nets.value_opt.step(&mut nets.value, &value_grads, config.lr)?;
    for (i, g) in actor_grads.into_iter().enumerate() {
        if let Some((grads, log_std_grad)) = g {
            nets.actor_opts[i].step(&mut nets.actors[i].mean, &grads, config.lr)?;
            nets.log_std_opts[i].step(&mut nets.actors[i].log_std, &log_std_grad, config.lr)?;
            for l in &mut nets.actors[i].log_std {
                *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }
        }
    }
    Ok(MinibatchResult {
        policy_loss,
        value_loss,
        entropy,
        clipped,
    })
}

/// Learner state a checkpoint carries. Checkpoints are taken between
/// episodes, so the partially filled rollout is included but no
/// simulator state is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappoSnapshot {
    pub nets: MappoNets,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub updates: u64,
    pub episodes_done: u64,
    pub rollout: RolloutBuffer,
}

struct Episode {
    state: SimState,
    obs: JointObservation,
    log: EpisodeLog,
}

pub struct MappoTrainer {
    scenario: Arc<Scenario>,
    config: PpoConfig,
    n_agents: usize,
    seed: u64,
    nets: MappoNets,
    rng: ChaCha8Rng,
    env_steps: u64,
    updates: u64,
    episodes_done: u64,
    rollout: RolloutBuffer,
    current: Option<Episode>,
    pending: Vec<PpoReport>,
}

impl MappoTrainer {
    pub fn new(scenario: Arc<Scenario>, config: PpoConfig, n_agents: usize, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        if n_agents == 0 || n_agents > scenario.spawns().len() {
            return Err(TrainError::Config(format!(
                "scenario {} supports 1..={} agents, got {n_agents}",
                scenario.name(),
                scenario.spawns().len()
            )));
        }
        Ok(Self {
            nets: MappoNets::new(n_agents, &config, seed)?,
            scenario,
            config,
            n_agents,
            seed,
            rng: ChaCha8Rng::seed_from_u64(episode_seed(seed, u64::MAX - 1)),
            env_steps: 0,
            updates: 0,
            episodes_done: 0,
            rollout: RolloutBuffer::default(),
            current: None,
            pending: Vec::new(),
        })
    }

    pub fn restore(
        scenario: Arc<Scenario>,
        config: PpoConfig,
        seed: u64,
        snapshot: MappoSnapshot,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(scenario, config, snapshot.nets.n_agents(), seed)?;
        for (fresh, saved) in t.nets.actors.iter().zip(&snapshot.nets.actors) {
            if fresh.mean.layer_sizes() != saved.mean.layer_sizes() || saved.log_std.len() != ACT_DIM {
                return Err(TrainError::Config("snapshot actor shapes do not match the config".into()));
            }
        }
        if t.nets.value.layer_sizes() != snapshot.nets.value.layer_sizes() {
            return Err(TrainError::Config("snapshot value network shape does not match the config".into()));
        }
        t.nets = snapshot.nets;
        t.rng = snapshot.rng;
        t.env_steps = snapshot.env_steps;
        t.updates = snapshot.updates;
        t.episodes_done = snapshot.episodes_done;
        t.rollout = snapshot.rollout;
        Ok(t)
    }

    /// Fails while an episode is in progress.
    pub fn snapshot(&self) -> Result<MappoSnapshot, TrainError> {
        if self.current.is_some() {
            return Err(TrainError::Config("cannot snapshot in the middle of an episode".into()));
        }
        Ok(MappoSnapshot {
            nets: self.nets.clone(),
            rng: self.rng.clone(),
            env_steps: self.env_steps,
            updates: self.updates,
            episodes_done: self.episodes_done,
            rollout: self.rollout.clone(),
        })
    }

    pub fn nets(&self) -> &MappoNets {
        &self.nets
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    /// Advances the environment one step, updating when the rollout is
    /// full. Returns the episode's metrics when it ends on this step.
    pub fn step_env(&mut self, sink: &mut dyn TrainSink) -> Result<Option<EpisodeMetrics>, TrainError> {
        let mut ep = match self.current.take() {
            Some(ep) => ep,
            None => {
                let (state, obs) = reset(
                    self.scenario.clone(),
                    self.n_agents,
                    episode_seed(self.seed, self.episodes_done),
                )?;
                let log = EpisodeLog::new(self.episodes_done, self.n_agents, self.scenario.max_steps());
                Episode { state, obs, log }
            }
        };
        let active: Vec<bool> = ep.state.vehicles().iter().map(|v| v.is_alive()).collect();
        let mut raw = Vec::with_capacity(self.n_agents);
        let mut log_probs = Vec::with_capacity(self.n_agents);
        for (i, actor) in self.nets.actors.iter().enumerate() {
            let s = act_stochastic(actor, &ep.obs.agents[i], &mut self.rng)?;
            let on = active[i];
            raw.push(if on { s.action } else { [0.0, 0.0] });
            log_probs.push(if on { s.log_prob } else { 0.0 });
        }
        let joint_obs = ep.obs.flatten();
        let values = self.nets.values(&joint_obs)?;
        let clamped: Vec<[f64; 2]> = raw.iter().map(|a| [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]).collect();
        let physical: Vec<AgentAction> = clamped.iter().map(|&a| AgentAction::from_normalized(a)).collect();
        let (next, out) = step(&ep.state, &physical)?;
        let dones: Vec<bool> = (0..self.n_agents)
            .map(|i| !active[i] || out.done || !next.vehicles()[i].is_alive())
            .collect();
        self.rollout.steps.push(RolloutStep {
            joint_obs,
            actions: raw,
            log_probs,
            rewards: (0..self.n_agents)
                .map(|i| if active[i] { out.rewards[i] } else { 0.0 })
                .collect(),
            values,
            active: active.clone(),
            dones,
        });
        if sink.wants_traces() {
            sink.step(&StepTrace {
                episode_id: ep.log.episode_id,
                step: ep.state.step_count(),
                agents: trace_agents(&ep.state, &next, &ep.obs, &clamped, &out.events.agents, &active),
                priorities: Vec::new(),
            })?;
        }
        ep.log.push(active, out.events.clone());
        self.env_steps += 1;
        let finished = out.done;
        ep.state = next;
        ep.obs = out.observation;
        if self.rollout.len() >= self.config.horizon {
            let last_values = self.nets.values(&ep.obs.flatten())?;
            let report = ppo_update(&mut self.nets, &mut self.rollout, &last_values, &self.config, &mut self.rng)?;
            self.updates += 1;
            self.pending.push(report);
        }
        if !finished {
            self.current = Some(ep);
            return Ok(None);
        }
        let metrics = score_episode(&ep.log)?;
        let reports = std::mem::take(&mut self.pending);
        let pick = |f: fn(&PpoReport) -> f64| mean_of(&reports.iter().map(f).collect::<Vec<_>>());
        let telemetry = Telemetry {
            episode: self.episodes_done,
            env_steps: self.env_steps,
            updates: self.updates,
            policy_loss: pick(|r| r.policy_loss),
            value_loss: pick(|r| r.value_loss),
            entropy: pick(|r| r.entropy),
            clip_fraction: pick(|r| r.clip_fraction),
            ..Telemetry::default()
        };
        self.episodes_done += 1;
        sink.episode(&metrics, &telemetry)?;
        Ok(Some(metrics))
    }

    pub fn run_episode(&mut self, sink: &mut dyn TrainSink) -> Result<EpisodeMetrics, TrainError> {
        loop {
            if let Some(m) = self.step_env(sink)? {
                return Ok(m);
            }
        }
    }
}

/// Trains for exactly `total_env_steps` environment steps. An episode cut
/// off by the budget is not scored.
pub fn train(
    scenario: Arc<Scenario>,
    config: PpoConfig,
    n_agents: usize,
    total_env_steps: u64,
    seed: u64,
    sink: &mut dyn TrainSink,
) -> Result<(MappoTrainer, Vec<EpisodeMetrics>), TrainError> {
    let mut trainer = MappoTrainer::new(scenario, config, n_agents, seed)?;
    let mut metrics = Vec::new();
    while trainer.env_steps() < total_env_steps {
        if let Some(m) = trainer.step_env(sink)? {
            metrics.push(m);
        }
    }
    Ok((trainer, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;
    use crate::train::NullSink;

    fn zero_actor(log_std: f64) -> StochasticActor {
        StochasticActor {
            mean: Mlp::from_layers(
                vec![Dense {
                    weight: Tensor2::zeros(ACT_DIM, OBS_DIM),
                    bias: vec![0.0; ACT_DIM],
                }],
                Activation::Tanh,
            )
            .unwrap(),
            log_std: vec![log_std; ACT_DIM],
        }
    }

    #[test]
    fn tight_gaussian_and_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = zero_actor(-5.0);
        for _ in 0..100 {
            let s = act_stochastic(&actor, &[0.1; OBS_DIM], &mut rng).unwrap();
            assert!(s.action.iter().all(|a| a.abs() < 0.05));
        }
        let lp = gaussian_log_prob(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        assert!((lp - (-(2.0 * PI).ln())).abs() < 1e-15);
        assert!((lp + 1.8379).abs() < 1e-4);
        let a = act_stochastic(&actor, &[0.0; OBS_DIM], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = act_stochastic(&actor, &[0.0; OBS_DIM], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gae_examples() {
        let (a, r) = compute_gae(&[1.0, 1.0], &[0.0, 0.0], &[false, true], 7.0, 0.99, 0.95);
        assert_eq!(a[1], 1.0);
        assert!((a[0] - 1.9405).abs() < 1e-12);
        assert_eq!(r, a);
        let rewards = [0.5, -1.0, 2.0];
        let values = [0.3, 0.1, -0.2];
        let (a0, _) = compute_gae(&rewards, &values, &[false; 3], 0.4, 0.9, 0.0);
        let deltas = [0.5 + 0.9 * 0.1 - 0.3, -1.0 + 0.9 * -0.2 - 0.1, 2.0 + 0.9 * 0.4 + 0.2];
        for t in 0..3 {
            assert!((a0[t] - deltas[t]).abs() < 1e-15);
        }
    }

    #[test]
    fn done_blocks_leakage() {
        let dones = [false, true, false, false];
        let (a, _) = compute_gae(&[1.0, 2.0, 3.0, 4.0], &[0.1; 4], &dones, 0.5, 0.99, 0.95);
        let (b, _) = compute_gae(&[1.0, 2.0, -30.0, 99.0], &[0.1; 4], &dones, -8.0, 0.99, 0.95);
        assert_eq!(a[..2], b[..2]);
    }

    #[test]
    fn clip_cases() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn normalization() {
        let mut v = vec![1.0, 2.0, 3.0, 10.0];
        normalize_advantages(&mut v);
        let mean = v.iter().sum::<f64>() / 4.0;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10);
    }

    #[test]
    fn zero_budget_and_determinism() {
        let sc = Arc::new(Scenario::builtin("straight").unwrap());
        let cfg = PpoConfig {
            horizon: 64,
            hidden: vec![16],
            ..PpoConfig::default()
        };
        let (_, m) = train(sc.clone(), cfg.clone(), 1, 0, 3, &mut NullSink).unwrap();
        assert!(m.is_empty());
        let (a, ma) = train(sc.clone(), cfg.clone(), 1, 300, 3, &mut NullSink).unwrap();
        let (b, mb) = train(sc, cfg, 1, 300, 3, &mut NullSink).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.nets(), b.nets());
        assert_eq!(a.env_steps(), 300);
    }

    #[test]
    fn first_epoch_ratios_are_one() {
        // with lr tiny, the first minibatch sees ratio exactly 1: no clipping
        let sc = Arc::new(Scenario::builtin("straight").unwrap());
        let cfg = PpoConfig {
            horizon: 32,
            epochs: 1,
            minibatches: 1,
            hidden: vec![8],
            ..PpoConfig::default()
        };
        let mut t = MappoTrainer::new(sc, cfg.clone(), 1, 0).unwrap();
        for _ in 0..31 {
            t.step_env(&mut NullSink).unwrap();
        }
        let mut rollout = t.rollout.clone();
        let mut nets = t.nets.clone();
        let rep = ppo_update(&mut nets, &mut rollout, &[0.0], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(rep.clip_fraction, 0.0);
        assert!(rollout.is_empty());
    }
}
