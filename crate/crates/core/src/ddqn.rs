//! Double-DQN training: replay memory, epsilon-greedy exploration with a
//! linear schedule, hard target-network copies and periodic evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gridworld::{Action, GameRules, GridState, Observation};
use crate::nnet::Adam;
use crate::rng::{derive_indexed, derive_seed, rng_from};
use crate::vinnet::{VinNetwork, NUM_ACTIONS};

/// Linear epsilon annealing for training, constant epsilon for testing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub anneal_steps: u64,
    pub eps_test: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            eps_start: 1.0,
            eps_end: 0.1,
            anneal_steps: 50_000,
            eps_test: 0.05,
        }
    }
}

impl Schedule {
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.eps_end;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.eps_start + frac * (self.eps_end - self.eps_start)
    }
}

/// Lowest-index argmax.
pub fn greedy_action(q: &[f64; NUM_ACTIONS]) -> Action {
    let mut best = 0;
    for a in 1..NUM_ACTIONS {
        if q[a] > q[best] {
            best = a;
        }
    }
    Action::from_index(best)
}

/// Uniform random action with probability `epsilon`, otherwise greedy.
pub fn select_action(q: &[f64; NUM_ACTIONS], epsilon: f64, rng: &mut impl Rng) -> Action {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        Action::from_index(rng.random_range(0..NUM_ACTIONS))
    } else {
        greedy_action(q)
    }
}

/// One replay record; `next_obs` is `None` exactly when the step ended the
/// episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Option<Observation>,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.next_obs.is_none()
    }
}

/// Fixed-capacity FIFO of transitions.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, batch: usize, rng: &mut impl Rng) -> Result<Vec<&'a Transition>> {
        if self.items.len() < batch || self.items.is_empty() {
            return Err(Error::UnderfullBuffer {
                len: self.items.len(),
                batch,
            });
        }
        Ok((0..batch)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect())
    }
}

/// `r` for terminal transitions, otherwise
/// `r + gamma * Q_target(s', argmax_a Q_online(s', a))`.
pub fn ddqn_target(t: &Transition, online: &VinNetwork, target: &VinNetwork, gamma: f64) -> Result<f64> {
    let Some(next) = &t.next_obs else {
        return Ok(t.reward);
    };
    if gamma == 0.0 {
        return Ok(t.reward);
    }
    let obs = next.to_tensor();
    let choice = greedy_action(&online.forward_q(&obs)?);
    let value = target.forward_q(&obs)?[choice.index()];
    Ok(t.reward + gamma * value)
}

/// One minibatch update. The loss is the mean squared error between the
/// online network's Q-value of the taken action and the double-DQN
/// target; only that output receives gradient. Returns the loss.
pub fn train_step(
    online: &mut VinNetwork,
    target: &VinNetwork,
    buffer: &ReplayBuffer,
    batch_size: usize,
    gamma: f64,
    optimizer: &mut Adam,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = buffer.sample(batch_size, rng)?;
    let targets = batch
        .iter()
        .map(|t| ddqn_target(t, online, target, gamma))
        .collect::<Result<Vec<_>>>()?;
    let scale = 2.0 / batch_size as f64;
    let mut loss = 0.0;
    online.zero_grad();
    for (t, y) in batch.iter().zip(targets) {
        let mut trace = online.forward(&t.obs.to_tensor())?;
        let err = trace.q()[t.action.index()] - y;
        loss += err * err;
        let mut q_grad = [0.0; NUM_ACTIONS];
        q_grad[t.action.index()] = scale * err;
        online.backward(&mut trace, &q_grad)?;
    }
    optimizer.step(online.layers_mut());
    Ok(loss / batch_size as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Environment steps.
    pub steps: u64,
    /// Steps collected before the first update.
    pub warmup: u64,
    /// Hard target-network copy interval, in steps.
    pub target_update: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// End the run once two consecutive evaluations reach this reward.
    pub stop_at: Option<f64>,
    pub master_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 100_000,
            warmup: 500,
            target_update: 500,
            eval_interval: 1_000,
            eval_episodes: 20,
            // At 0.99 the per-step discount is smaller than the fitting error,
            // so directional Q-values are indistinguishable and play dithers.
            gamma: 0.9,
            batch_size: 32,
            buffer_capacity: 50_000,
            learning_rate: 1e-3,
            schedule: Schedule::default(),
            stop_at: None,
            master_seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return fail("buffer capacity must hold at least one batch");
        }
        if self.eval_interval == 0 || self.eval_episodes == 0 {
            return fail("evaluation interval and episode count must be positive");
        }
        if self.target_update == 0 {
            return fail("target update interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be positive");
        }
        let s = &self.schedule;
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !(eps_ok(s.eps_start) && eps_ok(s.eps_end) && eps_ok(s.eps_test)) || s.eps_end > s.eps_start {
            return fail("epsilon schedule must be non-increasing within [0, 1]");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.schedule;
        for (k, v) in [
            ("steps", self.steps.to_string()),
            ("warmup", self.warmup.to_string()),
            ("target_update", self.target_update.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("batch_size", self.batch_size.to_string()),
            ("buffer_capacity", self.buffer_capacity.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("eps_start", format!("{:?}", s.eps_start)),
            ("eps_end", format!("{:?}", s.eps_end)),
            ("anneal_steps", s.anneal_steps.to_string()),
            ("eps_test", format!("{:?}", s.eps_test)),
            ("stop_at", self.stop_at.map_or("none".into(), |v| format!("{v:?}"))),
            ("master_seed", self.master_seed.to_string()),
        ] {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub avg_test_reward: f64,
    pub epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingHistory {
    pub checkpoints: Vec<Checkpoint>,
    pub config: TrainingConfig,
}

pub const HISTORY_HEADER: &str = "step,avg_test_reward,epsilon";

impl TrainingHistory {
    pub fn final_reward(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.avg_test_reward)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for c in &self.checkpoints {
            writeln!(out, "{},{:?},{:?}", c.step, c.avg_test_reward, c.epsilon).unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Parses the checkpoint rows of a history CSV.
pub fn parse_history_csv(text: &str) -> Result<Vec<Checkpoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == HISTORY_HEADER => {}
        _ => return Err(Error::parse(1, format!("expected header `{HISTORY_HEADER}`"))),
    }
    let mut out: Vec<Checkpoint> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::parse(i + 1, format!("bad row `{line}`"));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [step, reward, eps] = fields.as_slice() else {
            return Err(bad());
        };
        let c = Checkpoint {
            step: step.parse().map_err(|_| bad())?,
            avg_test_reward: reward.parse().map_err(|_| bad())?,
            epsilon: eps.parse().map_err(|_| bad())?,
        };
        if out.last().is_some_and(|p| p.step >= c.step) {
            return Err(Error::parse(i + 1, "steps must be strictly increasing"));
        }
        out.push(c);
    }
    Ok(out)
}

/// Plays one episode; returns the undiscounted return.
pub fn play_episode(
    rules: &Arc<GameRules>,
    episode_seed: u64,
    mut policy: impl FnMut(&Observation) -> Result<Action>,
) -> Result<f64> {
    let mut state = GridState::reset(rules, episode_seed)?;
    let mut total = 0.0;
    loop {
        let action = policy(&state.observation())?;
        let (r, done) = state.apply(action);
        total += r;
        if done {
            return Ok(total);
        }
    }
}

/// Mean return of `episodes` epsilon-greedy episodes, seeded by `seed`.
pub fn evaluate(net: &VinNetwork, rules: &Arc<GameRules>, episodes: usize, epsilon: f64, seed: u64) -> Result<f64> {
    let mut rng = rng_from(derive_seed(seed, "eval-actions"));
    let mut sum = 0.0;
    for e in 0..episodes {
        let episode_seed = derive_indexed(seed, "eval-episode", e as u64);
        sum += play_episode(rules, episode_seed, |obs| {
            let q = net.forward_q(&obs.to_tensor())?;
            Ok(select_action(&q, epsilon, &mut rng))
        })?;
    }
    Ok(sum / episodes as f64)
}

/// Mean return of the uniform random policy.
pub fn random_policy_return(rules: &Arc<GameRules>, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = rng_from(derive_seed(seed, "random-actions"));
    let mut sum = 0.0;
    for e in 0..episodes {
        let episode_seed = derive_indexed(seed, "random-episode", e as u64);
        sum += play_episode(rules, episode_seed, |_| Ok(Action::from_index(rng.random_range(0..NUM_ACTIONS))))?;
    }
    Ok(sum / episodes as f64)
}

/// Trains `net` in place on `rules`.
///
/// Every episode starts from a fresh episode seed. After `warmup` steps one
/// minibatch update follows each environment step; the target network is
/// a hard copy refreshed every `target_update` steps. An evaluation at
/// `eps_test` runs at step 0 and every `eval_interval` steps; evaluation
/// episodes never enter the replay buffer.
pub fn run_training(rules: &Arc<GameRules>, net: &mut VinNetwork, config: &TrainingConfig) -> Result<TrainingHistory> {
    run_training_with(rules, net, config, |_, _| {})
}

/// [`run_training`] with a callback after every checkpoint.
pub fn run_training_with(
    rules: &Arc<GameRules>,
    net: &mut VinNetwork,
    config: &TrainingConfig,
    mut on_checkpoint: impl FnMut(&Checkpoint, &VinNetwork),
) -> Result<TrainingHistory> {
    config.validate()?;
    if net.channels() != rules.num_channels() {
        return Err(Error::Config(format!(
            "network expects {} channels, rules have {}",
            net.channels(),
            rules.num_channels()
        )));
    }
    let master = config.master_seed;
    let mut explore_rng = rng_from(derive_seed(master, "explore"));
    let mut replay_rng = rng_from(derive_seed(master, "replay"));
    let mut optimizer = Adam::with_learning_rate(config.learning_rate);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut target = net.clone();
    let mut history = TrainingHistory {
        checkpoints: Vec::new(),
        config: config.clone(),
    };

    let mut checkpoint = |step: u64, net: &VinNetwork, history: &mut TrainingHistory| -> Result<bool> {
        let index = history.checkpoints.len() as u64;
        let reward = evaluate(
            net,
            rules,
            config.eval_episodes,
            config.schedule.eps_test,
            derive_indexed(master, "eval", index),
        )?;
        let c = Checkpoint {
            step,
            avg_test_reward: reward,
            epsilon: config.schedule.epsilon_at(step),
        };
        on_checkpoint(&c, net);
        history.checkpoints.push(c);
        let n = history.checkpoints.len();
        Ok(config
            .stop_at
            .is_some_and(|t| n >= 2 && history.checkpoints[n - 2..].iter().all(|c| c.avg_test_reward >= t)))
    };

    if checkpoint(0, net, &mut history)? {
        return Ok(history);
    }
    let mut episode = 0u64;
    let mut state = GridState::reset(rules, derive_indexed(master, "train-episode", episode))?;
    for step in 1..=config.steps {
        let obs = state.observation();
        let q = net.forward_q(&obs.to_tensor())?;
        let action = select_action(&q, config.schedule.epsilon_at(step - 1), &mut explore_rng);
        let (reward, done) = state.apply(action);
        buffer.push(Transition {
            obs,
            action,
            reward,
            next_obs: (!done).then(|| state.observation()),
        });
        if done {
            episode += 1;
            state = GridState::reset(rules, derive_indexed(master, "train-episode", episode))?;
        }
        if step > config.warmup && buffer.len() >= config.batch_size {
            train_step(net, &target, &buffer, config.batch_size, config.gamma, &mut optimizer, &mut replay_rng)?;
        }
        if step % config.target_update == 0 {
            target.copy_values_from(net);
        }
        if step % config.eval_interval == 0 && checkpoint(step, net, &mut history)? {
            break;
        }
    }
    Ok(history)
}
