//! Double DQN training over a distribution of arena kinds, plus evaluation
//! and the controllers that drive an arena episode.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::{
    scripted_action, Arena, ArenaConfig, ArenaError, ArenaState, EnvKind, MacroAction, StateVector,
    Termination, TrajectoryRow,
};
use crate::numeric::{sample_index, softmax};
use crate::qnet::{Adam, QNetwork, ACTIONS, DEFAULT_SIZES};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at gradient step {step}: loss {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    pub action: usize,
    pub reward: f64,
    pub next: StateVector,
    pub done: bool,
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
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

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Transition> {
        (0..count)
            .map(|_| self.items[rng.gen_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub beta: f64,
    pub batch_size: usize,
    /// Transitions collected with uniform actions before the policy acts.
    pub warmup: usize,
    /// Gradient steps between target refreshes.
    pub target_update: u64,
    pub pairing: TargetPairing,
    pub epsilon0: f64,
    pub epsilon_decay: f64,
    pub buffer_capacity: usize,
    pub env_distribution: Vec<(EnvKind, f64)>,
    pub layer_sizes: Vec<usize>,
    pub arena: ArenaConfig,
    /// Run this many test episodes after every `eval_interval` training
    /// episodes; zero disables the alternation.
    pub eval_interval: u32,
    pub eval_episodes: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            gamma: 0.975,
            beta: 8.0,
            batch_size: 128,
            warmup: 1000,
            target_update: 300,
            pairing: TargetPairing::default(),
            epsilon0: 1.0,
            epsilon_decay: 0.99,
            buffer_capacity: 10_000,
            env_distribution: vec![
                (EnvKind::Flat, 0.3),
                (EnvKind::Slope, 0.2),
                (EnvKind::Hole, 0.5),
            ],
            layer_sizes: DEFAULT_SIZES.to_vec(),
            arena: ArenaConfig::default(),
            eval_interval: 0,
            eval_episodes: 20,
        }
    }
}

impl TrainConfig {
    pub fn single_env(kind: EnvKind) -> Self {
        Self {
            env_distribution: vec![(kind, 1.0)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if self.env_distribution.is_empty() {
            return bad("environment distribution is empty");
        }
        let total: f64 = self.env_distribution.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-9 || self.env_distribution.iter().any(|(_, p)| *p < 0.0) {
            return bad("environment probabilities must be non-negative and sum to 1");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_update == 0 {
            return bad("batch size, buffer capacity and target interval must be positive");
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.beta.is_nan()
            || self.beta < 0.0
        {
            return bad("learning rate must be positive and beta non-negative");
        }
        if !(0.0..=1.0).contains(&self.epsilon0)
            || !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0)
        {
            return bad("epsilon0 must lie in [0, 1] and epsilon_decay in (0, 1]");
        }
        if self.layer_sizes.first() != Some(&StateVector::LEN)
            || self.layer_sizes.last() != Some(&ACTIONS)
        {
            return bad("layer sizes must start at 10 inputs and end at 8 outputs");
        }
        Ok(())
    }

    fn sample_kind<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvKind {
        let probs: Vec<f64> = self.env_distribution.iter().map(|(_, p)| *p).collect();
        self.env_distribution[sample_index(&probs, rng)].0
    }
}

pub fn boltzmann_probs(q: &[f64], beta: f64) -> Vec<f64> {
    softmax(q, beta)
}

/// Uniform while the buffer holds fewer than `warmup` transitions or on an
/// exploratory draw (which decays `epsilon`); Boltzmann over Q otherwise.
#[allow(clippy::too_many_arguments)]
pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    state: &StateVector,
    beta: f64,
    epsilon: &mut f64,
    epsilon_decay: f64,
    buffer_len: usize,
    warmup: usize,
    rng: &mut R,
) -> usize {
    if buffer_len < warmup {
        return rng.gen_range(0..ACTIONS);
    }
    if rng.gen::<f64>() < *epsilon {
        *epsilon *= epsilon_decay;
        return rng.gen_range(0..ACTIONS);
    }
    let q = net
        .forward(state.as_slice())
        .unwrap_or_else(|_| vec![0.0; ACTIONS]);
    sample_index(&boltzmann_probs(&q, beta), rng)
}

fn stack(states: impl Iterator<Item = StateVector>, rows: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, StateVector::LEN));
    for (i, s) in states.enumerate() {
        for (j, v) in s.0.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Which network picks the bootstrap action and which one values it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPairing {
    /// The primary network picks, the target network values.
    #[default]
    OnlineSelects,
    /// The target network picks, the primary network values.
    TargetSelects,
}

/// Bootstrapped regression targets; terminal samples keep only the reward.
pub fn td_target(
    batch: &[Transition],
    gamma: f64,
    primary: &QNetwork,
    target: &QNetwork,
    pairing: TargetPairing,
) -> Vec<f64> {
    if batch.is_empty() {
        return Vec::new();
    }
    let next = stack(batch.iter().map(|t| t.next), batch.len());
    let q_primary = primary.forward_batch(&next);
    let q_target = target.forward_batch(&next);
    let (chooser, valuer) = match pairing {
        TargetPairing::OnlineSelects => (&q_primary, &q_target),
        TargetPairing::TargetSelects => (&q_target, &q_primary),
    };
    batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done {
                t.reward
            } else {
                t.reward + gamma * valuer[[i, argmax(chooser.row(i))]]
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub episode: u32,
    pub phase: String,
    pub env: EnvKind,
    pub reward: f64,
    pub success: bool,
    pub epsilon: f64,
    pub buffer: usize,
}

pub fn write_train_log<W: std::io::Write>(rows: &[TrainLogRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub target: QNetwork,
    pub log: Vec<TrainLogRow>,
    pub gradient_steps: u64,
    pub epsilon: f64,
    pub buffer: ReplayBuffer,
}

/// Stateful trainer; `train` drives it for a whole budget.
pub struct Trainer {
    pub config: TrainConfig,
    pub network: QNetwork,
    pub target: QNetwork,
    pub buffer: ReplayBuffer,
    pub epsilon: f64,
    pub gradient_steps: u64,
    optimizer: Adam,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let network = QNetwork::new(&config.layer_sizes, &mut rng);
        Ok(Self::with_network(config, network, rng))
    }

    pub fn with_network(config: TrainConfig, network: QNetwork, rng: ChaCha8Rng) -> Self {
        Self {
            target: network.clone(),
            optimizer: Adam::new(&network, config.learning_rate),
            buffer: ReplayBuffer::new(config.buffer_capacity),
            epsilon: config.epsilon0,
            gradient_steps: 0,
            network,
            config,
            rng,
        }
    }

    /// One gradient step on a sampled batch; refreshes the target network
    /// on interval boundaries.
    pub fn learn(&mut self) -> Result<Option<f64>, TrainError> {
        if self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch = self.buffer.sample(self.config.batch_size, &mut self.rng);
        let targets = td_target(
            &batch,
            self.config.gamma,
            &self.network,
            &self.target,
            self.config.pairing,
        );
        let inputs = stack(batch.iter().map(|t| t.state), batch.len());
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let (loss, grads) = self.network.loss_and_gradients(&inputs, &actions, &targets);
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step: self.gradient_steps,
                loss,
            });
        }
        self.optimizer.apply(&mut self.network, &grads);
        self.gradient_steps += 1;
        if self
            .gradient_steps
            .is_multiple_of(self.config.target_update)
        {
            self.target = self.network.clone();
        }
        Ok(Some(loss))
    }

    pub fn run_episode(&mut self, episode: u32) -> Result<TrainLogRow, TrainError> {
        let kind = self.config.sample_kind(&mut self.rng);
        let mut arena = Arena::sample(kind, self.config.arena, &mut self.rng)?;
        let mut state = arena.observation();
        let mut total = 0.0;
        let success = loop {
            let action = select_action(
                &self.network,
                &state,
                self.config.beta,
                &mut self.epsilon,
                self.config.epsilon_decay,
                self.buffer.len(),
                self.config.warmup,
                &mut self.rng,
            );
            let out = arena.step(MacroAction::from_id(action).expect("valid action id"))?;
            total += out.reward;
            let done = out.termination.is_done();
            self.buffer.push(Transition {
                state,
                action,
                reward: out.reward,
                next: out.observation,
                done,
            });
            self.learn()?;
            state = out.observation;
            if done {
                break out.termination == Termination::Success;
            }
        };
        Ok(TrainLogRow {
            episode,
            phase: "train".into(),
            env: kind,
            reward: total,
            success,
            epsilon: self.epsilon,
            buffer: self.buffer.len(),
        })
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            network: self.network,
            target: self.target,
            log: Vec::new(),
            gradient_steps: self.gradient_steps,
            epsilon: self.epsilon,
            buffer: self.buffer,
        }
    }
}

pub fn train(config: &TrainConfig, episodes: u32, seed: u64) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(config.clone(), seed)?;
    let mut log = Vec::new();
    for episode in 0..episodes {
        let row = trainer.run_episode(episode)?;
        log::debug!(
            "episode {episode} {} reward {:.2} success {} eps {:.3}",
            row.env,
            row.reward,
            row.success,
            trainer.epsilon
        );
        log.push(row);
        let interval = config.eval_interval;
        if interval > 0 && (episode + 1) % interval == 0 {
            let controller = Controller::Trained {
                network: trainer.network.clone(),
                beta: config.beta,
            };
            let eval_seed = seed ^ u64::from(episode + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            for (i, kind) in (0..config.eval_episodes).map(|i| {
                (
                    i,
                    config.env_distribution[i as usize % config.env_distribution.len()].0,
                )
            }) {
                let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
                rng.set_stream(u64::from(i));
                let r = rollout(&controller, kind, &config.arena, &mut rng)?;
                log.push(TrainLogRow {
                    episode,
                    phase: "test".into(),
                    env: kind,
                    reward: r.reward,
                    success: r.success,
                    epsilon: trainer.epsilon,
                    buffer: trainer.buffer.len(),
                });
            }
        }
    }
    let mut outcome = trainer.finish();
    outcome.log = log;
    Ok(outcome)
}

/// Something that picks macro actions in an arena.
#[derive(Debug, Clone)]
pub enum Controller {
    Trained { network: QNetwork, beta: f64 },
    Scripted,
    Constant(MacroAction),
}

impl Controller {
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &ArenaState,
        obs: &StateVector,
        rng: &mut R,
    ) -> MacroAction {
        match self {
            Controller::Trained { network, beta } => {
                let q = network
                    .forward(obs.as_slice())
                    .unwrap_or_else(|_| vec![0.0; ACTIONS]);
                let a = sample_index(&boltzmann_probs(&q, *beta), rng);
                MacroAction::from_id(a).expect("valid action id")
            }
            Controller::Scripted => scripted_action(state),
            Controller::Constant(a) => *a,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub kind: EnvKind,
    pub states: Vec<StateVector>,
    pub actions: Vec<MacroAction>,
    pub rewards: Vec<f64>,
    pub reward: f64,
    pub success: bool,
    pub final_state: ArenaState,
}

impl Rollout {
    pub fn rows(&self, episode: u32) -> Vec<TrajectoryRow> {
        let last = self.actions.len();
        self.actions
            .iter()
            .enumerate()
            .map(|(i, a)| TrajectoryRow {
                episode,
                step: i as u32,
                action: a.id(),
                state: self.states[i].0,
                reward: self.rewards[i],
                termination: if i + 1 < last {
                    "running".into()
                } else if self.success {
                    "success".into()
                } else {
                    "failure".into()
                },
            })
            .collect()
    }
}

/// Runs an episode from `arena` until it terminates.
pub fn run_arena<R: Rng + ?Sized>(
    controller: &Controller,
    mut arena: Arena,
    rng: &mut R,
) -> Result<Rollout, ArenaError> {
    let kind = arena.kind;
    let mut obs = arena.observation();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    loop {
        let action = controller.act(&arena.state, &obs, rng);
        states.push(obs);
        actions.push(action);
        let out = arena.step(action)?;
        rewards.push(out.reward);
        obs = out.observation;
        if out.termination.is_done() {
            return Ok(Rollout {
                kind,
                states,
                actions,
                reward: rewards.iter().sum(),
                rewards,
                success: out.termination == Termination::Success,
                final_state: arena.state,
            });
        }
    }
}

pub fn rollout<R: Rng + ?Sized>(
    controller: &Controller,
    kind: EnvKind,
    config: &ArenaConfig,
    rng: &mut R,
) -> Result<Rollout, ArenaError> {
    let arena = Arena::sample(kind, *config, rng)?;
    run_arena(controller, arena, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub mean_reward: f64,
    pub success_rate: f64,
}

/// Test episodes with no exploration and no learning. Episode `i` draws
/// from stream `i` of the seed, so results do not depend on scheduling.
pub fn evaluate(
    controller: &Controller,
    kind: EnvKind,
    episodes: u32,
    config: &ArenaConfig,
    seed: u64,
) -> Result<Evaluation, ArenaError> {
    let results: Vec<Rollout> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u64::from(i));
            rollout(controller, kind, config, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let n = results.len().max(1) as f64;
    Ok(Evaluation {
        mean_reward: results.iter().map(|r| r.reward).sum::<f64>() / n,
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = ReplayBuffer::new(3);
        let t = |r| Transition {
            state: StateVector([0.0; 10]),
            action: 0,
            reward: r,
            next: StateVector([0.0; 10]),
            done: false,
        };
        for r in 0..5 {
            b.push(t(r as f64));
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn boltzmann_examples() {
        assert!(boltzmann_probs(&[2.0; 8], 8.0)
            .iter()
            .all(|p| (p - 0.125).abs() < 1e-15));
        let q = [0.3, -1.0, 4.0, 0.0, 2.0, 1.0, 0.5, -3.0];
        assert!(boltzmann_probs(&q, 0.0)
            .iter()
            .all(|p| (p - 0.125).abs() < 1e-15));
        let p = boltzmann_probs(&[1.0, 0.0], 1.0);
        assert!((p[0] - 0.73106).abs() < 1e-5 && (p[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn td_target_hand_example() {
        // Single-layer nets with zero weights and chosen biases give fixed
        // Q(s') values.
        let mut primary = QNetwork::zeros(&[10, 2]);
        primary.layers[0].bias = ndarray::array![4.0, 6.0];
        let mut target = QNetwork::zeros(&[10, 2]);
        target.layers[0].bias = ndarray::array![2.0, 3.0];
        let t = Transition {
            state: StateVector([0.0; 10]),
            action: 0,
            reward: 1.0,
            next: StateVector([0.0; 10]),
            done: false,
        };
        let as_written = TargetPairing::TargetSelects;
        assert_eq!(
            td_target(&[t], 0.5, &primary, &target, as_written),
            vec![4.0]
        );
        // Primary picks index 1, target values it at 3.
        assert_eq!(
            td_target(&[t], 0.5, &primary, &target, TargetPairing::OnlineSelects),
            vec![2.5]
        );
        for pairing in [as_written, TargetPairing::OnlineSelects] {
            let done = Transition { done: true, ..t };
            assert_eq!(
                td_target(&[done], 0.5, &primary, &target, pairing),
                vec![1.0]
            );
            assert_eq!(td_target(&[t], 0.0, &primary, &target, pairing), vec![1.0]);
        }
    }

    #[test]
    fn select_action_branches() {
        let net = QNetwork::zeros(&DEFAULT_SIZES);
        let s = StateVector([0.0; 10]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut eps = 1.0;
        select_action(&net, &s, 8.0, &mut eps, 0.99, 0, 1000, &mut rng);
        assert_eq!(eps, 1.0);
        select_action(&net, &s, 8.0, &mut eps, 0.99, 1000, 1000, &mut rng);
        assert_eq!(eps, 0.99);

        let mut peaked = QNetwork::zeros(&[10, 8]);
        peaked.layers[0].bias[5] = 10.0;
        let mut eps = 0.0;
        for _ in 0..100 {
            assert_eq!(
                select_action(&peaked, &s, 50.0, &mut eps, 0.99, 5000, 1000, &mut rng),
                5
            );
        }
    }

    #[test]
    fn target_copies_on_interval() {
        let config = TrainConfig {
            layer_sizes: vec![10, 8, 8],
            batch_size: 4,
            target_update: 3,
            ..TrainConfig::single_env(EnvKind::Flat)
        };
        let mut trainer = Trainer::new(config, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            trainer.buffer.push(Transition {
                state: StateVector(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
                action: rng.gen_range(0..8),
                reward: rng.gen_range(-1.0..1.0),
                next: StateVector(std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
                done: false,
            });
        }
        let initial = trainer.target.clone();
        for step in 1..=6u64 {
            trainer.learn().unwrap();
            if step % 3 == 0 {
                assert_eq!(trainer.target, trainer.network);
            } else {
                assert_ne!(trainer.target, trainer.network);
                if step < 3 {
                    assert_eq!(trainer.target, initial);
                }
            }
        }
    }

    #[test]
    fn zero_budget_keeps_parameters() {
        let config = TrainConfig::single_env(EnvKind::Flat);
        let fresh = Trainer::new(config.clone(), 9).unwrap().network;
        let out = train(&config, 0, 9).unwrap();
        assert_eq!(out.network, fresh);
        assert!(out.log.is_empty());
    }

    #[test]
    fn evaluation_reference_controllers() {
        let cfg = ArenaConfig::default();
        let oracle = evaluate(&Controller::Scripted, EnvKind::Flat, 40, &cfg, 5).unwrap();
        assert_eq!(oracle.success_rate, 1.0);
        let back = evaluate(
            &Controller::Constant(MacroAction::MoveBackwards),
            EnvKind::Flat,
            40,
            &cfg,
            5,
        )
        .unwrap();
        assert_eq!(back.success_rate, 0.0);
        let again = evaluate(&Controller::Scripted, EnvKind::Flat, 40, &cfg, 5).unwrap();
        assert_eq!(oracle, again);
    }
}
