//! Per-(slice, base station) decision agent: state encoding, epsilon-greedy
//! chunk selection, gap-based reward, replay buffer and (double) DQN training.

use std::io::{Read, Write};

use rand::Rng;

use crate::domain::{Algorithm, OptimizerKind, RewardMode};
use crate::env::gamma;
use crate::error::{Error, Result};
use crate::neural::{
    accumulate_clipped_td_gradient, adam_update, forward, init_params, read_checkpoint, sgd_update, write_checkpoint,
    ModelParams, OptState,
};

pub const STATE_DIM: usize = 3;
pub const STATE_CLAMP: f64 = 2.0;
pub const SNR_SCALE_DB: f64 = 40.0;

pub type StateVec = [f64; STATE_DIM];

/// Raw monitoring tuple seen by one agent at decision time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentState {
    pub snr_db: f64,
    pub offered_bits: u64,
    pub spare_prbs: u32,
}

pub fn build_state(raw: &AgentState, bs_capacity: u32, demand_scale: f64) -> StateVec {
    let clamp = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, STATE_CLAMP) };
    let load = if demand_scale > 0.0 {
        raw.offered_bits as f64 / demand_scale
    } else if raw.offered_bits == 0 {
        0.0
    } else {
        STATE_CLAMP
    };
    [
        clamp(raw.snr_db / SNR_SCALE_DB),
        clamp(load),
        clamp(f64::from(raw.spare_prbs) / f64::from(bs_capacity.max(1))),
    ]
}

/// Allocatable PRB counts: `0, chunk, 2 chunk, ..., capacity`.
pub fn action_space(bs_capacity: u32, chunk: u32) -> Vec<u32> {
    (0..=bs_capacity / chunk).map(|k| k * chunk).collect()
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// One uniform draw decides explore vs exploit; exploring draws a second.
pub fn select_action<R: Rng + ?Sized>(q_values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    assert!(!q_values.is_empty(), "empty action set");
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q_values.len())
    } else {
        argmax(q_values)
    }
}

/// Lower and upper allocation-gap bounds `(rho_low, rho_up)` in bits.
pub fn gap_bounds(snr_db: f64, chunk: u32, interval_s: f64) -> (f64, f64) {
    let g = gamma(chunk, snr_db) * interval_s;
    (-g, 2.0 * g)
}

/// Reward for allocation gap `alpha` given the gap bounds.
pub fn reward_from_gap(alpha: f64, rho_low: f64, rho_up: f64, mode: RewardMode) -> f64 {
    if alpha < rho_low {
        match mode {
            RewardMode::Normalized => (alpha - 4.0 * rho_low) / rho_up,
            RewardMode::Literal => alpha - 4.0 * rho_low,
            RewardMode::PenalizeUnderprovision => (alpha - 4.0 * rho_low.abs()) / rho_up,
        }
    } else if alpha <= rho_up {
        let x = alpha / rho_up;
        (1.0 - x) * x
    } else {
        match mode {
            RewardMode::Literal => -(alpha - rho_up),
            _ => -(alpha - rho_up) / rho_up,
        }
    }
}

pub fn compute_reward(
    alloc_prbs: u32,
    snr_db: f64,
    offered_bits: f64,
    chunk: u32,
    interval_s: f64,
    mode: RewardMode,
) -> f64 {
    let alpha = gamma(alloc_prbs, snr_db) * interval_s - offered_bits;
    let (rho_low, rho_up) = gap_bounds(snr_db, chunk, interval_s);
    reward_from_gap(alpha, rho_low, rho_up, mode)
}

/// A proposal above the spare PRBs overrides the reward with `-eta`.
pub fn apply_penalty(proposed_prbs: u32, spare_prbs: u32, eta: f64, reward_in: f64) -> f64 {
    if proposed_prbs > spare_prbs {
        -eta
    } else {
        reward_in
    }
}

/// Largest multiple of `chunk` not above `min(proposed, spare)`.
pub fn clip_allocation(proposed_prbs: u32, spare_prbs: u32, chunk: u32) -> u32 {
    if proposed_prbs <= spare_prbs {
        proposed_prbs
    } else {
        spare_prbs / chunk * chunk
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: StateVec,
    pub action: usize,
    pub reward: f64,
    pub next_state: StateVec,
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::with_capacity(capacity.min(4096)), next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
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

    pub fn get(&self, k: usize) -> &Transition {
        &self.items[k]
    }

    /// Distinct indices, `None` when fewer than `batch` transitions are stored.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<usize>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(rand::seq::index::sample(rng, self.items.len(), batch).into_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub floor: f64,
    /// Episode at which the floor is reached.
    pub floor_episode: f64,
}

impl EpsilonSchedule {
    pub fn new(start: f64, floor: f64, floor_fraction: f64, total_episodes: usize) -> Self {
        Self { start, floor, floor_episode: floor_fraction * total_episodes as f64 }
    }

    pub fn at(&self, episode: usize) -> f64 {
        let e = episode as f64;
        if e >= self.floor_episode || self.start <= self.floor {
            return self.floor.min(self.start);
        }
        self.start * (self.floor / self.start).powf(e / self.floor_episode)
    }
}

/// Online and target networks plus optimizer and bookkeeping for one agent.
#[derive(Debug, Clone)]
pub struct AgentNet {
    pub online: ModelParams,
    pub target: ModelParams,
    pub opt: OptState,
    pub epsilon: f64,
    /// Reward accumulated since the last federation.
    pub cumulative_reward: f64,
}

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], epsilon: f64, rng: &mut R) -> Self {
        let online = init_params(layer_sizes, rng);
        Self::from_params(online, epsilon)
    }

    pub fn from_params(online: ModelParams, epsilon: f64) -> Self {
        Self {
            target: online.clone(),
            opt: OptState::new(online.len()),
            online,
            epsilon,
            cumulative_reward: 0.0,
        }
    }

    pub fn q_values(&self, state: &StateVec) -> Vec<f64> {
        forward(&self.online, state).expect("state width matches network input")
    }

    /// Installs a model received from federation as both online and target.
    pub fn install(&mut self, params: ModelParams) {
        assert!(params.same_shape(&self.online), "federated model shape");
        self.target = params.clone();
        self.online = params;
        self.opt.reset();
    }
}

pub fn sync_target(net: &mut AgentNet) {
    net.target.clone_from(&net.online);
}

pub fn decay_epsilon(net: &mut AgentNet, episode: usize, schedule: &EpsilonSchedule) {
    net.epsilon = schedule.at(episode);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub batch_size: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub algorithm: Algorithm,
    pub optimizer: OptimizerKind,
    /// TD-error magnitude above which the gradient stops growing.
    pub td_error_clip: f64,
}

/// Bootstrapped target for one transition.
pub fn td_target(net: &AgentNet, t: &Transition, gamma_discount: f64, algorithm: Algorithm) -> f64 {
    let next_online = forward(&net.online, &t.next_state).expect("state width");
    let bootstrap = match algorithm {
        Algorithm::Ddqn => {
            let a = argmax(&next_online);
            forward(&net.target, &t.next_state).expect("state width")[a]
        }
        Algorithm::Dqn | Algorithm::Random => next_online[argmax(&next_online)],
    };
    t.reward + gamma_discount * bootstrap
}

/// One optimizer step on a sampled batch; `None` if the buffer is too small.
/// Returns the batch mean squared TD error before the update.
pub fn train_step<R: Rng + ?Sized>(
    net: &mut AgentNet,
    buffer: &ReplayBuffer,
    params: &TrainParams,
    rng: &mut R,
) -> Option<f64> {
    if params.algorithm == Algorithm::Random {
        return None;
    }
    let batch = buffer.sample_indices(params.batch_size, rng)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = vec![0.0; net.online.len()];
    let mut loss = 0.0;
    for &k in &batch {
        let t = buffer.get(k);
        let y = td_target(net, t, params.gamma, params.algorithm);
        loss += accumulate_clipped_td_gradient(&net.online, &t.state, t.action, y, params.td_error_clip, scale, &mut grads)
            .expect("state width");
    }
    match params.optimizer {
        OptimizerKind::Adam => adam_update(&mut net.online, &grads, &mut net.opt, params.learning_rate),
        OptimizerKind::Sgd => sgd_update(&mut net.online, &grads, params.learning_rate),
    }
    Some(loss * scale)
}

/// Online network in the neural checkpoint format, then epsilon as f32 and
/// the episode index as u32 (little-endian).
pub fn write_agent_checkpoint<W: Write>(mut w: W, net: &AgentNet, episode: u32) -> Result<()> {
    write_checkpoint(&mut w, &net.online)?;
    w.write_all(&(net.epsilon as f32).to_le_bytes())?;
    w.write_all(&episode.to_le_bytes())?;
    Ok(())
}

pub fn read_agent_checkpoint<R: Read>(mut r: R) -> Result<(AgentNet, u32)> {
    let params = read_checkpoint(&mut r)?;
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::Checkpoint("missing epsilon trailer".into()))?;
    let epsilon = f64::from(f32::from_le_bytes(word));
    r.read_exact(&mut word).map_err(|_| Error::Checkpoint("missing episode trailer".into()))?;
    Ok((AgentNet::from_params(params, epsilon), u32::from_le_bytes(word)))
}
