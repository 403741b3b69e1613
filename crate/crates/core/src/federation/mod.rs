//! Per-slice model aggregation and model-exchange accounting.

mod strategy;

pub use strategy::{
    BestRepresentative, FederationOutcome, FederationStrategy, Fdrl, FullCluster, NoFederation, RandomRepresentative,
    StrategyRegistry,
};

use std::collections::BTreeMap;

use rand::Rng;

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::neural::ModelParams;

/// Shift applied above the minimum when some rewards are non-positive.
pub const REWARD_SHIFT_DELTA: f64 = 1e-6;

/// One agent's contribution: its online parameters and the reward it
/// accumulated since the previous federation.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub params: ModelParams,
    pub reward: f64,
}

/// Everything a strategy needs for one slice at one federation episode.
/// Cluster labels are indexed by base-station id.
#[derive(Debug, Clone)]
pub struct FederationRound {
    pub slice_id: usize,
    pub episode_index: usize,
    pub uploads: BTreeMap<usize, Upload>,
    pub clusters: ClusterAssignment,
}

impl FederationRound {
    pub fn n_bs(&self) -> usize {
        self.uploads.len()
    }

    fn upload(&self, bs: usize) -> Result<&Upload> {
        self.uploads.get(&bs).ok_or(Error::MissingUpload(bs))
    }
}

fn check_shapes(models: &[&ModelParams]) -> Result<()> {
    let first = models.first().ok_or(Error::EmptyModels)?;
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::ShapeMismatch);
    }
    Ok(())
}

/// Elementwise mean, accumulated incrementally so identical inputs come
/// back bit-exact.
pub fn fed_average(models: &[&ModelParams]) -> Result<ModelParams> {
    check_shapes(models)?;
    let mut out = models[0].clone();
    for (k, m) in models.iter().enumerate().skip(1) {
        let n = (k + 1) as f64;
        for (o, v) in out.values.iter_mut().zip(&m.values) {
            *o += (v - *o) / n;
        }
    }
    Ok(out)
}

/// `sum_b w_b theta_b`.
pub fn weighted_sum(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    check_shapes(models)?;
    if weights.len() != models.len() {
        return Err(Error::Dimension { expected: models.len(), actual: weights.len() });
    }
    let mut out = ModelParams::zeros(&models[0].layer_sizes);
    for (m, &w) in models.iter().zip(weights) {
        for (o, v) in out.values.iter_mut().zip(&m.values) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Rewards normalised to sum to one. Equal rewards give uniform weights; if
/// any reward is non-positive all are first shifted by `-min + delta`.
pub fn reward_weights(rewards: &[f64]) -> Vec<f64> {
    assert!(!rewards.is_empty(), "no rewards");
    let n = rewards.len() as f64;
    if rewards.iter().all(|&r| r == rewards[0]) || rewards.iter().any(|r| !r.is_finite()) {
        return vec![1.0 / n; rewards.len()];
    }
    let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = if min <= 0.0 {
        rewards.iter().map(|r| r - min + REWARD_SHIFT_DELTA).collect()
    } else {
        rewards.to_vec()
    };
    let total: f64 = shifted.iter().sum();
    shifted.iter().map(|s| s / total).collect()
}

/// Reward-weighted combination; equal rewards reduce to the plain mean.
fn reward_weighted(uploads: &[&Upload]) -> Result<ModelParams> {
    let models: Vec<&ModelParams> = uploads.iter().map(|u| &u.params).collect();
    let rewards: Vec<f64> = uploads.iter().map(|u| u.reward).collect();
    if rewards.iter().all(|&r| r == rewards[0]) {
        return fed_average(&models);
    }
    weighted_sum(&models, &reward_weights(&rewards))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FullClusterMode {
    /// Convex combination inside each cluster.
    Normalized,
    /// Additionally scaled by `1 / |cluster|`.
    Literal,
}

/// Per-cluster reward-weighted model, keyed by cluster id.
pub fn fed_full_cluster(round: &FederationRound, mode: FullClusterMode) -> Result<BTreeMap<usize, ModelParams>> {
    let mut out = BTreeMap::new();
    for (k, members) in round.clusters.clusters().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let uploads = members.iter().map(|&b| round.upload(b)).collect::<Result<Vec<_>>>()?;
        let mut omega = reward_weighted(&uploads)?;
        if mode == FullClusterMode::Literal {
            let scale = 1.0 / members.len() as f64;
            omega.values.iter_mut().for_each(|v| *v *= scale);
        }
        out.insert(k, omega);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RepresentativeMode {
    Random,
    Best,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeOutcome {
    pub model: ModelParams,
    /// Chosen base station per cluster, in cluster order.
    pub representatives: Vec<usize>,
    /// No cluster formed; the plain mean of all uploads was used instead.
    pub fell_back: bool,
}

pub fn choose_representatives<R: Rng + ?Sized>(
    round: &FederationRound,
    mode: RepresentativeMode,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut reps = Vec::new();
    for members in round.clusters.clusters().into_iter().filter(|m| !m.is_empty()) {
        let pick = match mode {
            RepresentativeMode::Random => members[rng.random_range(0..members.len())],
            RepresentativeMode::Best => {
                let mut best = members[0];
                for &b in &members[1..] {
                    if round.upload(b)?.reward > round.upload(best)?.reward {
                        best = b;
                    }
                }
                best
            }
        };
        round.upload(pick)?;
        reps.push(pick);
    }
    Ok(reps)
}

/// One delegate per cluster, combined by their rewards into a single model.
pub fn fed_representative<R: Rng + ?Sized>(
    round: &FederationRound,
    mode: RepresentativeMode,
    rng: &mut R,
) -> Result<RepresentativeOutcome> {
    let reps = choose_representatives(round, mode, rng)?;
    if reps.is_empty() {
        log::info!(
            "slice {} episode {}: no clusters formed, averaging all uploads",
            round.slice_id,
            round.episode_index
        );
        let all: Vec<&ModelParams> = round.uploads.values().map(|u| &u.params).collect();
        return Ok(RepresentativeOutcome { model: fed_average(&all)?, representatives: reps, fell_back: true });
    }
    let uploads = reps.iter().map(|&b| round.upload(b)).collect::<Result<Vec<_>>>()?;
    Ok(RepresentativeOutcome { model: reward_weighted(&uploads)?, representatives: reps, fell_back: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Fdrl,
    FullCluster,
    Representative,
    NoFederation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverheadRecord {
    pub episode_index: usize,
    pub strategy: String,
    pub uplink_models: usize,
    pub downlink_models: usize,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    /// A representative round with no clusters, counted as a global round.
    pub fallback: bool,
}

impl OverheadRecord {
    pub fn empty(episode_index: usize, strategy: &str) -> Self {
        Self {
            episode_index,
            strategy: strategy.to_string(),
            uplink_models: 0,
            downlink_models: 0,
            uplink_bytes: 0,
            downlink_bytes: 0,
            fallback: false,
        }
    }

    /// Adds another slice's exchange to this episode's total.
    pub fn absorb(&mut self, other: &OverheadRecord) {
        self.uplink_models += other.uplink_models;
        self.downlink_models += other.downlink_models;
        self.uplink_bytes += other.uplink_bytes;
        self.downlink_bytes += other.downlink_bytes;
        self.fallback |= other.fallback;
    }
}

/// Models exchanged in one round, and their byte volume.
pub fn account_overhead(
    kind: StrategyKind,
    clusters: &ClusterAssignment,
    n_bs: usize,
    model_bytes: usize,
) -> OverheadRecord {
    let formed = clusters.clusters().into_iter().filter(|m| !m.is_empty()).count();
    let (up, down, fallback) = match kind {
        StrategyKind::Fdrl => (n_bs, n_bs, false),
        StrategyKind::FullCluster => {
            let c = clusters.clustered_count();
            (c, c, false)
        }
        StrategyKind::Representative if formed == 0 => (n_bs, n_bs, true),
        StrategyKind::Representative => (formed, n_bs, false),
        StrategyKind::NoFederation => (0, 0, false),
    };
    OverheadRecord {
        episode_index: 0,
        strategy: String::new(),
        uplink_models: up,
        downlink_models: down,
        uplink_bytes: (up * model_bytes) as u64,
        downlink_bytes: (down * model_bytes) as u64,
        fallback,
    }
}
