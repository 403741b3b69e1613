//! Simulation loop: mobility and demand, sequential per-station decisions,
//! queue stepping, training, target sync and periodic federation.

use std::collections::VecDeque;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::agent::{
    apply_penalty, build_state, clip_allocation, compute_reward, decay_epsilon, action_space, select_action,
    sync_target, train_step, write_agent_checkpoint, AgentNet, AgentState, EpsilonSchedule, ReplayBuffer, StateVec,
    TrainParams, Transition,
};
use crate::clustering::{dbscan, distance_matrix, ClusterAssignment};
use crate::domain::{
    validate_config, Algorithm, AllocationDecision, BaseStation, DemandScaleMode, ScenarioConfig,
};
use crate::env::{gamma, sample_snr, step_interval, IntervalOutcome, QueueState};
use crate::error::{Error, Result};
use crate::federation::{FederationRound, FederationStrategy, OverheadRecord, StrategyRegistry, Upload};
use crate::metrics::{ClusterSummary, EpisodeSliceRow, SimulationMetrics};
use crate::mobility::{DemandSeries, MobilityModel};
use crate::rng::{substream, SimRng};

/// Latency quantiles drawn per (station, slice, interval) for the reservoir.
pub const LATENCY_DRAWS: usize = 4;

pub struct AgentRuntime {
    pub net: AgentNet,
    pub buffer: ReplayBuffer,
    pub actions: Vec<u32>,
    rng: SimRng,
    /// State, action and reward awaiting the next state.
    pending: Option<(StateVec, usize, f64)>,
}

pub struct Station {
    pub bs: BaseStation,
    /// Indexed by slice id.
    pub agents: Vec<AgentRuntime>,
    pub queues: Vec<QueueState>,
    snr_rngs: Vec<SimRng>,
    demand_rng: SimRng,
}

/// What one agent did in one interval.
#[derive(Debug, Clone)]
pub struct SliceStep {
    pub bs_id: usize,
    pub slice_id: usize,
    pub snr_db: f64,
    pub spare_prbs: u32,
    pub proposed_prbs: u32,
    pub enforced_prbs: u32,
    pub penalized: bool,
    pub reward: f64,
    pub loss: Option<f64>,
    pub queue_consistent: bool,
    pub outcome: IntervalOutcome,
}

#[derive(Debug, Clone)]
pub struct IntervalReport {
    pub interval_index: u64,
    /// Station by station, slices in decision order.
    pub steps: Vec<SliceStep>,
}

impl IntervalReport {
    pub fn allocated(&self, bs_id: usize) -> u32 {
        self.steps.iter().filter(|s| s.bs_id == bs_id).map(|s| s.enforced_prbs).sum()
    }
}

#[derive(Debug, Clone)]
pub struct FederationReport {
    pub overhead: OverheadRecord,
    pub clusters: Vec<ClusterSummary>,
}

/// Read-only inputs shared by every station within one interval.
struct StepContext<'a> {
    cfg: &'a ScenarioConfig,
    mobility: &'a MobilityModel,
    counts: &'a [Vec<u32>],
    order: &'a [usize],
    train: &'a TrainParams,
    interval: u64,
}

impl Station {
    fn step(&mut self, ctx: &StepContext<'_>, demand_scale: &[f64]) -> Vec<SliceStep> {
        let cfg = ctx.cfg;
        let b = self.bs.id;
        let cap = self.bs.capacity_prbs;
        let n = cfg.slices.len();
        let offered: Vec<u64> = (0..n)
            .map(|i| match &cfg.traffic.fixed_offered_bits {
                Some(fixed) => fixed[i],
                None => ctx.mobility.demand(b, i, ctx.counts[b][i], ctx.interval, &mut self.demand_rng),
            })
            .collect();
        let snr: Vec<f64> = self
            .snr_rngs
            .iter_mut()
            .map(|r| sample_snr(r, cfg.traffic.snr_mean_db))
            .collect();

        let mut used = 0u32;
        let mut steps = Vec::with_capacity(n);
        for &i in ctx.order {
            let slice = &cfg.slices[i];
            let agent = &mut self.agents[i];
            let spare = cap - used;
            let raw = AgentState { snr_db: snr[i], offered_bits: offered[i], spare_prbs: spare };
            let s = build_state(&raw, cap, demand_scale[i]);
            if let Some((state, action, reward)) = agent.pending.take() {
                agent.buffer.push(Transition { state, action, reward, next_state: s });
            }
            let a = match ctx.train.algorithm {
                Algorithm::Random => agent.rng.random_range(0..agent.actions.len()),
                _ => select_action(&agent.net.q_values(&s), agent.net.epsilon, &mut agent.rng),
            };
            let proposed = agent.actions[a];
            let enforced = clip_allocation(proposed, spare, slice.chunk_prbs);
            let alloc = AllocationDecision { slice_id: i, bs_id: b, prbs: enforced, interval_index: ctx.interval };
            let (queue, outcome) =
                step_interval(&self.queues[i], &alloc, snr[i], offered[i], slice, cfg.decision_interval_s);
            let queue_consistent = queue.is_consistent();
            self.queues[i] = queue;

            let base = compute_reward(
                enforced,
                snr[i],
                offered[i] as f64,
                slice.chunk_prbs,
                cfg.decision_interval_s,
                cfg.learning.reward_mode,
            );
            let reward = apply_penalty(proposed, spare, slice.penalty_coeff, base);
            agent.pending = Some((s, a, reward));
            agent.net.cumulative_reward += reward;
            used += enforced;
            let loss = train_step(&mut agent.net, &agent.buffer, ctx.train, &mut agent.rng);

            steps.push(SliceStep {
                bs_id: b,
                slice_id: i,
                snr_db: snr[i],
                spare_prbs: spare,
                proposed_prbs: proposed,
                enforced_prbs: enforced,
                penalized: proposed > spare,
                reward,
                loss,
                queue_consistent,
                outcome,
            });
        }
        steps
    }
}

#[derive(Debug, Clone, Default)]
struct SliceAccumulator {
    reward_sum: f64,
    decisions: u64,
    offered: u64,
    served: u64,
    dropped: u64,
    latency_weighted: f64,
    penalties: u64,
}

/// Full mutable simulation state.
pub struct World {
    pub cfg: ScenarioConfig,
    pub strategy: Arc<dyn FederationStrategy>,
    pub mobility: MobilityModel,
    pub stations: Vec<Station>,
    /// Serialised model size per slice.
    pub model_bytes: Vec<usize>,
    mobility_rng: SimRng,
    federation_rng: SimRng,
    reservoir_rng: SimRng,
    /// Recent offered bits, `[slice][bs]`.
    demand_history: Vec<Vec<VecDeque<u64>>>,
    /// State normalisers, `[bs][slice]`.
    demand_scale: Vec<Vec<f64>>,
    schedule: EpsilonSchedule,
    train: TrainParams,
    order: Vec<usize>,
}

impl World {
    pub fn new(cfg: ScenarioConfig, strategy: Arc<dyn FederationStrategy>) -> Result<Self> {
        let cfg = validate_config(cfg).map_err(Error::Config)?;
        let seed = cfg.rng_seed;
        let n_slices = cfg.slices.len();
        let l = &cfg.learning;
        let stations: Vec<Station> = cfg
            .base_stations
            .iter()
            .map(|bs| {
                let agents = cfg
                    .slices
                    .iter()
                    .map(|s| {
                        let actions = action_space(bs.capacity_prbs, s.chunk_prbs);
                        let mut sizes = vec![crate::agent::STATE_DIM];
                        sizes.extend(&l.hidden_layers);
                        sizes.push(actions.len());
                        // One initial model per slice, shared by every station.
                        let mut init = substream(seed, &format!("init-{}", s.id));
                        AgentRuntime {
                            net: AgentNet::new(&sizes, l.epsilon_start, &mut init),
                            buffer: ReplayBuffer::new(l.buffer_size),
                            actions,
                            rng: substream(seed, &format!("agent-{}-{}", s.id, bs.id)),
                            pending: None,
                        }
                    })
                    .collect();
                Station {
                    bs: bs.clone(),
                    agents,
                    queues: vec![QueueState::default(); n_slices],
                    snr_rngs: cfg.slices.iter().map(|s| substream(seed, &format!("snr-{}-{}", s.id, bs.id))).collect(),
                    demand_rng: substream(seed, &format!("demand-{}", bs.id)),
                }
            })
            .collect();
        let mut mobility_rng = substream(seed, "mobility");
        let mobility = MobilityModel::new(
            &cfg.base_stations,
            cfg.traffic.users,
            n_slices,
            cfg.mobility.clone(),
            cfg.traffic.peak_hours,
            cfg.traffic.per_user_mean_bits.clone(),
            cfg.decision_interval_s,
            &mut mobility_rng,
        );
        let model_bytes = (0..n_slices).map(|i| stations[0].agents[i].net.online.wire_bytes()).collect();
        let train = TrainParams {
            batch_size: l.batch_size,
            gamma: l.gamma,
            learning_rate: l.learning_rate,
            algorithm: l.algorithm,
            optimizer: l.optimizer,
            td_error_clip: l.td_error_clip,
        };
        let schedule = EpsilonSchedule::new(l.epsilon_start, l.epsilon_floor, l.epsilon_floor_at, cfg.total_episodes);
        let n_bs = stations.len();
        Ok(Self {
            order: cfg.decision_order(),
            demand_history: vec![vec![VecDeque::new(); n_bs]; n_slices],
            demand_scale: vec![vec![1.0; n_slices]; n_bs],
            mobility_rng,
            federation_rng: substream(seed, "federation"),
            reservoir_rng: substream(seed, "reservoir"),
            schedule,
            train,
            model_bytes,
            stations,
            mobility,
            strategy,
            cfg,
        })
    }

    pub fn from_config(cfg: ScenarioConfig) -> Result<Self> {
        let strategy = StrategyRegistry::builtin().get(&cfg.strategy)?;
        Self::new(cfg, strategy)
    }

    pub fn new_metrics(&self) -> SimulationMetrics {
        SimulationMetrics::new(self.strategy.name(), self.cfg.slices.iter().map(|s| s.name.clone()).collect())
    }

    pub fn demand_scale(&self, bs: usize, slice: usize) -> f64 {
        self.demand_scale[bs][slice]
    }

    fn capacity_bits(&self, bs: &BaseStation) -> f64 {
        gamma(bs.capacity_prbs, self.cfg.traffic.snr_mean_db) * self.cfg.decision_interval_s
    }

    /// Recomputes the offered-traffic normaliser of every agent.
    pub fn refresh_demand_scale(&mut self) {
        for b in 0..self.stations.len() {
            let cap_bits = self.capacity_bits(&self.stations[b].bs);
            for i in 0..self.cfg.slices.len() {
                let pooled: Vec<u64> = match self.cfg.traffic.demand_scale {
                    DemandScaleMode::Capacity => Vec::new(),
                    DemandScaleMode::RunningP95 => self.demand_history[i].iter().flatten().copied().collect(),
                };
                self.demand_scale[b][i] = percentile_95(pooled).map_or(cap_bits, |p| p.max(1.0));
            }
        }
    }

    fn set_epsilon(&mut self, episode: usize) {
        let schedule = &self.schedule;
        for st in &mut self.stations {
            for a in &mut st.agents {
                decay_epsilon(&mut a.net, episode, schedule);
            }
        }
    }

    /// One decision interval at every station.
    pub fn run_decision_interval(&mut self, interval: u64) -> IntervalReport {
        if interval > 0 {
            self.mobility.step(interval, &mut self.mobility_rng);
        }
        let counts = self.mobility.counts(self.cfg.slices.len());
        let ctx = StepContext {
            cfg: &self.cfg,
            mobility: &self.mobility,
            counts: &counts,
            order: &self.order,
            train: &self.train,
            interval,
        };
        let scales = &self.demand_scale;
        let per_station: Vec<Vec<SliceStep>> = self
            .stations
            .par_iter_mut()
            .map(|st| {
                let b = st.bs.id;
                st.step(&ctx, &scales[b])
            })
            .collect();
        let steps: Vec<SliceStep> = per_station.into_iter().flatten().collect();

        let lookback = self.cfg.clustering.lookback_intervals;
        for s in &steps {
            let h = &mut self.demand_history[s.slice_id][s.bs_id];
            h.push_back(s.outcome.offered_bits);
            while h.len() > lookback {
                h.pop_front();
            }
        }
        IntervalReport { interval_index: interval, steps }
    }

    /// Demand series of one slice over the lookback window, by station.
    pub fn demand_series(&self, slice: usize) -> Vec<DemandSeries> {
        self.demand_history[slice]
            .iter()
            .enumerate()
            .map(|(b, h)| DemandSeries { slice_id: slice, bs_id: b, samples: h.iter().copied().collect() })
            .collect()
    }

    pub fn cluster_slice(&self, slice: usize) -> Result<ClusterAssignment> {
        let series = self.demand_series(slice);
        let n = series.len();
        if n < 2 || series[0].samples.is_empty() {
            return Ok(ClusterAssignment::all_noise(n));
        }
        let c = &self.cfg.clustering;
        let d = distance_matrix(&series, c.dtw_window_samples)?;
        Ok(dbscan(&d, c.eps_d, c.n_min))
    }

    /// Clusters, aggregates and redistributes models for every slice.
    pub fn run_federation_episode(&mut self, episode: usize) -> Result<FederationReport> {
        let mut total = OverheadRecord::empty(episode, self.strategy.name());
        let mut summaries = Vec::new();
        for slice in 0..self.cfg.slices.len() {
            let clusters = if self.strategy.uses_clusters() {
                self.cluster_slice(slice)?
            } else {
                ClusterAssignment::all_noise(self.stations.len())
            };
            let uploads = self
                .stations
                .iter()
                .map(|st| {
                    let net = &st.agents[slice].net;
                    (st.bs.id, Upload { params: net.online.clone(), reward: net.cumulative_reward })
                })
                .collect();
            let round = FederationRound { slice_id: slice, episode_index: episode, uploads, clusters };
            let out = self.strategy.federate(&round, self.model_bytes[slice], &mut self.federation_rng)?;
            for (b, omega) in out.updates {
                self.stations[b].agents[slice].net.install(omega);
            }
            for st in &mut self.stations {
                st.agents[slice].net.cumulative_reward = 0.0;
            }
            total.absorb(&out.overhead);
            summaries.push(ClusterSummary {
                episode,
                slice_id: slice,
                n_clusters: round.clusters.n_clusters,
                labels: round.clusters.labels,
            });
        }
        Ok(FederationReport { overhead: total, clusters: summaries })
    }

    fn absorb(&mut self, report: &IntervalReport, acc: &mut [SliceAccumulator], metrics: &mut SimulationMetrics) {
        metrics.intervals_run += 1;
        for st in &self.stations {
            if report.allocated(st.bs.id) > st.bs.capacity_prbs {
                metrics.capacity_violations += 1;
            }
        }
        for s in &report.steps {
            let o = &s.outcome;
            if !(o.conserves() && s.queue_consistent) {
                metrics.conservation_failures += 1;
            }
            let a = &mut acc[s.slice_id];
            a.reward_sum += s.reward;
            a.decisions += 1;
            a.offered += o.offered_bits;
            a.served += o.served_bits;
            a.dropped += o.dropped_bits;
            a.latency_weighted += o.mean_latency_ms * o.served_bits as f64;
            a.penalties += u64::from(s.penalized);
            if o.served_bits > 0 {
                let weight = o.served_bits as f64 / LATENCY_DRAWS as f64;
                for _ in 0..LATENCY_DRAWS {
                    let q: f64 = self.reservoir_rng.random();
                    if let Some(lat) = o.latency.at_fraction(q) {
                        metrics.latency[s.slice_id].offer(lat * 1000.0, weight, &mut self.reservoir_rng);
                    }
                }
            }
        }
    }

    /// Runs all intervals of one episode, then syncs targets and federates
    /// when the episode closes a federation period. Returns the interval reports.
    pub fn run_episode(&mut self, episode: usize, metrics: &mut SimulationMetrics) -> Result<Vec<IntervalReport>> {
        self.refresh_demand_scale();
        self.set_epsilon(episode);
        let ipe = self.cfg.intervals_per_episode();
        let mut acc = vec![SliceAccumulator::default(); self.cfg.slices.len()];
        let mut reports = Vec::with_capacity(ipe);
        for k in 0..ipe {
            let t = (episode * ipe + k) as u64;
            let report = self.run_decision_interval(t);
            self.absorb(&report, &mut acc, metrics);
            reports.push(report);
        }
        for st in &mut self.stations {
            for a in &mut st.agents {
                sync_target(&mut a.net);
            }
        }
        for (slice_id, a) in acc.into_iter().enumerate() {
            metrics.rows.push(EpisodeSliceRow {
                episode,
                slice_id,
                mean_reward: if a.decisions > 0 { a.reward_sum / a.decisions as f64 } else { 0.0 },
                dropped_fraction: if a.offered > 0 { a.dropped as f64 / a.offered as f64 } else { 0.0 },
                offered_bits: a.offered,
                served_bits: a.served,
                dropped_bits: a.dropped,
                mean_latency_ms: if a.served > 0 { a.latency_weighted / a.served as f64 } else { 0.0 },
                penalties: a.penalties,
            });
        }
        if (episode + 1) % self.cfg.federation_period_episodes == 0 {
            let report = self.run_federation_episode(episode)?;
            log::debug!(
                "episode {episode}: federated, uplink {} B, downlink {} B",
                report.overhead.uplink_bytes,
                report.overhead.downlink_bytes
            );
            metrics.overhead.push(report.overhead);
            metrics.clusters.extend(report.clusters);
        }
        Ok(reports)
    }

    /// Writes every agent as `agent-s{slice}-b{bs}.bin` into `dir`.
    pub fn save_checkpoints(&self, dir: &Path, episode: u32) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for st in &self.stations {
            for (i, a) in st.agents.iter().enumerate() {
                let f = File::create(dir.join(format!("agent-s{i}-b{}.bin", st.bs.id)))?;
                write_agent_checkpoint(BufWriter::new(f), &a.net, episode)?;
            }
        }
        Ok(())
    }
}

/// Nearest-rank 95th percentile; `None` for an empty sample.
fn percentile_95(mut v: Vec<u64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let rank = ((0.95 * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    let (_, p, _) = v.select_nth_unstable(rank);
    Some(*p as f64)
}

pub fn run_simulation_with(cfg: &ScenarioConfig, strategy: Arc<dyn FederationStrategy>) -> Result<SimulationMetrics> {
    let mut world = World::new(cfg.clone(), strategy)?;
    let mut metrics = world.new_metrics();
    for e in 0..world.cfg.total_episodes {
        world.run_episode(e, &mut metrics)?;
    }
    Ok(metrics)
}

/// Runs the scenario with its registered strategy.
pub fn run_simulation(cfg: &ScenarioConfig) -> Result<SimulationMetrics> {
    run_simulation_with(cfg, StrategyRegistry::builtin().get(&cfg.strategy)?)
}
