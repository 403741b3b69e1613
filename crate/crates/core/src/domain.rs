//! Scenario data model: slices, base stations, run configuration.
//!
//! Everything here is plain data, immutable once [`validate_config`] accepts
//! it. The TOML layout is documented in `docs/scenario.md`.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ConfigIssue, Error, Result};
use crate::federation::StrategyRegistry;
use crate::rng::substream;

/// Per-slice SLA and agent constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSpec {
    pub id: usize,
    #[serde(default)]
    pub name: String,
    pub latency_bound_ms: f64,
    pub penalty_coeff: f64,
    pub chunk_prbs: u32,
    /// Lower decides earlier within a decision interval.
    pub priority: u32,
}

impl SliceSpec {
    pub fn latency_bound_s(&self) -> f64 {
        self.latency_bound_ms / 1000.0
    }
}

/// Diurnal shape of the traffic served by a base station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DemandProfile {
    Residential,
    Business,
    #[default]
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub id: usize,
    pub capacity_prbs: u32,
    /// Metres, planar.
    pub position: [f64; 2],
    #[serde(default)]
    pub profile: DemandProfile,
    /// Attractiveness of this site for exploring users.
    #[serde(default = "one")]
    pub relevance: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub eps_d: f64,
    pub n_min: usize,
    /// Sakoe-Chiba half-width in samples; 0 means unbounded.
    pub dtw_window_samples: usize,
    /// How many past intervals of demand feed the DTW matrix.
    pub lookback_intervals: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            eps_d: 0.06,
            n_min: 2,
            dtw_window_samples: 240,
            lookback_intervals: 1440,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakHours {
    pub residential: f64,
    pub business: f64,
    pub mixed: f64,
}

impl Default for PeakHours {
    fn default() -> Self {
        Self {
            residential: 21.0,
            business: 11.0,
            mixed: 16.0,
        }
    }
}

impl PeakHours {
    pub fn for_profile(&self, profile: DemandProfile) -> f64 {
        match profile {
            DemandProfile::Residential => self.residential,
            DemandProfile::Business => self.business,
            DemandProfile::Mixed => self.mixed,
        }
    }
}

/// How the offered-traffic state component is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DemandScaleMode {
    /// Running 95th percentile of the slice's offered bits over the last day.
    RunningP95,
    /// Bits one base station can carry in an interval at the mean SNR.
    #[default]
    Capacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficConfig {
    /// Total users, split evenly across slices.
    pub users: usize,
    /// Mean bits offered per user per decision interval at peak weight, one per slice.
    pub per_user_mean_bits: Vec<f64>,
    #[serde(default = "default_snr")]
    pub snr_mean_db: f64,
    #[serde(default)]
    pub peak_hours: PeakHours,
    #[serde(default)]
    pub demand_scale: DemandScaleMode,
    /// Constant offered bits per interval for every station, one per slice;
    /// replaces the user-driven demand when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_offered_bits: Option<Vec<u64>>,
}

fn default_snr() -> f64 {
    25.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilityConfig {
    pub p_new: f64,
    pub gamma_epr: f64,
    /// Chance that a user takes a d-EPR hop in a given interval.
    pub move_probability: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            p_new: 0.6,
            gamma_epr: 0.21,
            move_probability: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Online net picks the bootstrap action, target net evaluates it.
    #[default]
    Ddqn,
    /// Online net in both roles, no target network.
    Dqn,
    /// Uniform random actions, no learning.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    /// Under/over-provisioning branches divided by the upper gap bound.
    Normalized,
    /// Same branches without normalisation, in raw bits.
    Literal,
    /// Normalised, with the under-provisioning offset taken as `-4|rho_low|`
    /// so every under-provisioned allocation scores below the target band.
    #[default]
    PenalizeUnderprovision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub gamma: f64,
    pub learning_rate: f64,
    pub buffer_size: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_floor: f64,
    /// Fraction of `total_episodes` at which epsilon reaches its floor.
    pub epsilon_floor_at: f64,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default)]
    pub reward_mode: RewardMode,
    /// TD errors beyond this magnitude contribute a constant-size gradient
    /// (Huber loss); `inf` gives the plain squared error.
    #[serde(default = "default_td_clip")]
    pub td_error_clip: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![24, 24]
}

fn default_td_clip() -> f64 {
    1.0
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ddqn,
            optimizer: OptimizerKind::Adam,
            gamma: 0.99,
            learning_rate: 0.001,
            buffer_size: 20_000,
            batch_size: 32,
            epsilon_start: 1.0,
            epsilon_floor: 0.02,
            epsilon_floor_at: 0.5,
            hidden_layers: default_hidden(),
            reward_mode: RewardMode::PenalizeUnderprovision,
            td_error_clip: default_td_clip(),
        }
    }
}

/// Generator for a synthetic base-station layout, used when the scenario
/// file lists no base stations explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub count: usize,
    pub capacity_prbs: u32,
    /// Side of the square deployment area, metres.
    pub area_m: f64,
    /// Relative weights of residential, business and mixed sites.
    #[serde(default = "default_mix")]
    pub profile_mix: [f64; 3],
}

fn default_mix() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub rng_seed: u64,
    /// Registered federation strategy name.
    pub strategy: String,
    pub decision_interval_s: f64,
    pub epochs_per_episode: usize,
    pub federation_period_episodes: usize,
    pub total_episodes: usize,
    pub slices: Vec<SliceSpec>,
    #[serde(default)]
    pub base_stations: Vec<BaseStation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutConfig>,
    #[serde(default)]
    pub clustering: ClusteringConfig,
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub mobility: MobilityConfig,
    #[serde(default)]
    pub learning: LearningConfig,
}

/// One enforced PRB grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationDecision {
    pub slice_id: usize,
    pub bs_id: usize,
    pub prbs: u32,
    pub interval_index: u64,
}

impl AllocationDecision {
    pub fn is_valid_for(&self, slice: &SliceSpec, bs: &BaseStation) -> bool {
        self.prbs % slice.chunk_prbs.max(1) == 0 && self.prbs <= bs.capacity_prbs
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.expand_layout();
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario config is always representable as TOML")
    }

    /// Replaces an empty base-station list with one drawn from `layout`.
    /// Deterministic in `rng_seed`.
    pub fn expand_layout(&mut self) {
        let Some(layout) = self.layout.take() else {
            return;
        };
        if !self.base_stations.is_empty() {
            self.layout = Some(layout);
            return;
        }
        let mut rng = substream(self.rng_seed, "layout");
        let total: f64 = layout.profile_mix.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        let profiles = [
            DemandProfile::Residential,
            DemandProfile::Business,
            DemandProfile::Mixed,
        ];
        self.base_stations = (0..layout.count)
            .map(|id| {
                let x = rng.random::<f64>() * layout.area_m;
                let y = rng.random::<f64>() * layout.area_m;
                let mut pick = rng.random::<f64>() * total;
                let mut profile = DemandProfile::Mixed;
                for (w, p) in layout.profile_mix.iter().zip(profiles) {
                    if pick < *w {
                        profile = p;
                        break;
                    }
                    pick -= w;
                }
                BaseStation {
                    id,
                    capacity_prbs: layout.capacity_prbs,
                    position: [x, y],
                    profile,
                    relevance: 0.5 + 1.5 * rng.random::<f64>(),
                }
            })
            .collect();
    }

    /// URLLC, eMBB and mMTC with 10/40/20 ms bounds, penalty 100, 10-PRB chunks.
    pub fn standard_slices() -> Vec<SliceSpec> {
        [("urllc", 10.0), ("embb", 40.0), ("mmtc", 20.0)]
            .into_iter()
            .enumerate()
            .map(|(id, (name, lat))| SliceSpec {
                id,
                name: name.to_string(),
                latency_bound_ms: lat,
                penalty_coeff: 100.0,
                chunk_prbs: 10,
                priority: id as u32,
            })
            .collect()
    }

    /// Single base station with the three standard slices.
    pub fn single_bs(seed: u64) -> Self {
        Self {
            rng_seed: seed,
            strategy: "none".into(),
            decision_interval_s: 60.0,
            epochs_per_episode: 5,
            federation_period_episodes: 5,
            total_episodes: 200,
            slices: Self::standard_slices(),
            base_stations: vec![BaseStation {
                id: 0,
                capacity_prbs: 100,
                position: [0.0, 0.0],
                profile: DemandProfile::Mixed,
                relevance: 1.0,
            }],
            layout: None,
            clustering: ClusteringConfig::default(),
            traffic: TrafficConfig {
                users: 300,
                per_user_mean_bits: vec![2.0e7, 5.0e7, 1.5e7],
                snr_mean_db: 25.0,
                peak_hours: PeakHours::default(),
                demand_scale: DemandScaleMode::default(),
                fixed_offered_bits: None,
            },
            mobility: MobilityConfig::default(),
            learning: LearningConfig::default(),
        }
    }

    /// Multi-BS scenario with a synthetic layout; per-user demand is scaled
    /// so the mean load per station matches 300 users per station.
    pub fn multi_bs(n_bs: usize, users: usize, seed: u64) -> Self {
        let per_bs = users as f64 / n_bs.max(1) as f64;
        let scale = 300.0 / per_bs.max(1.0);
        let mut cfg = Self::single_bs(seed);
        cfg.strategy = "full-cluster".into();
        cfg.total_episodes = 1000;
        cfg.base_stations.clear();
        cfg.layout = Some(LayoutConfig {
            count: n_bs,
            capacity_prbs: 100,
            area_m: 3000.0,
            profile_mix: default_mix(),
        });
        cfg.traffic.users = users;
        for m in cfg.traffic.per_user_mean_bits.iter_mut() {
            *m *= scale;
        }
        cfg.expand_layout();
        cfg
    }

    pub fn intervals_per_episode(&self) -> usize {
        self.epochs_per_episode
    }

    pub fn total_intervals(&self) -> u64 {
        (self.total_episodes * self.epochs_per_episode) as u64
    }

    /// Slice indices sorted by ascending priority.
    pub fn decision_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.slices.len()).collect();
        order.sort_by_key(|&i| (self.slices[i].priority, i));
        order
    }

    /// Every violated invariant; empty when the config is valid.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut bad = |path: String, msg: &str| out.push(ConfigIssue::new(path, msg));

        if self.slices.is_empty() {
            bad("slices".into(), "empty slice set");
        }
        if self.base_stations.is_empty() {
            bad("base_stations".into(), "empty base station set");
        }
        let mut priorities = HashSet::new();
        for (k, s) in self.slices.iter().enumerate() {
            let p = format!("slices[{k}]");
            if s.id != k {
                bad(format!("{p}.id"), "slice ids must be 0..n in file order");
            }
            if !(s.latency_bound_ms > 0.0 && s.latency_bound_ms.is_finite()) {
                bad(format!("{p}.latency_bound_ms"), "must be positive");
            }
            if !(s.penalty_coeff >= 0.0 && s.penalty_coeff.is_finite()) {
                bad(format!("{p}.penalty_coeff"), "must be non-negative");
            }
            if s.chunk_prbs < 1 {
                bad(format!("{p}.chunk_prbs"), "must be at least 1");
            }
            if s.latency_bound_ms >= self.decision_interval_s * 1000.0 {
                bad(format!("{p}.latency_bound_ms"), "must be shorter than the decision interval");
            }
            if !priorities.insert(s.priority) {
                bad(format!("{p}.priority"), "duplicate priority");
            }
        }
        for (k, b) in self.base_stations.iter().enumerate() {
            let p = format!("base_stations[{k}]");
            if b.id != k {
                bad(format!("{p}.id"), "base station ids must be 0..n in file order");
            }
            if b.capacity_prbs < 1 {
                bad(format!("{p}.capacity_prbs"), "must be at least 1");
            }
            for s in &self.slices {
                if s.chunk_prbs >= 1 && b.capacity_prbs % s.chunk_prbs != 0 {
                    bad(
                        format!("{p}.capacity_prbs"),
                        &format!(
                            "capacity not a multiple of chunk ({} % {} != 0, slice {})",
                            b.capacity_prbs, s.chunk_prbs, s.id
                        ),
                    );
                }
            }
            if !b.position.iter().all(|c| c.is_finite()) {
                bad(format!("{p}.position"), "must be finite");
            }
            if !(b.relevance >= 0.0 && b.relevance.is_finite()) {
                bad(format!("{p}.relevance"), "must be non-negative");
            }
        }
        if !self.base_stations.is_empty() && self.base_stations.iter().all(|b| b.relevance <= 0.0) {
            bad("base_stations".into(), "at least one relevance must be positive");
        }
        if !(self.decision_interval_s > 0.0 && self.decision_interval_s.is_finite()) {
            bad("decision_interval_s".into(), "must be positive");
        }
        if self.epochs_per_episode < 1 {
            bad("epochs_per_episode".into(), "must be at least 1");
        }
        if self.federation_period_episodes < 1 {
            bad("federation_period_episodes".into(), "must be at least 1");
        }
        if self.strategy != "none"
            && self.base_stations.windows(2).any(|w| w[0].capacity_prbs != w[1].capacity_prbs)
        {
            bad("base_stations".into(), "federated base stations must share one capacity");
        }
        if !StrategyRegistry::builtin().contains(&self.strategy) {
            bad(
                "strategy".into(),
                &format!(
                    "unknown strategy `{}` (known: {})",
                    self.strategy,
                    StrategyRegistry::builtin().names().join(", ")
                ),
            );
        }

        let c = &self.clustering;
        if !(c.eps_d >= 0.0 && c.eps_d.is_finite()) {
            bad("clustering.eps_d".into(), "must be non-negative");
        }
        if c.n_min < 1 {
            bad("clustering.n_min".into(), "must be at least 1");
        }
        if c.lookback_intervals < 1 {
            bad("clustering.lookback_intervals".into(), "must be at least 1");
        }

        let t = &self.traffic;
        if let Some(fixed) = &t.fixed_offered_bits {
            if fixed.len() != self.slices.len() {
                bad("traffic.fixed_offered_bits".into(), "needs exactly one entry per slice");
            }
        }
        if t.per_user_mean_bits.len() != self.slices.len() {
            bad(
                "traffic.per_user_mean_bits".into(),
                "needs exactly one entry per slice",
            );
        }
        if t.per_user_mean_bits.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
            bad("traffic.per_user_mean_bits".into(), "entries must be non-negative");
        }
        if !t.snr_mean_db.is_finite() {
            bad("traffic.snr_mean_db".into(), "must be finite");
        }

        let m = &self.mobility;
        for (name, v) in [("p_new", m.p_new), ("move_probability", m.move_probability)] {
            if !(0.0..=1.0).contains(&v) {
                bad(format!("mobility.{name}"), "must lie in [0, 1]");
            }
        }
        if !(m.gamma_epr >= 0.0 && m.gamma_epr.is_finite()) {
            bad("mobility.gamma_epr".into(), "must be non-negative");
        }

        let l = &self.learning;
        if !(0.0..=1.0).contains(&l.gamma) {
            bad("learning.gamma".into(), "must lie in [0, 1]");
        }
        if !(l.learning_rate > 0.0 && l.learning_rate.is_finite()) {
            bad("learning.learning_rate".into(), "must be positive");
        }
        if l.batch_size < 1 {
            bad("learning.batch_size".into(), "must be at least 1");
        }
        if l.buffer_size < l.batch_size {
            bad("learning.buffer_size".into(), "must be at least batch_size");
        }
        if !(0.0 <= l.epsilon_floor && l.epsilon_floor <= l.epsilon_start && l.epsilon_start <= 1.0) {
            bad(
                "learning.epsilon_start".into(),
                "need 0 <= epsilon_floor <= epsilon_start <= 1",
            );
        }
        if !(l.epsilon_floor_at > 0.0 && l.epsilon_floor_at <= 1.0) {
            bad("learning.epsilon_floor_at".into(), "must lie in (0, 1]");
        }
        if !(l.td_error_clip > 0.0) {
            bad("learning.td_error_clip".into(), "must be positive");
        }
        if l.hidden_layers.is_empty() || l.hidden_layers.contains(&0) {
            bad("learning.hidden_layers".into(), "need at least one non-empty hidden layer");
        }
        out
    }
}

/// Returns `cfg` unchanged when every invariant holds, else all violations.
pub fn validate_config(cfg: ScenarioConfig) -> std::result::Result<ScenarioConfig, Vec<ConfigIssue>> {
    let issues = cfg.issues();
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(issues)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_multiple_of_chunk_is_valid() {
        let cfg = ScenarioConfig::single_bs(1);
        assert_eq!(cfg.base_stations[0].capacity_prbs, 100);
        assert_eq!(cfg.slices[0].chunk_prbs, 10);
        assert!(validate_config(cfg).is_ok());
    }

    #[test]
    fn capacity_not_multiple_of_chunk() {
        let mut cfg = ScenarioConfig::single_bs(1);
        cfg.slices[1].chunk_prbs = 7;
        let issues = validate_config(cfg).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].path, "base_stations[0].capacity_prbs");
        assert!(issues[0].message.contains("capacity not a multiple of chunk"));
    }

    #[test]
    fn empty_slice_set() {
        let mut cfg = ScenarioConfig::single_bs(1);
        cfg.slices.clear();
        cfg.traffic.per_user_mean_bits.clear();
        let issues = validate_config(cfg).unwrap_err();
        assert!(issues.iter().any(|i| i.message == "empty slice set"));
    }

    #[test]
    fn reports_every_violation() {
        let mut cfg = ScenarioConfig::single_bs(1);
        cfg.slices[2].priority = 0;
        cfg.base_stations.clear();
        cfg.learning.gamma = 1.5;
        cfg.strategy = "gossip".into();
        let paths: Vec<String> = validate_config(cfg).unwrap_err().into_iter().map(|i| i.path).collect();
        assert!(paths.contains(&"slices[2].priority".to_string()));
        assert!(paths.contains(&"base_stations".to_string()));
        assert!(paths.contains(&"learning.gamma".to_string()));
        assert!(paths.contains(&"strategy".to_string()));
    }

    #[test]
    fn validation_is_idempotent() {
        let cfg = ScenarioConfig::multi_bs(8, 500, 3);
        let once = validate_config(cfg.clone()).unwrap();
        let twice = validate_config(once.clone()).unwrap();
        assert_eq!(cfg, once);
        assert_eq!(once, twice);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ScenarioConfig::multi_bs(6, 300, 11);
        let text = cfg.to_toml_string();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn layout_is_seed_deterministic() {
        let a = ScenarioConfig::multi_bs(10, 500, 5);
        let b = ScenarioConfig::multi_bs(10, 500, 5);
        let c = ScenarioConfig::multi_bs(10, 500, 6);
        assert_eq!(a.base_stations, b.base_stations);
        assert_ne!(a.base_stations, c.base_stations);
        assert!(a.layout.is_none());
    }

    #[test]
    fn decision_order_follows_priority() {
        let mut cfg = ScenarioConfig::single_bs(1);
        cfg.slices[0].priority = 5;
        assert_eq!(cfg.decision_order(), vec![1, 2, 0]);
    }

    #[test]
    fn allocation_decision_validity() {
        let cfg = ScenarioConfig::single_bs(1);
        let ok = AllocationDecision { slice_id: 0, bs_id: 0, prbs: 40, interval_index: 0 };
        let off_grid = AllocationDecision { prbs: 45, ..ok };
        let too_big = AllocationDecision { prbs: 110, ..ok };
        assert!(ok.is_valid_for(&cfg.slices[0], &cfg.base_stations[0]));
        assert!(!off_grid.is_valid_for(&cfg.slices[0], &cfg.base_stations[0]));
        assert!(!too_big.is_valid_for(&cfg.slices[0], &cfg.base_stations[0]));
    }
}
