//! Federation strategies behind one trait, registered and looked up by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::neural::ModelParams;
use crate::rng::SimRng;

use super::{
    account_overhead, fed_average, fed_full_cluster, fed_representative, FederationRound, FullClusterMode,
    OverheadRecord, RepresentativeMode, StrategyKind,
};

/// Models to install after a round (base-station id to new parameters) and
/// the exchange it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct FederationOutcome {
    pub updates: BTreeMap<usize, ModelParams>,
    pub overhead: OverheadRecord,
    pub representatives: Vec<usize>,
}

pub trait FederationStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> StrategyKind;

    /// Whether the round needs a fresh clustering of the slice's agents.
    fn uses_clusters(&self) -> bool {
        matches!(self.kind(), StrategyKind::FullCluster | StrategyKind::Representative)
    }

    fn federate(&self, round: &FederationRound, model_bytes: usize, rng: &mut SimRng) -> Result<FederationOutcome>;
}

fn overhead(s: &dyn FederationStrategy, round: &FederationRound, model_bytes: usize) -> OverheadRecord {
    let mut rec = account_overhead(s.kind(), &round.clusters, round.n_bs(), model_bytes);
    rec.episode_index = round.episode_index;
    rec.strategy = s.name().to_string();
    rec
}

/// Global mean of every upload, sent back to every base station.
pub struct Fdrl;

impl FederationStrategy for Fdrl {
    fn name(&self) -> &str {
        "fdrl"
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::Fdrl
    }

    fn federate(&self, round: &FederationRound, model_bytes: usize, _rng: &mut SimRng) -> Result<FederationOutcome> {
        let models: Vec<&ModelParams> = round.uploads.values().map(|u| &u.params).collect();
        let omega = fed_average(&models)?;
        Ok(FederationOutcome {
            updates: round.uploads.keys().map(|&b| (b, omega.clone())).collect(),
            overhead: overhead(self, round, model_bytes),
            representatives: Vec::new(),
        })
    }
}

/// Reward-weighted model per cluster, sent back to that cluster only.
pub struct FullCluster {
    pub mode: FullClusterMode,
}

impl FederationStrategy for FullCluster {
    fn name(&self) -> &str {
        match self.mode {
            FullClusterMode::Normalized => "full-cluster",
            FullClusterMode::Literal => "full-cluster-literal",
        }
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::FullCluster
    }

    fn federate(&self, round: &FederationRound, model_bytes: usize, _rng: &mut SimRng) -> Result<FederationOutcome> {
        let per_cluster = fed_full_cluster(round, self.mode)?;
        let mut updates = BTreeMap::new();
        for (k, omega) in per_cluster {
            for b in round.clusters.members(k) {
                updates.insert(b, omega.clone());
            }
        }
        Ok(FederationOutcome { updates, overhead: overhead(self, round, model_bytes), representatives: Vec::new() })
    }
}

fn representative_round(
    s: &dyn FederationStrategy,
    mode: RepresentativeMode,
    round: &FederationRound,
    model_bytes: usize,
    rng: &mut SimRng,
) -> Result<FederationOutcome> {
    let out = fed_representative(round, mode, rng)?;
    Ok(FederationOutcome {
        updates: round.uploads.keys().map(|&b| (b, out.model.clone())).collect(),
        overhead: overhead(s, round, model_bytes),
        representatives: out.representatives,
    })
}

/// One uniformly drawn delegate per cluster.
pub struct RandomRepresentative;

impl FederationStrategy for RandomRepresentative {
    fn name(&self) -> &str {
        "random-rep"
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::Representative
    }

    fn federate(&self, round: &FederationRound, model_bytes: usize, rng: &mut SimRng) -> Result<FederationOutcome> {
        representative_round(self, RepresentativeMode::Random, round, model_bytes, rng)
    }
}

/// The highest-reward delegate per cluster, lowest id on ties.
pub struct BestRepresentative;

impl FederationStrategy for BestRepresentative {
    fn name(&self) -> &str {
        "best-rep"
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::Representative
    }

    fn federate(&self, round: &FederationRound, model_bytes: usize, rng: &mut SimRng) -> Result<FederationOutcome> {
        representative_round(self, RepresentativeMode::Best, round, model_bytes, rng)
    }
}

/// Agents learn in isolation.
pub struct NoFederation;

impl FederationStrategy for NoFederation {
    fn name(&self) -> &str {
        "none"
    }

    fn kind(&self) -> StrategyKind {
        StrategyKind::NoFederation
    }

    fn federate(&self, round: &FederationRound, model_bytes: usize, _rng: &mut SimRng) -> Result<FederationOutcome> {
        Ok(FederationOutcome {
            updates: BTreeMap::new(),
            overhead: overhead(self, round, model_bytes),
            representatives: Vec::new(),
        })
    }
}

/// Strategies by name, in registration order.
#[derive(Clone, Default)]
pub struct StrategyRegistry {
    entries: Vec<Arc<dyn FederationStrategy>>,
}

impl StrategyRegistry {
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(Fdrl));
        r.register(Arc::new(FullCluster { mode: FullClusterMode::Normalized }));
        r.register(Arc::new(FullCluster { mode: FullClusterMode::Literal }));
        r.register(Arc::new(RandomRepresentative));
        r.register(Arc::new(BestRepresentative));
        r.register(Arc::new(NoFederation));
        r
    }

    /// Adds a strategy, replacing any registered under the same name.
    pub fn register(&mut self, strategy: Arc<dyn FederationStrategy>) {
        self.entries.retain(|s| s.name() != strategy.name());
        self.entries.push(strategy);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn FederationStrategy>> {
        self.entries
            .iter()
            .find(|s| s.name() == name)
            .cloned()
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|s| s.name() == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|s| s.name()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::ClusterAssignment;
    use crate::federation::Upload;
    use crate::neural::init_params;
    use crate::rng::substream;

    fn round(n: usize, clusters: ClusterAssignment) -> FederationRound {
        FederationRound {
            slice_id: 1,
            episode_index: 9,
            uploads: (0..n)
                .map(|b| (b, Upload { params: init_params(&[3, 5, 4], &mut substream(b as u64, "u")), reward: b as f64 }))
                .collect(),
            clusters,
        }
    }

    #[test]
    fn registry_lookup() {
        let reg = StrategyRegistry::builtin();
        assert_eq!(reg.names(), vec!["fdrl", "full-cluster", "full-cluster-literal", "random-rep", "best-rep", "none"]);
        assert_eq!(reg.get("best-rep").unwrap().kind(), StrategyKind::Representative);
        assert!(matches!(reg.get("gossip"), Err(Error::UnknownStrategy(_))));
    }

    #[test]
    fn register_replaces_by_name() {
        let mut reg = StrategyRegistry::builtin();
        let before = reg.names().len();
        reg.register(Arc::new(Fdrl));
        assert_eq!(reg.names().len(), before);
        assert_eq!(reg.names().last(), Some(&"fdrl"));
    }

    #[test]
    fn none_leaves_models_alone() {
        let r = round(4, ClusterAssignment::all_noise(4));
        let out = NoFederation.federate(&r, 100, &mut substream(0, "f")).unwrap();
        assert!(out.updates.is_empty());
        assert_eq!((out.overhead.uplink_bytes, out.overhead.downlink_bytes), (0, 0));
    }

    #[test]
    fn fdrl_identical_models_round_trip() {
        let mut r = round(3, ClusterAssignment::all_noise(3));
        let theta = r.uploads[&0].params.clone();
        r.uploads.values_mut().for_each(|u| u.params = theta.clone());
        let out = Fdrl.federate(&r, 10, &mut substream(0, "f")).unwrap();
        assert_eq!(out.updates.len(), 3);
        assert!(out.updates.values().all(|m| *m == theta));
        assert_eq!(out.overhead.uplink_bytes, 30);
        assert_eq!(out.overhead.episode_index, 9);
        assert_eq!(out.overhead.strategy, "fdrl");
    }

    #[test]
    fn full_cluster_two_clusters_two_models() {
        let r = round(6, ClusterAssignment::from_groups(6, &[vec![0, 1], vec![3, 4, 5]]));
        let out = FullCluster { mode: FullClusterMode::Normalized }.federate(&r, 1, &mut substream(0, "f")).unwrap();
        assert_eq!(out.updates.keys().copied().collect::<Vec<_>>(), vec![0, 1, 3, 4, 5]);
        let mut distinct: Vec<&ModelParams> = Vec::new();
        for m in out.updates.values() {
            if !distinct.contains(&m) {
                distinct.push(m);
            }
        }
        assert_eq!(distinct.len(), 2);
        assert_eq!(out.overhead.uplink_models, 5);
    }

    #[test]
    fn representatives_downlink_everywhere() {
        let r = round(5, ClusterAssignment::from_groups(5, &[vec![0, 1], vec![2, 3]]));
        let out = BestRepresentative.federate(&r, 1, &mut substream(0, "f")).unwrap();
        assert_eq!(out.representatives, vec![1, 3]);
        assert_eq!(out.updates.len(), 5);
        assert_eq!((out.overhead.uplink_models, out.overhead.downlink_models), (2, 5));
    }
}
