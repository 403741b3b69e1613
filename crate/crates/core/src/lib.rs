//! Federated deep-reinforcement-learning RAN slicing simulator.
//!
//! Per-slice DDQN agents allocate PRB chunks at every base station; a
//! federation layer groups agents by demand similarity (DTW + DBSCAN) and
//! aggregates their Q-networks with a selectable strategy.

pub mod agent;
pub mod clustering;
pub mod domain;
pub mod env;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod mobility;
pub mod neural;
pub mod orchestrator;
pub mod rng;

pub use domain::{validate_config, ScenarioConfig};
pub use error::{Error, Result};
pub use federation::{FederationStrategy, StrategyRegistry};
pub use metrics::SimulationMetrics;
pub use orchestrator::{run_simulation, run_simulation_with, World};
