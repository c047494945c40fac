//! Weighted value-targeted regression (UCRL-WVTR) with high-order moment
//! estimation, its baselines, and the tooling to evaluate them on RiverSwim.

pub mod agent;
pub mod env;
pub mod error;
pub mod harness;
pub mod model;
pub mod statcheck;
pub mod uncertainty;

pub use agent::{Agent, AgentConfig, BaselineKind, BonusSchedule, ErrorWidth, UcrlWvtr, UncertaintyBackend};
pub use env::{make_riverswim, optimal_values, policy_value, EpisodicMdp, Policy, RewardMode, ValueTable};
pub use error::{Error, Result};
pub use harness::{emit_csv, run_experiment, ExperimentConfig, ExperimentResult, RegretTrace};
pub use model::{FeatureMap, LinearMixtureModel, ValueVector};
