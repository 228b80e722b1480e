//! Multi-agent driving: a deterministic lane-graph simulator, MADDPG with
//! event-prioritized replay, MAPPO, evaluation metrics and explainability
//! traces.

pub mod cli;
pub mod explain;
pub mod maddpg;
pub mod mappo;
pub mod metrics;
pub mod nn;
pub mod replay;
pub mod sim;
pub mod train;
