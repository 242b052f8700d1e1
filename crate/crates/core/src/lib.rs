//! Multi-agent DQN power control and frequency selection for a simulated
//! DS-CDMA network, with federated model averaging across agents and
//! checkpoint averaging across network layouts.

pub mod aggregation;
pub mod cli;
pub mod dqn;
pub mod mdp;
pub mod metrics;
pub mod net_model;
pub mod presets;
pub mod seeding;
pub mod training;
