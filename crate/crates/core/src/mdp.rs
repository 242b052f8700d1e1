//! Per-agent observations, the joint action space, rewards and the one-slot
//! environment transition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net_model::{
    self, dbm_to_watts, distances_to_receivers, path_gain, NetworkScenario, PairPositions,
    ScenarioError, Transmission,
};

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("action ({power_index}, {frequency_index}) outside {n_p}x{n_f} action space")]
    ActionOutOfRange {
        power_index: usize,
        frequency_index: usize,
        n_p: usize,
        n_f: usize,
    },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

/// Fixed-length observation: `K` distances, buffer, caused and sensed interference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    features: Vec<f64>,
}

/// Value of `interference_sensed` when the previous transmission was not acknowledged.
pub const NO_ACK: f64 = -1.0;
/// Normalized distance used for padding when fewer than `K` neighbours exist.
pub const DISTANCE_SENTINEL: f64 = 1.0;

impl AgentState {
    pub fn new(
        distances: Vec<f64>,
        buffer_occupancy: f64,
        interference_caused: f64,
        interference_sensed: f64,
    ) -> Self {
        let mut features = distances;
        features.extend([buffer_occupancy, interference_caused, interference_sensed]);
        Self { features }
    }

    pub fn from_features(features: Vec<f64>) -> Self {
        assert!(
            features.len() >= 4,
            "state needs at least one distance slot"
        );
        Self { features }
    }

    pub fn k(&self) -> usize {
        self.features.len() - 3
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn distances(&self) -> &[f64] {
        &self.features[..self.k()]
    }

    pub fn buffer_occupancy(&self) -> f64 {
        self.features[self.k()]
    }

    pub fn interference_caused(&self) -> f64 {
        self.features[self.k() + 1]
    }

    pub fn interference_sensed(&self) -> f64 {
        self.features[self.k() + 2]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.features
    }
}

/// A (power, frequency) choice. `flat_index = power_index * n_f + frequency_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadioAction {
    pub power_index: usize,
    pub frequency_index: usize,
    pub flat_index: usize,
}

impl RadioAction {
    pub fn new(power_index: usize, frequency_index: usize, n_f: usize) -> Self {
        Self {
            power_index,
            frequency_index,
            flat_index: power_index * n_f + frequency_index,
        }
    }

    pub fn from_flat(flat_index: usize, n_f: usize) -> Self {
        Self {
            power_index: flat_index / n_f,
            frequency_index: flat_index % n_f,
            flat_index,
        }
    }
}

/// All actions in flat-index order.
pub fn action_catalog(n_p: usize, n_f: usize) -> Vec<(usize, usize)> {
    (0..n_p)
        .flat_map(|p| (0..n_f).map(move |f| (p, f)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConstants {
    /// Power cost per power level, aligned with `power_levels_dbm`.
    pub c1_per_power: Vec<f64>,
    pub c2_assigned: f64,
    pub c2_other: f64,
    pub c3_failure: f64,
}

impl Default for RewardConstants {
    fn default() -> Self {
        Self {
            c1_per_power: vec![-0.05, -5.0, -10.0],
            c2_assigned: -0.05,
            c2_other: -2.0,
            c3_failure: -10.0,
        }
    }
}

impl RewardConstants {
    pub fn validate(&self, n_p: usize) -> Result<(), MdpError> {
        if self.c1_per_power.len() != n_p {
            return Err(MdpError::Config(format!(
                "c1_per_power has {} entries for {n_p} power levels",
                self.c1_per_power.len()
            )));
        }
        let all =
            self.c1_per_power
                .iter()
                .chain([&self.c2_assigned, &self.c2_other, &self.c3_failure]);
        if all.clone().any(|v| !v.is_finite() || *v > 0.0) {
            return Err(MdpError::Config(
                "reward constants must be finite and <= 0".into(),
            ));
        }
        if self.c2_other >= self.c2_assigned {
            return Err(MdpError::Config(
                "c2_other must be below c2_assigned".into(),
            ));
        }
        Ok(())
    }
}

/// Reward of one transmission outcome.
pub fn reward(
    success: bool,
    power_index: usize,
    frequency_index: usize,
    assigned_frequency: usize,
    rc: &RewardConstants,
) -> f64 {
    if !success {
        return rc.c3_failure;
    }
    let c2 = if frequency_index == assigned_frequency {
        rc.c2_assigned
    } else {
        rc.c2_other
    };
    rc.c1_per_power[power_index] + c2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferModel {
    pub capacity: u32,
    pub arrivals_per_slot: u32,
    pub occupancy: u32,
}

impl BufferModel {
    /// `clamp(occupancy + arrivals - successes, 0, capacity)`.
    pub fn advance(&mut self, success: bool) {
        let next = self.occupancy as i64 + self.arrivals_per_slot as i64 - success as i64;
        self.occupancy = next.clamp(0, self.capacity as i64) as u32;
    }

    pub fn normalized(&self) -> f64 {
        self.occupancy as f64 / self.capacity as f64
    }
}

/// Environment settings that are not part of the network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of distance slots in the observation.
    pub k_neighbors: usize,
    pub rewards: RewardConstants,
    pub buffer_capacity: u32,
    pub arrivals_per_slot: u32,
    pub initial_occupancy: u32,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 8,
            rewards: RewardConstants::default(),
            buffer_capacity: 10,
            arrivals_per_slot: 1,
            initial_occupancy: 1,
        }
    }
}

impl EnvConfig {
    pub fn state_dim(&self) -> usize {
        self.k_neighbors + 3
    }

    pub fn validate(&self, scenario: &NetworkScenario) -> Result<(), MdpError> {
        if self.k_neighbors == 0 {
            return Err(MdpError::Config("k_neighbors must be >= 1".into()));
        }
        if self.buffer_capacity == 0 || self.initial_occupancy > self.buffer_capacity {
            return Err(MdpError::Config(
                "buffer capacity must be >= 1 and hold the initial occupancy".into(),
            ));
        }
        self.rewards.validate(scenario.n_p())
    }
}

/// Feature scaling constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateNormalization {
    /// Meters mapped to 1.0 (the area diagonal).
    pub distance_scale: f64,
    /// Watts mapped to 1.0: every other pair at max power at the reference distance.
    pub power_scale: f64,
}

impl StateNormalization {
    pub fn for_scenario(scenario: &NetworkScenario) -> Self {
        let others = scenario.n_pairs().saturating_sub(1).max(1) as f64;
        Self {
            distance_scale: scenario.area_diagonal(),
            power_scale: others * scenario.max_power_watts(),
        }
    }

    fn power(&self, watts: f64) -> f64 {
        (watts / self.power_scale).clamp(0.0, 1.0)
    }
}

/// What a pair learned about its previous slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotFeedback {
    /// `None` before the first slot and after an idle one.
    pub success: Option<bool>,
    pub interference_caused: f64,
    pub interference_sensed: f64,
}

impl Default for SlotFeedback {
    fn default() -> Self {
        Self {
            success: None,
            interference_caused: 0.0,
            interference_sensed: 0.0,
        }
    }
}

pub fn build_state(
    pair_id: usize,
    positions: &[PairPositions],
    feedback: &[SlotFeedback],
    buffers: &[BufferModel],
    k: usize,
    norm: &StateNormalization,
) -> AgentState {
    let mut distances: Vec<f64> = distances_to_receivers(pair_id, positions)
        .into_iter()
        .take(k)
        .map(|d| (d / norm.distance_scale).min(DISTANCE_SENTINEL))
        .collect();
    distances.resize(k, DISTANCE_SENTINEL);
    let fb = &feedback[pair_id];
    let sensed = match fb.success {
        Some(false) => NO_ACK,
        _ => fb.interference_sensed,
    };
    AgentState::new(
        distances,
        buffers[pair_id].normalized(),
        fb.interference_caused,
        sensed,
    )
}

/// Outcome of one slot for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStep {
    pub next_state: AgentState,
    pub reward: f64,
    pub success: bool,
    pub transmitted: bool,
    /// `-inf` when the pair had nothing to send.
    pub sinr_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStepResult {
    pub pairs: Vec<PairStep>,
}

/// Multi-agent environment over one scenario.
#[derive(Debug, Clone)]
pub struct Environment {
    scenario: NetworkScenario,
    config: EnvConfig,
    norm: StateNormalization,
    positions: Vec<PairPositions>,
    buffers: Vec<BufferModel>,
    feedback: Vec<SlotFeedback>,
    rng: ChaCha8Rng,
    slot: u64,
}

impl Environment {
    pub fn new(scenario: NetworkScenario, config: EnvConfig, seed: u64) -> Result<Self, MdpError> {
        scenario.validate()?;
        config.validate(&scenario)?;
        let n = scenario.n_pairs();
        let buffer = BufferModel {
            capacity: config.buffer_capacity,
            arrivals_per_slot: config.arrivals_per_slot,
            occupancy: config.initial_occupancy,
        };
        Ok(Self {
            norm: StateNormalization::for_scenario(&scenario),
            positions: scenario.initial_positions(),
            buffers: vec![buffer; n],
            feedback: vec![SlotFeedback::default(); n],
            rng: ChaCha8Rng::seed_from_u64(seed),
            slot: 0,
            scenario,
            config,
        })
    }

    pub fn scenario(&self) -> &NetworkScenario {
        &self.scenario
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn n_pairs(&self) -> usize {
        self.scenario.n_pairs()
    }

    pub fn positions(&self) -> &[PairPositions] {
        &self.positions
    }

    pub fn buffers(&self) -> &[BufferModel] {
        &self.buffers
    }

    pub fn feedback(&self) -> &[SlotFeedback] {
        &self.feedback
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn observe(&self, pair_id: usize) -> AgentState {
        build_state(
            pair_id,
            &self.positions,
            &self.feedback,
            &self.buffers,
            self.config.k_neighbors,
            &self.norm,
        )
    }

    pub fn observe_all(&self) -> Vec<AgentState> {
        (0..self.n_pairs()).map(|i| self.observe(i)).collect()
    }

    /// Runs one slot with every pair acting simultaneously.
    pub fn step(&mut self, actions: &[RadioAction]) -> Result<EnvStepResult, MdpError> {
        let n = self.n_pairs();
        if actions.len() != n {
            return Err(MdpError::ActionCount {
                expected: n,
                got: actions.len(),
            });
        }
        let (n_p, n_f) = (self.scenario.n_p(), self.scenario.n_f);
        for a in actions {
            if a.power_index >= n_p
                || a.frequency_index >= n_f
                || a.flat_index != a.power_index * n_f + a.frequency_index
            {
                return Err(MdpError::ActionOutOfRange {
                    power_index: a.power_index,
                    frequency_index: a.frequency_index,
                    n_p,
                    n_f,
                });
            }
        }

        let tx: Vec<Transmission> = actions
            .iter()
            .zip(&self.buffers)
            .map(|(a, b)| Transmission {
                power_index: a.power_index,
                frequency_index: a.frequency_index,
                transmitting: b.occupancy > 0,
            })
            .collect();

        let mut sinr = vec![f64::NEG_INFINITY; n];
        let mut success = vec![false; n];
        for i in 0..n {
            if tx[i].transmitting {
                sinr[i] = net_model::compute_sinr(&self.scenario, &self.positions, &tx, i)?;
                success[i] = net_model::transmission_success(sinr[i], &self.scenario.channel);
            }
        }

        let ch = &self.scenario.channel;
        for i in 0..n {
            let (caused, sensed) = if tx[i].transmitting {
                let p_i = dbm_to_watts(self.scenario.power_levels_dbm[tx[i].power_index]);
                let mut caused = 0.0;
                let mut sensed = 0.0;
                for j in (0..n).filter(|&j| j != i) {
                    if !tx[j].transmitting || tx[j].frequency_index != tx[i].frequency_index {
                        continue;
                    }
                    caused += path_gain(&self.positions[i].tx, &self.positions[j].rx, ch) * p_i;
                    let p_j = dbm_to_watts(self.scenario.power_levels_dbm[tx[j].power_index]);
                    sensed += path_gain(&self.positions[j].tx, &self.positions[i].rx, ch) * p_j;
                }
                (self.norm.power(caused), self.norm.power(sensed))
            } else {
                (0.0, 0.0)
            };
            self.feedback[i] = SlotFeedback {
                success: tx[i].transmitting.then_some(success[i]),
                interference_caused: caused,
                interference_sensed: sensed,
            };
            self.buffers[i].advance(success[i]);
        }

        self.positions = net_model::step_mobility(
            &self.positions,
            &self.scenario.mobility,
            self.scenario.area_w,
            self.scenario.area_h,
            &mut self.rng,
        );
        self.slot += 1;

        let pairs = (0..n)
            .map(|i| {
                let r = if tx[i].transmitting {
                    reward(
                        success[i],
                        actions[i].power_index,
                        actions[i].frequency_index,
                        self.scenario.pairs[i].assigned_frequency,
                        &self.config.rewards,
                    )
                } else {
                    0.0
                };
                PairStep {
                    next_state: self.observe(i),
                    reward: r,
                    success: success[i],
                    transmitted: tx[i].transmitting,
                    sinr_db: sinr[i],
                }
            })
            .collect();
        Ok(EnvStepResult { pairs })
    }
}
