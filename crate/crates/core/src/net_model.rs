//! Network geometry, radio channel, interference and mobility.
//!
//! The channel is a log-distance path-loss model. Co-channel interference is
//! divided by a scalar processing gain that stands in for DS-CDMA spreading,
//! so the SINR of pair `i` is
//!
//! ```text
//! SINR_i = g_ii p_i / (noise + (1 / L) * sum_{j != i, f_j == f_i, j active} g_ji p_j)
//! ```
//!
//! where `g_ji` is the gain from transmitter `j` to receiver `i`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current JSON schema version for [`NetworkScenario`].
pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("unsupported scenario schema_version {0}, expected {SCENARIO_SCHEMA_VERSION}")]
    SchemaVersion(u32),
    #[error("scenario has no pairs")]
    NoPairs,
    #[error("scenario must offer at least one frequency")]
    NoFrequencies,
    #[error("power levels must be non-empty and strictly increasing")]
    PowerLevels,
    #[error("area must have positive finite width and height")]
    Area,
    #[error("duplicate pair_id {0}")]
    DuplicatePairId(usize),
    #[error("pair {pair_id}: assigned_frequency {freq} out of range (n_f = {n_f})")]
    AssignedFrequency {
        pair_id: usize,
        freq: usize,
        n_f: usize,
    },
    #[error("pair {0}: transmitter and receiver coincide")]
    CoincidentPair(usize),
    #[error("pair {0}: position outside the area or not finite")]
    PositionOutOfArea(usize),
    #[error("invalid channel parameters: {0}")]
    Channel(&'static str),
    #[error("mobility step_size must be finite and non-negative")]
    Mobility,
    #[error("pair index {index} out of range for {n_pairs} pairs")]
    PairOutOfRange { index: usize, n_pairs: usize },
    #[error("expected {expected} per-pair entries, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("invalid scenario JSON: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxRxPair {
    pub pair_id: usize,
    pub tx_pos: Position,
    pub rx_pos: Position,
    /// Preferred channel for this pair; deviating costs the larger frequency penalty.
    pub assigned_frequency: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelParams {
    pub path_loss_exponent: f64,
    /// Meters. Distances below this are clamped, so gain never exceeds 1.
    pub reference_distance: f64,
    /// Receiver noise power in watts.
    pub noise_power: f64,
    /// Interference suppression factor of the spreading code.
    pub processing_gain: f64,
    /// Success threshold in dB (inclusive).
    pub sinr_threshold: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            path_loss_exponent: 3.0,
            reference_distance: 1.0,
            noise_power: 1e-10,
            processing_gain: 64.0,
            sinr_threshold: 3.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if !(self.path_loss_exponent.is_finite() && self.path_loss_exponent >= 2.0) {
            return Err(ScenarioError::Channel("path_loss_exponent must be >= 2"));
        }
        if !(self.reference_distance.is_finite() && self.reference_distance > 0.0) {
            return Err(ScenarioError::Channel("reference_distance must be > 0"));
        }
        if !(self.noise_power.is_finite() && self.noise_power > 0.0) {
            return Err(ScenarioError::Channel("noise_power must be > 0"));
        }
        if !(self.processing_gain.is_finite() && self.processing_gain >= 1.0) {
            return Err(ScenarioError::Channel("processing_gain must be >= 1"));
        }
        if !self.sinr_threshold.is_finite() {
            return Err(ScenarioError::Channel("sinr_threshold must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityParams {
    /// Maximum per-coordinate displacement per slot, meters.
    pub step_size: f64,
    pub enabled: bool,
}

impl Default for MobilityParams {
    fn default() -> Self {
        Self {
            step_size: 0.0,
            enabled: false,
        }
    }
}

/// Full description of one training or evaluation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkScenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub pairs: Vec<TxRxPair>,
    pub area_w: f64,
    pub area_h: f64,
    pub channel: ChannelParams,
    pub mobility: MobilityParams,
    pub power_levels_dbm: Vec<f64>,
    pub n_f: usize,
    pub seed: u64,
}

impl NetworkScenario {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn n_p(&self) -> usize {
        self.power_levels_dbm.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_p() * self.n_f
    }

    pub fn area_diagonal(&self) -> f64 {
        self.area_w.hypot(self.area_h)
    }

    pub fn max_power_watts(&self) -> f64 {
        self.power_levels_dbm
            .last()
            .map(|&dbm| dbm_to_watts(dbm))
            .unwrap_or(0.0)
    }

    /// Initial node positions, in pair order.
    pub fn initial_positions(&self) -> Vec<PairPositions> {
        self.pairs
            .iter()
            .map(|p| PairPositions {
                tx: p.tx_pos,
                rx: p.rx_pos,
            })
            .collect()
    }

    pub fn contains(&self, p: &Position) -> bool {
        p.x.is_finite()
            && p.y.is_finite()
            && (0.0..=self.area_w).contains(&p.x)
            && (0.0..=self.area_h).contains(&p.y)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(ScenarioError::SchemaVersion(self.schema_version));
        }
        if self.pairs.is_empty() {
            return Err(ScenarioError::NoPairs);
        }
        if self.n_f == 0 {
            return Err(ScenarioError::NoFrequencies);
        }
        if self.power_levels_dbm.is_empty()
            || self.power_levels_dbm.iter().any(|p| !p.is_finite())
            || self.power_levels_dbm.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(ScenarioError::PowerLevels);
        }
        if !(self.area_w.is_finite()
            && self.area_w > 0.0
            && self.area_h.is_finite()
            && self.area_h > 0.0)
        {
            return Err(ScenarioError::Area);
        }
        self.channel.validate()?;
        if !(self.mobility.step_size.is_finite() && self.mobility.step_size >= 0.0) {
            return Err(ScenarioError::Mobility);
        }
        let mut seen = std::collections::BTreeSet::new();
        for pair in &self.pairs {
            if !seen.insert(pair.pair_id) {
                return Err(ScenarioError::DuplicatePairId(pair.pair_id));
            }
            if pair.assigned_frequency >= self.n_f {
                return Err(ScenarioError::AssignedFrequency {
                    pair_id: pair.pair_id,
                    freq: pair.assigned_frequency,
                    n_f: self.n_f,
                });
            }
            if !self.contains(&pair.tx_pos) || !self.contains(&pair.rx_pos) {
                return Err(ScenarioError::PositionOutOfArea(pair.pair_id));
            }
            if pair.tx_pos == pair.rx_pos {
                return Err(ScenarioError::CoincidentPair(pair.pair_id));
            }
        }
        Ok(())
    }

    /// Parses and validates a scenario document.
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let scenario: NetworkScenario =
            serde_json::from_str(text).map_err(|e| ScenarioError::Json(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Current transmitter and receiver location of one pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairPositions {
    pub tx: Position,
    pub rx: Position,
}

/// What one pair does in a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub power_index: usize,
    pub frequency_index: usize,
    pub transmitting: bool,
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Linear path gain between two points, in (0, 1].
pub fn path_gain(a: &Position, b: &Position, ch: &ChannelParams) -> f64 {
    let d = a.distance(b).max(ch.reference_distance);
    (ch.reference_distance / d).powf(ch.path_loss_exponent)
}

/// Received interference power (before processing gain) at `pair_id`'s receiver.
fn co_channel_interference(
    scenario: &NetworkScenario,
    positions: &[PairPositions],
    actions: &[Transmission],
    pair_id: usize,
) -> f64 {
    let own = &actions[pair_id];
    let rx = &positions[pair_id].rx;
    let mut total = 0.0;
    for (j, act) in actions.iter().enumerate() {
        if j == pair_id || !act.transmitting || act.frequency_index != own.frequency_index {
            continue;
        }
        let p = dbm_to_watts(scenario.power_levels_dbm[act.power_index]);
        total += path_gain(&positions[j].tx, rx, &scenario.channel) * p;
    }
    total
}

fn check_inputs(
    scenario: &NetworkScenario,
    positions: &[PairPositions],
    actions: &[Transmission],
    pair_id: usize,
) -> Result<(), ScenarioError> {
    let n = scenario.n_pairs();
    if pair_id >= n {
        return Err(ScenarioError::PairOutOfRange {
            index: pair_id,
            n_pairs: n,
        });
    }
    if actions.len() != n {
        return Err(ScenarioError::ActionCount {
            expected: n,
            got: actions.len(),
        });
    }
    if positions.len() != n {
        return Err(ScenarioError::ActionCount {
            expected: n,
            got: positions.len(),
        });
    }
    Ok(())
}

/// Interference-plus-noise power (watts) seen by `pair_id`'s receiver after despreading.
pub fn interference_plus_noise(
    scenario: &NetworkScenario,
    positions: &[PairPositions],
    actions: &[Transmission],
    pair_id: usize,
) -> Result<f64, ScenarioError> {
    check_inputs(scenario, positions, actions, pair_id)?;
    let ch = &scenario.channel;
    Ok(ch.noise_power
        + co_channel_interference(scenario, positions, actions, pair_id) / ch.processing_gain)
}

/// SINR in dB of `pair_id` given every pair's transmission in the slot.
///
/// The pair's own transmitting flag is ignored: the value is the SINR the
/// pair would see at its chosen power.
pub fn compute_sinr(
    scenario: &NetworkScenario,
    positions: &[PairPositions],
    actions: &[Transmission],
    pair_id: usize,
) -> Result<f64, ScenarioError> {
    let denom = interference_plus_noise(scenario, positions, actions, pair_id)?;
    let own = &actions[pair_id];
    let pos = &positions[pair_id];
    let signal = path_gain(&pos.tx, &pos.rx, &scenario.channel)
        * dbm_to_watts(scenario.power_levels_dbm[own.power_index]);
    Ok(linear_to_db(signal / denom))
}

pub fn transmission_success(sinr_db: f64, ch: &ChannelParams) -> bool {
    sinr_db >= ch.sinr_threshold
}

/// One random-walk slot: every coordinate moves by an independent uniform
/// draw in `[-step_size, step_size]` and is clamped to the area.
pub fn step_mobility<R: Rng + ?Sized>(
    positions: &[PairPositions],
    mobility: &MobilityParams,
    area_w: f64,
    area_h: f64,
    rng: &mut R,
) -> Vec<PairPositions> {
    if !mobility.enabled || mobility.step_size == 0.0 {
        return positions.to_vec();
    }
    let s = mobility.step_size;
    let mut walk = |p: &Position| {
        let dx = rng.gen_range(-s..=s);
        let dy = rng.gen_range(-s..=s);
        Position::new((p.x + dx).clamp(0.0, area_w), (p.y + dy).clamp(0.0, area_h))
    };
    positions
        .iter()
        .map(|pp| {
            let tx = walk(&pp.tx);
            let rx = walk(&pp.rx);
            PairPositions { tx, rx }
        })
        .collect()
}

/// Distances from `pair_id`'s transmitter to every other pair's receiver, ascending.
pub fn distances_to_receivers(pair_id: usize, positions: &[PairPositions]) -> Vec<f64> {
    let tx = positions[pair_id].tx;
    let mut out: Vec<f64> = positions
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != pair_id)
        .map(|(_, pp)| tx.distance(&pp.rx))
        .collect();
    out.sort_by(f64::total_cmp);
    out
}
