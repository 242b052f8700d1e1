//! Multi-agent training with periodic model aggregation, the multi-network
//! generalized protocol, the independent baseline and frozen evaluation.

use log::info;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{self, AggregationError, CheckpointStore, ModelCheckpoint};
use crate::dqn::{self, DqnAgent, DqnError, EpsilonSchedule, Experience, Hyperparams, QNetwork};
use crate::mdp::{AgentState, EnvConfig, Environment, MdpError, RadioAction};
use crate::metrics::{RunMetrics, StepRecord};
use crate::net_model::NetworkScenario;
use crate::seeding::{self, RngState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] MdpError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error("invalid training config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hyper: Hyperparams,
    pub env: EnvConfig,
    /// Slots of a single-network run.
    pub total_steps: u64,
    pub aggregation: bool,
    pub individual_steps: u64,
    pub finetune_steps_per_network: u64,
    pub finetune_loops: u64,
    /// Exploration used at the start of every fine-tuning segment.
    pub finetune_epsilon: EpsilonSchedule,
    pub eval_steps: u64,
    pub success_window: usize,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hyper: Hyperparams::default(),
            env: EnvConfig::default(),
            total_steps: 5000,
            aggregation: true,
            individual_steps: 8000,
            finetune_steps_per_network: 1000,
            finetune_loops: 6,
            finetune_epsilon: EpsilonSchedule {
                start: 0.2,
                end: 0.05,
                decay_steps: 200,
            },
            eval_steps: 2000,
            success_window: 100,
            seeds: vec![1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let steps = [
            self.total_steps,
            self.individual_steps,
            self.finetune_steps_per_network,
            self.finetune_loops,
            self.eval_steps,
        ];
        if steps.contains(&0) || self.success_window == 0 {
            return Err(TrainError::Config(
                "step counts and the success window must be >= 1".into(),
            ));
        }
        let e = &self.finetune_epsilon;
        if !((0.0..=1.0).contains(&e.start) && (0.0..=1.0).contains(&e.end)) {
            return Err(TrainError::Config(
                "finetune epsilon must stay within [0, 1]".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn layer_dims(&self, scenario: &NetworkScenario) -> [usize; 4] {
        self.hyper
            .layer_dims(self.env.state_dim(), scenario.n_actions())
    }
}

pub fn epsilon_at(step: u64, schedule: &EpsilonSchedule) -> f64 {
    schedule.at(step)
}

/// Seed of a single-network run: the run seed mixed with the scenario's own seed.
pub fn run_seed(seed: u64, scenario: &NetworkScenario) -> u64 {
    seeding::derive_seed(seed, "run", scenario.seed)
}

/// Glorot-initialized network for `scenario` under `config`.
pub fn fresh_model(scenario: &NetworkScenario, config: &TrainConfig, seed: u64) -> QNetwork {
    QNetwork::glorot(
        config.layer_dims(scenario),
        &mut seeding::stream(seed, "init", 0),
    )
}

/// One pass of a multi-agent training segment.
#[derive(Debug, Clone)]
pub struct SegmentSpec {
    pub steps: u64,
    pub epsilon: EpsilonSchedule,
    pub aggregate: bool,
    /// Global step number of the segment's first slot.
    pub step_offset: u64,
}

/// Step-by-step driver for multi-agent learning on one scenario.
pub struct MultiAgentTrainer {
    env: Environment,
    agents: Vec<DqnAgent>,
    hyper: Hyperparams,
    spec: SegmentSpec,
    explore_rngs: Vec<ChaCha8Rng>,
    sample_rngs: Vec<ChaCha8Rng>,
    states: Vec<AgentState>,
    step: u64,
    metrics: RunMetrics,
}

impl MultiAgentTrainer {
    /// Every agent starts from `init`; all randomness derives from `seed`.
    pub fn new(
        scenario: &NetworkScenario,
        config: &TrainConfig,
        init: &QNetwork,
        spec: SegmentSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let expected = config.layer_dims(scenario);
        if init.layer_dims() != expected {
            return Err(DqnError::Architecture {
                left: init.layer_dims(),
                right: expected,
            }
            .into());
        }
        let env = Environment::new(
            scenario.clone(),
            config.env.clone(),
            seeding::derive_seed(seed, "env", 0),
        )?;
        let n = env.n_pairs();
        let agents = (0..n)
            .map(|_| DqnAgent::new(init.clone(), config.hyper.replay_capacity))
            .collect();
        let states = env.observe_all();
        Ok(Self {
            explore_rngs: (0..n as u64)
                .map(|i| seeding::stream(seed, "explore", i))
                .collect(),
            sample_rngs: (0..n as u64)
                .map(|i| seeding::stream(seed, "replay", i))
                .collect(),
            env,
            agents,
            hyper: config.hyper.clone(),
            spec,
            states,
            step: 0,
            metrics: RunMetrics::default(),
        })
    }

    pub fn agents(&self) -> &[DqnAgent] {
        &self.agents
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.spec.steps
    }

    pub fn metrics(&self) -> &RunMetrics {
        &self.metrics
    }

    /// Runs one slot. Returns `true` when an aggregation barrier ran.
    pub fn run_slot(&mut self) -> Result<bool> {
        let n_f = self.env.scenario().n_f;
        let epsilon = self.spec.epsilon.at(self.step);
        let mut actions = Vec::with_capacity(self.agents.len());
        for (i, agent) in self.agents.iter().enumerate() {
            let q = agent.online.forward(self.states[i].as_slice())?;
            let flat = dqn::select_action(&q, epsilon, &mut self.explore_rngs[i]);
            actions.push(RadioAction::from_flat(flat, n_f));
        }

        let result = self.env.step(&actions)?;
        let global_step = self.spec.step_offset + self.step;
        for (i, (outcome, action)) in result.pairs.into_iter().zip(&actions).enumerate() {
            self.metrics.records.push(StepRecord {
                step: global_step,
                agent: i,
                power_index: action.power_index,
                freq_index: action.frequency_index,
                reward: outcome.reward,
                success: outcome.success,
                sinr_db: outcome.sinr_db,
            });
            let state = std::mem::replace(&mut self.states[i], outcome.next_state.clone());
            self.agents[i].replay.push(Experience {
                state,
                action: action.flat_index,
                reward: outcome.reward,
                next_state: outcome.next_state,
            });
        }

        for (agent, rng) in self.agents.iter_mut().zip(&mut self.sample_rngs) {
            if agent.replay.len() < self.hyper.batch_size {
                continue;
            }
            let batch = agent.replay.sample(self.hyper.batch_size, rng)?;
            let loss = dqn::train_batch(&mut agent.online, &agent.target, &batch, &self.hyper)?;
            self.metrics.losses.push(loss);
        }

        self.step += 1;
        if self.step % self.hyper.target_sync_period == 0 {
            for agent in &mut self.agents {
                dqn::sync_target(&agent.online, &mut agent.target)?;
            }
        }
        if self.spec.aggregate && self.step % self.hyper.aggregation_period == 0 {
            let shared = aggregation::average_agents(&self.agents)?;
            aggregation::broadcast(&shared, &mut self.agents)?;
            self.metrics.aggregation_barriers += 1;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn run_to_end(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.run_slot()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        let agents: Vec<QNetwork> = self.agents.into_iter().map(|a| a.online).collect();
        let refs: Vec<&QNetwork> = agents.iter().collect();
        let model = aggregation::average_models(&refs)?;
        Ok(TrainOutcome {
            agents,
            model,
            metrics: self.metrics,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final online network of every agent, in pair order.
    pub agents: Vec<QNetwork>,
    /// Mean of the agents' networks.
    pub model: QNetwork,
    pub metrics: RunMetrics,
}

/// Trains every pair of `scenario` from `init` (or a fresh model) for
/// `config.total_steps` slots, aggregating when `config.aggregation` is set.
pub fn train_network(
    scenario: &NetworkScenario,
    config: &TrainConfig,
    init: Option<&QNetwork>,
    seed: u64,
) -> Result<TrainOutcome> {
    let seed = run_seed(seed, scenario);
    let fresh;
    let init = match init {
        Some(m) => m,
        None => {
            fresh = fresh_model(scenario, config, seed);
            &fresh
        }
    };
    let spec = SegmentSpec {
        steps: config.total_steps,
        epsilon: config.hyper.epsilon,
        aggregate: config.aggregation,
        step_offset: 0,
    };
    MultiAgentTrainer::new(scenario, config, init, spec, seed)?.run_to_end()
}

/// Baseline: every agent learns only from its own experience.
pub fn train_independent(
    scenario: &NetworkScenario,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        aggregation: false,
        ..config.clone()
    };
    train_network(scenario, &config, None, seed)
}

/// Every pair runs the same frozen model greedily; nothing is learned.
pub fn evaluate(
    model: &QNetwork,
    scenario: &NetworkScenario,
    env: &EnvConfig,
    eval_steps: u64,
    seed: u64,
) -> Result<RunMetrics> {
    let expected = [
        env.state_dim(),
        model.layer_dims()[1],
        model.layer_dims()[2],
        scenario.n_actions(),
    ];
    if model.layer_dims() != expected {
        return Err(DqnError::Architecture {
            left: model.layer_dims(),
            right: expected,
        }
        .into());
    }
    let mut environment = Environment::new(
        scenario.clone(),
        env.clone(),
        seeding::derive_seed(seed, "eval-env", scenario.seed),
    )?;
    let n_f = scenario.n_f;
    let mut states = environment.observe_all();
    let mut metrics = RunMetrics::default();
    for step in 0..eval_steps {
        let actions = states
            .iter()
            .map(|s| {
                Ok(RadioAction::from_flat(
                    dqn::argmax(&model.forward(s.as_slice())?),
                    n_f,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let result = environment.step(&actions)?;
        states.clear();
        for (i, (outcome, action)) in result.pairs.into_iter().zip(&actions).enumerate() {
            metrics.records.push(StepRecord {
                step,
                agent: i,
                power_index: action.power_index,
                freq_index: action.frequency_index,
                reward: outcome.reward,
                success: outcome.success,
                sinr_db: outcome.sinr_db,
            });
            states.push(outcome.next_state);
        }
    }
    Ok(metrics)
}

/// Where a generalized run stands; stored in checkpoint metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Stage {
    /// Individual training of scenario `index`.
    Individual { index: usize },
    /// Averaging of the individual checkpoints.
    Aggregate,
    /// Fine-tuning pass `loop_index` over scenario `index`.
    Finetune { loop_index: u64, index: usize },
}

/// Checkpoint progress marker: the stage just completed plus resume data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Progress {
    pub completed: Stage,
    /// Global step number of the next slot.
    pub next_step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub stage: Stage,
    pub scenario: String,
    pub start_step: u64,
    pub steps: u64,
    pub mean_success: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone)]
pub struct GeneralizedOutcome {
    pub model: QNetwork,
    pub metrics: RunMetrics,
    pub segments: Vec<SegmentSummary>,
}

fn stages(n_scenarios: usize, loops: u64) -> Vec<Stage> {
    let mut out: Vec<Stage> = (0..n_scenarios)
        .map(|index| Stage::Individual { index })
        .collect();
    out.push(Stage::Aggregate);
    for loop_index in 0..loops {
        out.extend((0..n_scenarios).map(|index| Stage::Finetune { loop_index, index }));
    }
    out
}

pub const INIT_CHECKPOINT: &str = "init";
pub const FINAL_CHECKPOINT: &str = "final";

/// Store name of the checkpoint written when `stage` completes.
pub fn stage_checkpoint_name(stage: Stage, scenario: &str) -> String {
    match stage {
        Stage::Individual { index } => format!("phase1_{index:02}_{scenario}"),
        Stage::Aggregate => "phase2_aggregate".to_string(),
        Stage::Finetune { loop_index, index } => {
            format!("phase3_l{loop_index:02}_{index:02}_{scenario}")
        }
    }
}

struct GeneralizedRun<'a> {
    scenarios: &'a [NetworkScenario],
    config: &'a TrainConfig,
    store: &'a CheckpointStore,
    seed: u64,
    master: ChaCha8Rng,
    init: QNetwork,
    model: QNetwork,
    next_step: u64,
    metrics: RunMetrics,
    segments: Vec<SegmentSummary>,
}

impl GeneralizedRun<'_> {
    fn checkpoint(&self, model: &QNetwork, stage: Stage, scenario: &str) -> Result<String> {
        let name = match stage {
            Stage::Individual { index } | Stage::Finetune { index, .. } => {
                stage_checkpoint_name(stage, &self.scenarios[index].name)
            }
            Stage::Aggregate => stage_checkpoint_name(stage, ""),
        };
        let first = &self.scenarios[0];
        let mut ckpt = ModelCheckpoint::new(
            model.clone(),
            self.config.env.k_neighbors,
            first.n_p(),
            first.n_f,
            scenario,
            self.next_step,
        );
        ckpt.metadata.rng_state = Some(RngState::capture(&self.master));
        let progress = Progress {
            completed: stage,
            next_step: self.next_step,
            seed: self.seed,
        };
        ckpt.metadata.progress = Some(serde_json::to_value(progress).expect("progress serializes"));
        self.store.save(&name, &ckpt)?;
        info!("checkpoint {name} at step {}", self.next_step);
        Ok(name)
    }

    fn run_stage(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Individual { index } | Stage::Finetune { index, .. } => {
                let scenario = &self.scenarios[index];
                let individual = matches!(stage, Stage::Individual { .. });
                let (steps, epsilon, aggregate, start) = if individual {
                    (
                        self.config.individual_steps,
                        self.config.hyper.epsilon,
                        self.config.aggregation,
                        &self.init,
                    )
                } else {
                    (
                        self.config.finetune_steps_per_network,
                        self.config.finetune_epsilon,
                        true,
                        &self.model,
                    )
                };
                let spec = SegmentSpec {
                    steps,
                    epsilon,
                    aggregate,
                    step_offset: self.next_step,
                };
                let segment_seed = self.master.next_u64();
                info!(
                    "{stage:?}: {} for {steps} steps from step {}",
                    scenario.name, self.next_step
                );
                let out = MultiAgentTrainer::new(scenario, self.config, start, spec, segment_seed)?
                    .run_to_end()?;
                let start_step = self.next_step;
                self.next_step += steps;
                let mean_success = out
                    .metrics
                    .mean_success_between(start_step, self.next_step)
                    .unwrap_or(0.0);
                self.metrics.extend(out.metrics);
                if !individual {
                    // End-of-network barrier.
                    self.model = out.model.clone();
                }
                let checkpoint = self.checkpoint(&out.model, stage, &scenario.name)?;
                self.segments.push(SegmentSummary {
                    stage,
                    scenario: scenario.name.clone(),
                    start_step,
                    steps,
                    mean_success,
                    checkpoint,
                });
            }
            Stage::Aggregate => {
                let names: Vec<String> = (0..self.scenarios.len())
                    .map(|index| {
                        stage_checkpoint_name(
                            Stage::Individual { index },
                            &self.scenarios[index].name,
                        )
                    })
                    .collect();
                let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                self.model = aggregation::aggregate_checkpoints(self.store, &refs)?.model;
                info!("aggregated {} individual checkpoints", names.len());
                let checkpoint = self.checkpoint(&self.model.clone(), stage, "aggregate")?;
                self.segments.push(SegmentSummary {
                    stage,
                    scenario: "aggregate".into(),
                    start_step: self.next_step,
                    steps: 0,
                    mean_success: f64::NAN,
                    checkpoint,
                });
            }
        }
        Ok(())
    }

    fn run_from(mut self, first: usize) -> Result<GeneralizedOutcome> {
        for stage in stages(self.scenarios.len(), self.config.finetune_loops)
            .into_iter()
            .skip(first)
        {
            self.run_stage(stage)?;
        }
        let first = &self.scenarios[0];
        let ckpt = ModelCheckpoint::new(
            self.model.clone(),
            self.config.env.k_neighbors,
            first.n_p(),
            first.n_f,
            "generalized",
            self.next_step,
        );
        self.store.save(FINAL_CHECKPOINT, &ckpt)?;
        Ok(GeneralizedOutcome {
            model: self.model,
            metrics: self.metrics,
            segments: self.segments,
        })
    }
}

/// Checks that `scenarios` can share one model and one checkpoint store.
pub fn check_compatible(scenarios: &[NetworkScenario], config: &TrainConfig) -> Result<()> {
    let first = scenarios
        .first()
        .ok_or_else(|| TrainError::Config("no scenarios".into()))?;
    for sc in scenarios {
        sc.validate().map_err(MdpError::from)?;
        if config.layer_dims(sc) != config.layer_dims(first) {
            return Err(TrainError::Config(format!(
                "scenario {} has a different action space",
                sc.name
            )));
        }
        aggregation::validate_name(&stage_checkpoint_name(
            Stage::Individual { index: 0 },
            &sc.name,
        ))
        .map_err(|_| {
            TrainError::Config(format!(
                "scenario name {:?} is not usable in checkpoint names",
                sc.name
            ))
        })?;
    }
    for (i, a) in scenarios.iter().enumerate() {
        if scenarios[..i].iter().any(|b| b.name == a.name) {
            return Err(TrainError::Config(format!(
                "duplicate scenario name {:?}",
                a.name
            )));
        }
    }
    Ok(())
}

/// Individual training per scenario from a shared init, checkpoint
/// averaging, then round-robin fine-tuning with aggregation.
pub fn generalized_train(
    scenarios: &[NetworkScenario],
    config: &TrainConfig,
    store: &CheckpointStore,
    seed: u64,
) -> Result<GeneralizedOutcome> {
    config.validate()?;
    check_compatible(scenarios, config)?;
    let init = fresh_model(
        &scenarios[0],
        config,
        seeding::derive_seed(seed, "generalized-init", 0),
    );
    let first = &scenarios[0];
    store.save(
        INIT_CHECKPOINT,
        &ModelCheckpoint::new(
            init.clone(),
            config.env.k_neighbors,
            first.n_p(),
            first.n_f,
            "init",
            0,
        ),
    )?;
    let run = GeneralizedRun {
        scenarios,
        config,
        store,
        seed,
        master: seeding::stream(seed, "generalized", 0),
        model: init.clone(),
        init,
        next_step: 0,
        metrics: RunMetrics::default(),
        segments: Vec::new(),
    };
    run.run_from(0)
}

/// Continues a generalized run from a stage checkpoint in `store`.
/// The returned metrics cover only the slots after the checkpoint.
pub fn resume_generalized(
    scenarios: &[NetworkScenario],
    config: &TrainConfig,
    store: &CheckpointStore,
    checkpoint: &str,
) -> Result<GeneralizedOutcome> {
    config.validate()?;
    check_compatible(scenarios, config)?;
    let ckpt = store.load(checkpoint)?;
    let bad = |m: &str| TrainError::Config(format!("checkpoint {checkpoint}: {m}"));
    let progress: Progress = ckpt
        .metadata
        .progress
        .clone()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| bad("no resumable progress marker"))?;
    let master = ckpt
        .metadata
        .rng_state
        .as_ref()
        .and_then(RngState::restore)
        .ok_or_else(|| bad("missing or invalid RNG state"))?;
    let plan = stages(scenarios.len(), config.finetune_loops);
    let position = plan
        .iter()
        .position(|s| *s == progress.completed)
        .ok_or_else(|| bad("stage not in plan"))?;
    let init = store.load(INIT_CHECKPOINT)?.model;
    let run = GeneralizedRun {
        scenarios,
        config,
        store,
        seed: progress.seed,
        master,
        model: ckpt.model,
        init,
        next_step: progress.next_step,
        metrics: RunMetrics::default(),
        segments: Vec::new(),
    };
    run.run_from(position + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_model::{ChannelParams, MobilityParams, Position, TxRxPair};

    fn tiny_scenario(name: &str, n: usize, seed: u64) -> NetworkScenario {
        NetworkScenario {
            schema_version: 1,
            name: name.into(),
            pairs: (0..n)
                .map(|i| {
                    let x = 30.0 + 70.0 * i as f64;
                    TxRxPair {
                        pair_id: i,
                        tx_pos: Position::new(x, 50.0),
                        rx_pos: Position::new(x + 40.0, 60.0),
                        assigned_frequency: i % 2,
                    }
                })
                .collect(),
            area_w: 600.0,
            area_h: 200.0,
            channel: ChannelParams::default(),
            mobility: MobilityParams {
                step_size: 0.5,
                enabled: true,
            },
            power_levels_dbm: vec![1.0, 10.0, 20.0],
            n_f: 2,
            seed,
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hyper: Hyperparams {
                hidden: [8, 8],
                batch_size: 8,
                ..Default::default()
            },
            total_steps: 200,
            individual_steps: 60,
            finetune_steps_per_network: 50,
            finetune_loops: 2,
            ..Default::default()
        }
    }

    #[test]
    fn epsilon_points() {
        let s = EpsilonSchedule::default();
        assert_eq!(epsilon_at(0, &s), 1.0);
        assert_eq!(epsilon_at(2000, &s), 0.05);
        assert!((epsilon_at(1000, &s) - 0.525).abs() < 1e-15);
    }

    #[test]
    fn aggregation_barriers_and_equal_params() {
        let sc = tiny_scenario("t", 3, 1);
        let cfg = small_config();
        let init = fresh_model(&sc, &cfg, 5);
        let spec = SegmentSpec {
            steps: 200,
            epsilon: cfg.hyper.epsilon,
            aggregate: true,
            step_offset: 0,
        };
        let mut trainer = MultiAgentTrainer::new(&sc, &cfg, &init, spec, 5).unwrap();
        let mut barriers = 0;
        while !trainer.is_done() {
            if trainer.run_slot().unwrap() {
                barriers += 1;
                let first = &trainer.agents()[0].online;
                assert!(trainer
                    .agents()
                    .iter()
                    .all(|a| a.online.params() == first.params()));
                assert!(trainer
                    .agents()
                    .iter()
                    .all(|a| a.target.params() == first.params()));
            }
        }
        assert_eq!(barriers, 4);
        let out = trainer.finish().unwrap();
        assert_eq!(out.metrics.aggregation_barriers, 4);
        assert_eq!(out.metrics.records.len(), 200 * 3);
        assert!(out
            .metrics
            .losses
            .iter()
            .all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn independent_training_diverges_without_barriers() {
        let sc = tiny_scenario("t", 3, 1);
        let out = train_independent(&sc, &small_config(), 3).unwrap();
        assert_eq!(out.metrics.aggregation_barriers, 0);
        assert_eq!(out.metrics.records.len(), 600);
        assert!(out.agents.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn same_seed_same_metrics() {
        let sc = tiny_scenario("t", 3, 1);
        let a = train_network(&sc, &small_config(), None, 9).unwrap();
        let b = train_network(&sc, &small_config(), None, 9).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.model, b.model);
        let c = train_network(&sc, &small_config(), None, 10).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn evaluation_is_frozen_and_deterministic() {
        let mut sc = tiny_scenario("t", 3, 1);
        let cfg = small_config();
        let model = train_network(&sc, &cfg, None, 2).unwrap().model;
        let before = model.clone();
        let a = evaluate(&model, &sc, &cfg.env, 100, 4).unwrap();
        assert_eq!(model, before);
        assert_eq!(a.records.len(), 300);
        assert_eq!(a, evaluate(&model, &sc, &cfg.env, 100, 4).unwrap());
        sc.mobility.enabled = false;
        let x = evaluate(&model, &sc, &cfg.env, 50, 1).unwrap();
        let y = evaluate(&model, &sc, &cfg.env, 50, 2).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn evaluate_rejects_mismatched_model() {
        let sc = tiny_scenario("t", 2, 1);
        let cfg = small_config();
        let wrong = QNetwork::zeros([5, 8, 8, 6]);
        assert!(matches!(
            evaluate(&wrong, &sc, &cfg.env, 10, 0),
            Err(TrainError::Dqn(DqnError::Architecture { .. }))
        ));
    }

    #[test]
    fn generalized_protocol_stages_and_resume() {
        let scenarios = vec![tiny_scenario("a", 2, 1), tiny_scenario("b", 3, 2)];
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        let full = generalized_train(&scenarios, &cfg, &store, 77).unwrap();
        // 2 x 60 individual + 2 loops x 2 scenarios x 50
        assert_eq!(full.metrics.n_steps(), 120 + 200);
        let records = 60 * 2 + 60 * 3 + 2 * (50 * 2 + 50 * 3);
        assert_eq!(full.metrics.records.len(), records);
        assert_eq!(full.segments.len(), 2 + 1 + 4);
        assert_eq!(store.load(FINAL_CHECKPOINT).unwrap().model, full.model);

        for name in ["phase1_00_a", "phase2_aggregate", "phase3_l00_01_b"] {
            let resumed = resume_generalized(&scenarios, &cfg, &store, name).unwrap();
            assert_eq!(resumed.model, full.model, "resume from {name}");
            let first = resumed.metrics.records[0].step;
            let tail: Vec<_> = full
                .metrics
                .records
                .iter()
                .filter(|r| r.step >= first)
                .cloned()
                .collect();
            assert_eq!(resumed.metrics.records, tail, "resume from {name}");
        }
    }

    #[test]
    fn single_scenario_generalized_run() {
        let scenarios = vec![tiny_scenario("solo", 2, 1)];
        let cfg = small_config();
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        let out = generalized_train(&scenarios, &cfg, &store, 1).unwrap();
        assert_eq!(out.metrics.n_steps(), 60 + 2 * 50);
        let p1 = store.load("phase1_00_solo").unwrap().model;
        assert_eq!(store.load("phase2_aggregate").unwrap().model, p1);
    }

    #[test]
    fn config_json_defaults_and_strictness() {
        let cfg = TrainConfig::from_json("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.individual_steps, 8000);
        assert_eq!(
            cfg.finetune_loops * cfg.finetune_steps_per_network * 5,
            30_000
        );
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"total_steps": 0}"#).is_err());
    }
}
