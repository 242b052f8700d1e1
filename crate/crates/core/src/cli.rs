//! Command-line front end.
//!
//! Every subcommand resolves and validates all of its inputs before it
//! writes anything, so a rejected invocation leaves no partial outputs.
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{self, CheckpointStore, ModelCheckpoint};
use crate::metrics::{self, RunMetrics};
use crate::net_model::NetworkScenario;
use crate::presets;
use crate::training::{self, TrainConfig, TrainOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "specgrid",
    version,
    about = "Multi-agent DQN power and frequency control with model aggregation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every pair of one network with periodic model aggregation.
    Train(TrainArgs),
    /// Train every pair of one network on its own experience only.
    TrainIndependent(TrainArgs),
    /// Individual training per network, checkpoint averaging, then round-robin fine-tuning.
    TrainMulti(TrainMultiArgs),
    /// Run a frozen model greedily on every pair of a network.
    Eval(EvalArgs),
    /// Average named checkpoints from a store.
    Aggregate(AggregateArgs),
    /// Summarize a metrics CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "preset")]
    pub scenario: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Training config JSON; defaults apply to omitted fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed; defaults to the first seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rerun exactly what a previous manifest describes.
    #[arg(long, conflicts_with_all = ["config", "seed"])]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct TrainMultiArgs {
    /// Scenario JSON files, in training order.
    #[arg(long = "scenario", conflicts_with = "presets")]
    pub scenarios: Vec<PathBuf>,
    /// Comma-separated preset names; defaults to the five generalized-training presets.
    #[arg(long, value_delimiter = ',')]
    pub presets: Vec<String>,
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint store; defaults to $SPECGRID_STORE, then OUT/checkpoints.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Continue from this stage checkpoint in the store.
    #[arg(long)]
    pub resume: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Slots to run; defaults to the config's eval_steps.
    #[arg(long)]
    pub steps: Option<u64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Checkpoint store; defaults to $SPECGRID_STORE.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Comma-separated checkpoint names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub names: Vec<String>,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Metrics CSV to summarize.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub window: usize,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub scenarios: Vec<NetworkScenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<ManifestInput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<String>,
    /// sha256 of every file written, keyed by path relative to the output directory.
    pub artifacts: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInput {
    pub path: PathBuf,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn read_text(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json(&read_text(p, "config")?)
            .map_err(|e| config_err(format!("{}: {e}", p.display()))),
        None => Ok(TrainConfig::default()),
    }
}

fn load_scenario_file(path: &Path) -> Result<NetworkScenario> {
    let mut sc = NetworkScenario::from_json(&read_text(path, "scenario")?)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if sc.name.is_empty() {
        sc.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
    }
    Ok(sc)
}

fn load_preset(name: &str) -> Result<NetworkScenario> {
    presets::preset(name).ok_or_else(|| {
        config_err(format!(
            "unknown preset {name:?}; available: {}",
            presets::PRESET_NAMES.join(", ")
        ))
    })
}

fn load_scenario(args: &ScenarioArgs) -> Result<NetworkScenario> {
    match (&args.scenario, &args.preset) {
        (Some(p), _) => load_scenario_file(p),
        (None, Some(n)) => load_preset(n),
        (None, None) => Err(config_err("one of --scenario or --preset is required")),
    }
}

fn load_manifest(path: &Path, command: &str) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&read_text(path, "manifest")?)
        .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(config_err(format!(
            "{}: unsupported manifest schema_version {}",
            path.display(),
            m.schema_version
        )));
    }
    if m.command != command {
        return Err(config_err(format!(
            "{}: manifest is for `{}`, not `{command}`",
            path.display(),
            m.command
        )));
    }
    m.config.validate().map_err(config_err)?;
    for sc in &m.scenarios {
        sc.validate()
            .map_err(|e| config_err(format!("manifest scenario {}: {e}", sc.name)))?;
    }
    Ok(m)
}

fn resolve_seed(run: &RunArgs, config: &TrainConfig) -> u64 {
    run.seed.unwrap_or(config.seeds[0])
}

/// Output directory must be creatable and must not be a file.
fn check_out_dir(out: &Path) -> Result<()> {
    if out.exists() && !out.is_dir() {
        return Err(config_err(format!(
            "--out {} exists and is not a directory",
            out.display()
        )));
    }
    Ok(())
}

/// Files collected in memory and written together at the end of a run.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("output serializes");
        text.push('\n');
        self.add(name, text.into_bytes());
    }

    /// Writes everything plus `manifest.json` listing the hashes.
    fn commit(mut self, mut manifest: Manifest) -> Result<()> {
        manifest.artifacts = self
            .files
            .iter()
            .map(|(n, b)| (n.clone(), sha256_hex(b)))
            .collect();
        self.add_json("manifest.json", &manifest);
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)
                    .map_err(|e| runtime_err(format!("{}: {e}", parent.display())))?;
            }
            let tmp = path.with_extension("partial");
            fs::write(&tmp, bytes)
                .and_then(|_| fs::rename(&tmp, &path))
                .map_err(|e| runtime_err(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn add_metrics(out: &mut Outputs, metrics: &RunMetrics, window: usize) -> Result<()> {
    out.add("metrics.csv", metrics.to_csv().into_bytes());
    let summary = metrics::summarize(metrics, window).map_err(runtime_err)?;
    out.add_json("summary.json", &summary);
    Ok(())
}

fn add_checkpoint(
    out: &mut Outputs,
    name: &str,
    model: &crate::dqn::QNetwork,
    scenario: &NetworkScenario,
    config: &TrainConfig,
    step: u64,
) {
    let mut ckpt = ModelCheckpoint::new(
        model.clone(),
        config.env.k_neighbors,
        scenario.n_p(),
        scenario.n_f,
        &scenario.name,
        step,
    );
    // Fixed timestamp keeps reruns byte-identical.
    ckpt.metadata.created_unix = 0;
    out.add(
        format!("checkpoints/{name}.{}", aggregation::CHECKPOINT_EXTENSION),
        ckpt.encode(),
    );
}

fn new_manifest(
    command: &str,
    seed: u64,
    config: &TrainConfig,
    scenarios: Vec<NetworkScenario>,
) -> Manifest {
    Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed,
        config: config.clone(),
        scenarios,
        checkpoint: None,
        eval_steps: None,
        resume: None,
        artifacts: Default::default(),
    }
}

fn cmd_train(args: &TrainArgs, independent: bool) -> Result<()> {
    let command = if independent {
        "train-independent"
    } else {
        "train"
    };
    let (config, seed, scenario) = match &args.run.from_manifest {
        Some(path) => {
            let m = load_manifest(path, command)?;
            let [sc] = <[NetworkScenario; 1]>::try_from(m.scenarios)
                .map_err(|_| config_err("manifest must hold one scenario"))?;
            (m.config, m.seed, sc)
        }
        None => {
            let config = load_config(args.run.config.as_deref())?;
            let seed = resolve_seed(&args.run, &config);
            (config, seed, load_scenario(&args.scenario)?)
        }
    };
    config.env.validate(&scenario).map_err(config_err)?;
    check_out_dir(&args.run.out)?;

    log::info!(
        "{command}: {} pairs, {} steps, seed {seed}",
        scenario.n_pairs(),
        config.total_steps
    );
    let outcome: TrainOutcome = if independent {
        training::train_independent(&scenario, &config, seed)
    } else {
        training::train_network(&scenario, &config, None, seed)
    }
    .map_err(runtime_err)?;

    let mut out = Outputs::new(&args.run.out);
    add_metrics(&mut out, &outcome.metrics, config.success_window)?;
    add_checkpoint(
        &mut out,
        "model",
        &outcome.model,
        &scenario,
        &config,
        config.total_steps,
    );
    for (i, agent) in outcome.agents.iter().enumerate() {
        add_checkpoint(
            &mut out,
            &format!("agent_{i:02}"),
            agent,
            &scenario,
            &config,
            config.total_steps,
        );
    }
    out.commit(new_manifest(command, seed, &config, vec![scenario]))
}

/// Explicit flag, then `$SPECGRID_STORE`, then `fallback`. Without a
/// fallback the store must already exist.
fn open_store(explicit: Option<&Path>, fallback: Option<PathBuf>) -> Result<CheckpointStore> {
    let chosen = explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(aggregation::STORE_ENV).map(PathBuf::from));
    if let Some(p) = chosen {
        if fallback.is_none() && !p.is_dir() {
            return Err(config_err(format!(
                "checkpoint store {} does not exist",
                p.display()
            )));
        }
        return CheckpointStore::open(p).map_err(config_err);
    }
    match fallback {
        Some(p) => CheckpointStore::open(p).map_err(config_err),
        None => Err(config_err(format!(
            "no checkpoint store: pass --store or set {}",
            aggregation::STORE_ENV
        ))),
    }
}

fn cmd_train_multi(args: &TrainMultiArgs) -> Result<()> {
    let (config, seed, scenarios, resume) = match &args.run.from_manifest {
        Some(path) => {
            let m = load_manifest(path, "train-multi")?;
            (m.config, m.seed, m.scenarios, m.resume)
        }
        None => {
            let config = load_config(args.run.config.as_deref())?;
            let seed = resolve_seed(&args.run, &config);
            let scenarios = if !args.scenarios.is_empty() {
                args.scenarios
                    .iter()
                    .map(|p| load_scenario_file(p))
                    .collect::<Result<Vec<_>>>()?
            } else if !args.presets.is_empty() {
                args.presets
                    .iter()
                    .map(|n| load_preset(n))
                    .collect::<Result<Vec<_>>>()?
            } else {
                presets::GENERALIZED_SET
                    .iter()
                    .map(|n| load_preset(n))
                    .collect::<Result<Vec<_>>>()?
            };
            (config, seed, scenarios, args.resume.clone())
        }
    };
    for sc in &scenarios {
        config
            .env
            .validate(sc)
            .map_err(|e| config_err(format!("scenario {}: {e}", sc.name)))?;
    }
    training::check_compatible(&scenarios, &config).map_err(config_err)?;
    check_out_dir(&args.run.out)?;
    let store = open_store(
        args.store.as_deref(),
        Some(args.run.out.join("checkpoints")),
    )?;
    if let Some(name) = &resume {
        if !store.contains(name) {
            return Err(config_err(format!(
                "checkpoint {name:?} not found in {}",
                store.root().display()
            )));
        }
    }

    log::info!("train-multi: {} scenarios, seed {seed}", scenarios.len());
    let outcome = match &resume {
        Some(name) => training::resume_generalized(&scenarios, &config, &store, name),
        None => training::generalized_train(&scenarios, &config, &store, seed),
    }
    .map_err(|e| match e {
        training::TrainError::Config(m) => config_err(m),
        other => runtime_err(other),
    })?;

    let mut out = Outputs::new(&args.run.out);
    add_metrics(&mut out, &outcome.metrics, config.success_window)?;
    out.add_json("segments.json", &outcome.segments);
    let mut manifest = new_manifest("train-multi", seed, &config, scenarios);
    manifest.resume = resume;
    out.commit(manifest)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (config, seed, scenario, ckpt_path, steps) = match &args.run.from_manifest {
        Some(path) => {
            let m = load_manifest(path, "eval")?;
            let [sc] = <[NetworkScenario; 1]>::try_from(m.scenarios)
                .map_err(|_| config_err("manifest must hold one scenario"))?;
            let input = m
                .checkpoint
                .ok_or_else(|| config_err("eval manifest has no checkpoint"))?;
            let bytes = fs::read(&input.path)
                .map_err(|e| config_err(format!("{}: {e}", input.path.display())))?;
            if sha256_hex(&bytes) != input.sha256 {
                return Err(config_err(format!(
                    "{} changed since the manifest was written",
                    input.path.display()
                )));
            }
            (m.config, m.seed, sc, input.path, m.eval_steps)
        }
        None => {
            let config = load_config(args.run.config.as_deref())?;
            let seed = resolve_seed(&args.run, &config);
            let path = args
                .checkpoint
                .clone()
                .ok_or_else(|| config_err("--checkpoint is required"))?;
            (
                config,
                seed,
                load_scenario(&args.scenario)?,
                path,
                args.steps,
            )
        }
    };
    let steps = steps.unwrap_or(config.eval_steps);
    if steps == 0 {
        return Err(config_err("--steps must be >= 1"));
    }
    config.env.validate(&scenario).map_err(config_err)?;
    let bytes = fs::read(&ckpt_path).map_err(|e| {
        config_err(format!(
            "cannot read checkpoint {}: {e}",
            ckpt_path.display()
        ))
    })?;
    let ckpt = ModelCheckpoint::decode(&bytes)
        .map_err(|e| config_err(format!("{}: {e}", ckpt_path.display())))?;
    let expected = config.layer_dims(&scenario);
    if ckpt.model.layer_dims() != expected {
        return Err(config_err(format!(
            "checkpoint layers {:?} do not fit scenario {} (expected {expected:?})",
            ckpt.model.layer_dims(),
            scenario.name
        )));
    }
    check_out_dir(&args.run.out)?;

    let metrics = training::evaluate(&ckpt.model, &scenario, &config.env, steps, seed)
        .map_err(runtime_err)?;
    let mut out = Outputs::new(&args.run.out);
    add_metrics(&mut out, &metrics, config.success_window)?;
    let mut manifest = new_manifest("eval", seed, &config, vec![scenario]);
    manifest.checkpoint = Some(ManifestInput {
        path: ckpt_path,
        sha256: sha256_hex(&bytes),
    });
    manifest.eval_steps = Some(steps);
    out.commit(manifest)
}

fn cmd_aggregate(args: &AggregateArgs) -> Result<()> {
    let store = open_store(args.store.as_deref(), None)?;
    if args.out.is_dir() {
        return Err(config_err(format!(
            "--out {} is a directory",
            args.out.display()
        )));
    }
    let names: Vec<&str> = args.names.iter().map(String::as_str).collect();
    for n in &names {
        if !store.contains(n) {
            return Err(config_err(format!(
                "checkpoint {n:?} not found in {}",
                store.root().display()
            )));
        }
    }
    let mut ckpt = aggregation::aggregate_checkpoints(&store, &names).map_err(runtime_err)?;
    ckpt.metadata.created_unix = 0;
    aggregation::write_checkpoint(&args.out, &ckpt).map_err(runtime_err)
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    if args.window == 0 {
        return Err(config_err("--window must be >= 1"));
    }
    let text = read_text(&args.metrics, "metrics")?;
    let metrics = RunMetrics::from_csv(&text)
        .map_err(|e| config_err(format!("{}: {e}", args.metrics.display())))?;
    let summary = metrics::summarize(&metrics, args.window).map_err(config_err)?;
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    match &args.out {
        Some(path) => {
            fs::write(path, json).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
        }
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, false),
        Command::TrainIndependent(a) => cmd_train(a, true),
        Command::TrainMulti(a) => cmd_train_multi(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

/// Parses `argv` (program name first) and runs it, returning the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("specgrid: {e}");
            e.exit_code()
        }
    }
}
