//! Command-line front end: `collect`, `filter`, `train`, `eval` and `selfcheck`.
//!
//! Every flag can also be set in a TOML file passed with `--config`; flags win.
//! Top-level keys are the global flags, and one table per subcommand holds its
//! flags under their snake_case names:
//!
//! ```toml
//! seed = 42
//!
//! [train]
//! agent = "CEO"
//! lambda = 0.1
//! batch_size = 1
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clarity::{ClarityConfig, ClarityError};
use crate::eval::{self, EvalError, EvalModels, EvalOptions, JudgeMethod, OverstepJudgeConfig};
use crate::gateway::{self, ChatBackend, DialogueScript, EndpointConfig, GatewayError, HttpBackend, ScriptedBackend};
use crate::model::{self, AgentModel, Encoder, LoraConfig, ModelConfig, ModelError};
use crate::selfcheck::{self, Fault};
use crate::training::{self, Manifest, TrainConfig, TrainError};
use crate::trajectory::{self, FilterRule, RoleDescription, RoleRegistry, StoreError, TokenMode, Trajectory};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;
pub const EXIT_INVARIANT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "role-clarity", version, about = "Role-clarity metrics and regularized LoRA fine-tuning")]
pub struct Cli {
    /// TOML file mirroring the flags; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw; a seed is picked and logged when absent.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run two-role dialogues against an endpoint (or a mock script) and store them.
    Collect(CollectArgs),
    /// Split a trajectory file into accepted and rejected dialogues.
    Filter(FilterArgs),
    /// Fine-tune one role's adapters and write checkpoints plus a merged model.
    Train(TrainArgs),
    /// Judge overstepping and measure role clarity on a test corpus.
    Eval(EvalArgs),
    /// Run the built-in gradient, metric and LoRA verification suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectArgs {
    /// Tasks file, one `{"task_id", "prompt"}` object per line.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// Role registry with exactly two roles; the first opens each round.
    #[arg(long)]
    pub roles: Option<PathBuf>,
    /// Trajectory file; existing runs are kept and skipped.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Answer from a dialogue script instead of the network.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub rounds: Option<u32>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    pub api_key_env: Option<String>,
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub mode: Option<TokenMode>,
    /// JSON summary of the run, including the resolved configuration.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterArgs {
    #[arg(long = "in")]
    #[serde(rename = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub roles: Option<PathBuf>,
    #[arg(long)]
    pub accepted: Option<PathBuf>,
    #[arg(long)]
    pub rejected: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<TokenMode>,
    /// Decision token for the chosen mode.
    #[arg(long)]
    pub token: Option<String>,
    /// Roles that must end with the token; defaults to every registry role.
    #[arg(long, value_delimiter = ',')]
    pub required: Vec<String>,
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

/// Shape of the frozen base model when no `--base` checkpoint is given.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArgs {
    /// Checkpoint holding the frozen base weights.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
    /// Seed of the base weights, separate from the run seed.
    #[arg(long)]
    pub model_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Toy,
    Full,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    /// Accepted trajectories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub roles: Option<PathBuf>,
    /// Role whose adapters are trained.
    #[arg(long)]
    pub agent: Option<String>,
    /// Output directory for checkpoints, manifest, report and merged model.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub validation_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    /// Test trajectories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub roles: Option<PathBuf>,
    /// Adapter checkpoint as ROLE=PATH, or a checkpoint directory whose manifest names the role.
    #[arg(long)]
    pub ckpt: Vec<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub judge: Option<JudgeMethod>,
    /// Roles that must end with the decision token; defaults to every registry role.
    #[arg(long, value_delimiter = ',')]
    pub required: Vec<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Include per-case matrices and events in the report.
    #[arg(long)]
    pub cases: bool,
    /// Directory of generated artifacts for completeness and executability.
    #[arg(long)]
    pub artifacts: Option<PathBuf>,
    /// Requirement text for the consistency score.
    #[arg(long)]
    pub requirement: Option<PathBuf>,
    /// Executability command; `{}` is replaced by each artifact path.
    #[arg(long)]
    pub beta_cmd: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfcheckArgs {
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, hide = true)]
    #[serde(skip)]
    pub inject_fault: Option<String>,
}

/// A failed command with its exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl fmt::Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::data(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::usage(e.to_string()),
            other => Failure::data(other),
        }
    }
}

impl From<GatewayError> for Failure {
    fn from(e: GatewayError) -> Self {
        Self {
            code: if e.is_transport() { EXIT_TRANSPORT } else { EXIT_DATA },
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::RoleMissing(_) => Failure::usage(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => Failure::data(other),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EncoderMissing(_) | EvalError::UnknownRole(_) => Failure::usage(e.to_string()),
            other => Failure::data(other),
        }
    }
}

impl From<ClarityError> for Failure {
    fn from(e: ClarityError) -> Self {
        Failure::usage(e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// What every JSON output of the tool looks like.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub resolved: Value,
    pub result: T,
}

fn write_record<T: Serialize>(path: &Path, command: &str, resolved: &Value, result: T) -> Outcome {
    let record = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        resolved: resolved.clone(),
        result,
    };
    let text = serde_json::to_string_pretty(&record).expect("records serialize");
    write_file(path, (text + "\n").as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// Parsed `--config` file.
#[derive(Debug, Default)]
struct ConfigFile {
    seed: Option<u64>,
    sections: toml::Table,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let seed = match table.remove("seed") {
            None => None,
            Some(toml::Value::Integer(s)) if s >= 0 => Some(s as u64),
            Some(other) => return Err(Failure::usage(format!("seed must be a non-negative integer, got {other}"))),
        };
        for (k, v) in &table {
            let known = ["collect", "filter", "train", "eval", "selfcheck"].contains(&k.as_str());
            if !known || !v.is_table() {
                return Err(Failure::usage(format!("{}: unknown config entry {k}", path.display())));
            }
        }
        Ok(Self { seed, sections: table })
    }

    /// Fills every flag left unset with the file's value for it.
    fn overlay<T: Serialize + DeserializeOwned>(&self, section: &str, flags: &T) -> Outcome<T> {
        let mut merged = match serde_json::to_value(flags).expect("flags serialize") {
            Value::Object(m) => m,
            _ => unreachable!("flag structs serialize to objects"),
        };
        if let Some(toml::Value::Table(t)) = self.sections.get(section) {
            for (k, v) in t {
                let slot = merged
                    .get_mut(k)
                    .ok_or_else(|| Failure::usage(format!("unknown config key {section}.{k}")))?;
                let unset = match slot {
                    Value::Null => true,
                    Value::Bool(b) => !*b,
                    Value::Array(a) => a.is_empty(),
                    _ => false,
                };
                if unset {
                    *slot = serde_json::to_value(v).expect("toml values serialize");
                }
            }
        }
        serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::usage(format!("config section {section}: {e}")))
    }
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> u64 {
    flag.or(file).unwrap_or_else(|| {
        let s = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        log::warn!("no seed given; using {s}");
        s
    })
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> Outcome<T> {
    v.clone().ok_or_else(|| Failure::usage(format!("missing required --{flag}")))
}

/// Parses `args` (including the program name), runs the subcommand and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    }
}

fn execute(cli: &Cli) -> Outcome {
    let file = ConfigFile::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Collect(a) => cmd_collect(&file.overlay("collect", a)?),
        Command::Filter(a) => cmd_filter(&file.overlay("filter", a)?),
        Command::Train(a) => cmd_train(&file.overlay("train", a)?, resolve_seed(cli.seed, file.seed)),
        Command::Eval(a) => cmd_eval(&file.overlay("eval", a)?),
        Command::Selfcheck(a) => {
            let mut merged = file.overlay("selfcheck", a)?;
            merged.inject_fault = a.inject_fault.clone();
            cmd_selfcheck(&merged, resolve_seed(cli.seed, file.seed))
        }
    }
}

fn two_roles(registry: &RoleRegistry) -> Outcome<[RoleDescription; 2]> {
    <[RoleDescription; 2]>::try_from(registry.roles().to_vec())
        .map_err(|r| Failure::data(format!("collect needs exactly two roles, registry has {}", r.len())))
}

fn filter_rule(registry: &RoleRegistry, mode: TokenMode, token: Option<&str>, required: &[String]) -> Outcome<FilterRule> {
    let required = if required.is_empty() {
        registry.roles().iter().map(|r| r.role_id.clone()).collect()
    } else {
        required.to_vec()
    };
    let mut rule = FilterRule::new(mode, required);
    if let Some(t) = token {
        match mode {
            TokenMode::Strict => rule.token_strict = t.to_string(),
            TokenMode::Relaxed => rule.token_relaxed = t.to_string(),
        }
    }
    rule.validate(registry).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(rule)
}

#[derive(Debug, Serialize)]
struct CollectSummary<'a> {
    accepted: usize,
    rejected: usize,
    acceptance_rate: f64,
    skipped: usize,
    failed: &'a [gateway::FailedTask],
}

fn cmd_collect(a: &CollectArgs) -> Outcome {
    let roles_path = required(&a.roles, "roles")?;
    let tasks_path = required(&a.tasks, "tasks")?;
    let out = required(&a.out, "out")?;
    let registry = RoleRegistry::load(&roles_path)?;
    let roles = two_roles(&registry)?;
    let defaults = EndpointConfig::default();
    let endpoint = EndpointConfig {
        base_url: a.base_url.clone().unwrap_or(defaults.base_url),
        model: a.model.clone().unwrap_or(defaults.model),
        api_key_env: match &a.mock {
            Some(_) => None,
            None => a.api_key_env.clone().or(defaults.api_key_env),
        },
        temperature: a.temperature.unwrap_or(defaults.temperature),
        max_tokens: a.max_tokens.unwrap_or(defaults.max_tokens),
        max_rounds: a.rounds.unwrap_or(defaults.max_rounds),
        timeout_secs: a.timeout.unwrap_or(defaults.timeout_secs),
        retries: a.retries.unwrap_or(defaults.retries),
        concurrency: a.concurrency.unwrap_or(defaults.concurrency),
        ..defaults
    };
    let rule = filter_rule(&registry, a.mode.unwrap_or_default(), None, &[])?;
    let tasks = gateway::load_tasks(&tasks_path)?;
    let backend: Box<dyn ChatBackend> = match &a.mock {
        Some(p) => Box::new(ScriptedBackend::new(DialogueScript::load(p)?)?),
        None => Box::new(HttpBackend::new(&endpoint)?),
    };
    let resolved = serde_json::json!({ "args": a, "endpoint": endpoint, "rule": rule });
    log::info!("resolved configuration: {resolved}");

    let outcome = gateway::collect_dataset(&tasks, &roles, backend.as_ref(), &endpoint, &rule, &out)?;
    let summary = CollectSummary {
        accepted: outcome.filtered.accepted.len(),
        rejected: outcome.filtered.rejected.len(),
        acceptance_rate: outcome.filtered.acceptance_rate(),
        skipped: outcome.skipped.len(),
        failed: &outcome.failed,
    };
    println!(
        "collected {} dialogue(s): {} accepted, {} rejected, {} skipped, {} failed",
        summary.accepted + summary.rejected,
        summary.accepted,
        summary.rejected,
        summary.skipped,
        summary.failed.len()
    );
    if let Some(p) = &a.summary {
        write_record(p, "collect", &resolved, &summary)?;
    }
    match outcome.failed.iter().find(|f| f.transport).or(outcome.failed.first()) {
        None => Ok(()),
        Some(f) => Err(Failure {
            code: if f.transport { EXIT_TRANSPORT } else { EXIT_DATA },
            message: format!("{} task(s) failed; first: {}: {}", outcome.failed.len(), f.task_id, f.error),
        }),
    }
}

#[derive(Debug, Serialize)]
struct RejectedEntry<'a> {
    run_id: &'a str,
    reasons: &'a [trajectory::RejectReason],
}

fn cmd_filter(a: &FilterArgs) -> Outcome {
    let input = required(&a.input, "in")?;
    let accepted_path = required(&a.accepted, "accepted")?;
    let registry = RoleRegistry::load(&required(&a.roles, "roles")?)?;
    let rule = filter_rule(&registry, a.mode.unwrap_or_default(), a.token.as_deref(), &a.required)?;
    let resolved = serde_json::json!({ "args": a, "rule": rule });
    log::info!("resolved configuration: {resolved}");

    let trajectories = trajectory::load_trajectories(&input, &registry)?;
    let outcome = trajectory::rejection_filter(&trajectories, &rule);
    trajectory::save_trajectories(&accepted_path, &outcome.accepted)?;
    if let Some(p) = &a.rejected {
        let rejected: Vec<Trajectory> = outcome.rejected.iter().map(|r| r.trajectory.clone()).collect();
        trajectory::save_trajectories(p, &rejected)?;
    }
    println!(
        "{} of {} accepted ({} mode)",
        outcome.accepted.len(),
        trajectories.len(),
        match rule.mode {
            TokenMode::Strict => "strict",
            TokenMode::Relaxed => "relaxed",
        }
    );
    if let Some(p) = &a.summary {
        let rejected: Vec<RejectedEntry> = outcome
            .rejected
            .iter()
            .map(|r| RejectedEntry {
                run_id: r.trajectory.run_id(),
                reasons: &r.reasons,
            })
            .collect();
        let accepted: Vec<&str> = outcome.accepted.iter().map(|t| t.run_id()).collect();
        write_record(
            p,
            "filter",
            &resolved,
            serde_json::json!({
                "accepted": accepted,
                "rejected": rejected,
                "role_check": "token-format judge only",
            }),
        )?;
    }
    Ok(())
}

fn model_config(m: &ModelArgs) -> ModelConfig {
    let d = ModelConfig::default();
    ModelConfig {
        vocab_size: m.vocab_size.unwrap_or(d.vocab_size),
        d_model: m.d_model.unwrap_or(d.d_model),
        n_layers: m.layers.unwrap_or(d.n_layers),
        context_len: m.context_len.unwrap_or(d.context_len),
        seed: m.model_seed.unwrap_or(d.seed),
    }
}

fn base_model(m: &ModelArgs, lora: LoraConfig) -> Outcome<AgentModel> {
    match &m.base {
        Some(p) => {
            let shaped = [m.vocab_size, m.d_model, m.layers, m.context_len];
            if shaped.iter().any(Option::is_some) || m.model_seed.is_some() {
                return Err(Failure::usage("--base cannot be combined with model shape flags"));
            }
            Ok(model::load_checkpoint(p)?)
        }
        None => Ok(AgentModel::new(model_config(m), lora)?),
    }
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Outcome {
    let data = required(&a.data, "data")?;
    let agent = required(&a.agent, "agent")?;
    let dir = required(&a.ckpt, "ckpt")?;
    let registry = RoleRegistry::load(&required(&a.roles, "roles")?)?;
    let preset = a.preset.unwrap_or_default();
    let (mut config, lora_defaults) = match preset {
        Preset::Toy => (TrainConfig::toy(), LoraConfig::toy()),
        Preset::Full => (TrainConfig::default(), LoraConfig::full()),
    };
    config.seed = seed;
    config.lambda = a.lambda.unwrap_or(config.lambda);
    config.eta = a.lr.unwrap_or(config.eta);
    config.epochs = a.epochs.unwrap_or(config.epochs);
    config.batch_size = a.batch_size.unwrap_or(config.batch_size);
    config.checkpoint_every = a.checkpoint_every.unwrap_or(config.checkpoint_every);
    config.validation_size = a.validation_size.unwrap_or(config.validation_size);
    config.momentum = a.momentum.unwrap_or(config.momentum);
    config.tau = a.tau.unwrap_or(config.tau);
    let lora = LoraConfig {
        rank: a.rank.unwrap_or(lora_defaults.rank),
        alpha: a.alpha.unwrap_or(lora_defaults.alpha),
        dropout: a.dropout.unwrap_or(lora_defaults.dropout),
    };
    config.validate()?;
    let base = base_model(&a.model, lora)?;
    let model = base.with_adapters(lora, seed)?;
    let resolved = serde_json::json!({
        "args": a,
        "seed": seed,
        "model": model.config(),
        "lora": lora,
        "train": config,
    });
    log::info!("resolved configuration: {resolved}");

    let dataset = trajectory::load_trajectories(&data, &registry)?;
    let (trained, report) = match training::train_agent(&model, &dataset, &registry, &agent, &config, Some(&dir)) {
        Ok(r) => r,
        Err(TrainError::Diverged { step, .. }) => {
            return Err(Failure::data(format!(
                "training diverged at step {step}; the last finite checkpoint is recorded in {}",
                dir.join(training::MANIFEST_FILE).display()
            )))
        }
        Err(e) => return Err(e.into()),
    };
    model::save_checkpoint(&trained.merged(), &dir.join("merged.ckpt"))?;
    write_record(&dir.join("report.json"), "train", &resolved, &report)?;
    let last = report.steps.last().expect("training ran at least one step");
    println!(
        "{agent}: {} steps, selected {}, final loss {:.6} (mle {:.6}, rc {:.6}), clarity {:.6} -> {:.6}",
        report.steps.len(),
        report.selected_checkpoint,
        last.total,
        last.mle,
        last.rc,
        report.epoch_clarity[0],
        report.epoch_clarity.last().expect("pre-training entry"),
    );
    Ok(())
}

fn parse_ckpt(spec: &str) -> Outcome<(String, PathBuf)> {
    if let Some((role, path)) = spec.split_once('=') {
        return Ok((role.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(spec);
    if path.is_dir() {
        let m = Manifest::load(&path)?;
        Ok((m.role_id, path))
    } else {
        Err(Failure::usage(format!("--ckpt {spec}: use ROLE=PATH for a checkpoint file")))
    }
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let data = required(&a.data, "data")?;
    let report_path = required(&a.report, "report")?;
    let registry = RoleRegistry::load(&required(&a.roles, "roles")?)?;
    let rule = filter_rule(&registry, TokenMode::Strict, None, &a.required)?;
    let clarity = ClarityConfig {
        tau: a.tau.unwrap_or(ClarityConfig::default().tau),
        epsilon: a.epsilon.unwrap_or(ClarityConfig::default().epsilon),
        ..ClarityConfig::default()
    };
    clarity.validate()?;

    let mut adapted = BTreeMap::new();
    for spec in &a.ckpt {
        let (role, path) = parse_ckpt(spec)?;
        if registry.get(&role).is_none() {
            return Err(Failure::usage(format!("--ckpt names unknown role {role}")));
        }
        let m = training::load_selected(&path)?;
        if adapted.insert(role.clone(), m).is_some() {
            return Err(Failure::usage(format!("role {role} given twice")));
        }
    }
    let base = match (&a.model.base, adapted.values().next()) {
        (None, Some(first)) => first.with_adapters(*first.lora_config(), 0)?,
        _ => base_model(&a.model, LoraConfig::toy())?,
    };
    let models = EvalModels::new(base, adapted)?;
    let encoder_checkpoint = a.model.base.as_ref().map(|p| p.display().to_string());
    let options = EvalOptions {
        judge: OverstepJudgeConfig {
            method: a.judge.unwrap_or_default(),
            rule,
            encoder_checkpoint: encoder_checkpoint.clone(),
        },
        clarity,
        include_cases: a.cases,
    };
    let resolved = serde_json::json!({
        "args": a,
        "model": models.base().config(),
        "base_fingerprint": models.base().base_fingerprint(),
        "judge": options.judge,
        "clarity": options.clarity,
    });
    log::info!("resolved configuration: {resolved}");

    let trajectories = trajectory::load_trajectories(&data, &registry)?;
    let mut report = eval::evaluate(&trajectories, &registry, &models, &options)?;

    let files = match &a.artifacts {
        Some(dir) => Some(eval::artifact_files(dir)?),
        None => None,
    };
    let alpha = match &files {
        Some(f) => {
            let patterns: Vec<String> = eval::DEFAULT_PLACEHOLDERS.iter().map(|s| s.to_string()).collect();
            Some(eval::completeness_alpha(&eval::read_texts(f)?, &patterns)?)
        }
        None => None,
    };
    let beta = match (&files, &a.beta_cmd) {
        (Some(f), Some(cmd)) => {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts.next().ok_or_else(|| Failure::usage("--beta-cmd is empty"))?;
            Some(eval::executability_beta(f, &eval::BetaHook { program, args: parts.collect() })?)
        }
        (None, Some(_)) => return Err(Failure::usage("--beta-cmd needs --artifacts")),
        _ => None,
    };
    let gamma = match (&files, &a.requirement) {
        (Some(f), Some(req)) => {
            let requirement =
                fs::read_to_string(req).map_err(|e| Failure::data(format!("{}: {e}", req.display())))?;
            let artifact = eval::read_texts(f)?.join("\n");
            let encoder: &dyn Encoder = &models.base().base_encoder();
            Some(eval::consistency_gamma(encoder, &requirement, &artifact)?)
        }
        (None, Some(_)) => return Err(Failure::usage("--requirement needs --artifacts")),
        _ => None,
    };
    report.set_software_metrics(alpha, beta, gamma)?;

    write_record(&report_path, "eval", &resolved, &report)?;
    if let Some(p) = &a.csv {
        write_file(p, report.to_csv()?.as_bytes())?;
    }
    println!(
        "{} cases: clarity {:.6}, overstep rate {:.4} strict / {:.4} relaxed",
        report.n_cases, report.clarity_score_mean, report.overstep_rate_strict, report.overstep_rate_relaxed
    );
    Ok(())
}

fn cmd_selfcheck(a: &SelfcheckArgs, seed: u64) -> Outcome {
    let n = a.seeds.unwrap_or(1);
    if n == 0 {
        return Err(Failure::usage("--seeds must be >= 1"));
    }
    let fault = match a.inject_fault.as_deref() {
        None => Fault::None,
        Some("gradient") => Fault::GradientBug,
        Some(other) => return Err(Failure::usage(format!("unknown fault {other}"))),
    };
    let seeds: Vec<u64> = (0..n).map(|k| seed.wrapping_add(k)).collect();
    let report = selfcheck::run(&seeds, fault);
    for s in &report.suites {
        println!(
            "{} {:<16} {} [{:.2}s]",
            if s.passed { "PASS" } else { "FAIL" },
            s.name,
            s.detail,
            s.seconds
        );
    }
    if let Some(p) = &a.report {
        let resolved = serde_json::json!({ "args": a, "seeds": seeds });
        write_record(p, "selfcheck", &resolved, &report)?;
    }
    match report.suites.iter().find(|s| !s.passed) {
        None => Ok(()),
        Some(s) => Err(Failure {
            code: EXIT_INVARIANT,
            message: format!("invariant violated: {} ({})", s.invariant, s.name),
        }),
    }
}
