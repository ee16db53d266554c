//! Seeded two-role toy corpus: a CEO-like role that talks business and a
//! CPO-like role that talks product design, with disjoint vocabularies.
//!
//! Dialogues are produced by running the scripted mock backend through the
//! ordinary collection path, so the corpus exercises the same code as a live
//! endpoint would.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::clarity::ClarityConfig;
use crate::eval::{evaluate, ClarityReport, EvalModels, EvalOptions, JudgeMethod, OverstepJudgeConfig};
use crate::model::{AgentModel, LoraConfig, ModelConfig};
use crate::training::{train_all_roles, TrainConfig, TrainReport};

use crate::gateway::{self, CollectOutcome, DialogueScript, EndpointConfig, ScriptedBackend, Task, WhenExhausted};
use crate::seed::{self, Rng, Stream};
use crate::trajectory::{FilterRule, RoleDescription, RoleRegistry, TokenMode};

pub const CEO_WORDS: [&str; 16] = [
    "budget", "revenue", "market", "investors", "profit", "strategy", "pricing", "growth", "funding", "quarter",
    "partners", "sales", "costs", "margin", "customers", "contract",
];

pub const CPO_WORDS: [&str; 16] = [
    "interface", "button", "screen", "layout", "color", "font", "menu", "icon", "widget", "prototype", "wireframe",
    "usability", "sidebar", "dialog", "theme", "animation",
];

const APPS: [&str; 12] = [
    "timer", "calculator", "weather dashboard", "note editor", "chess game", "expense tracker", "music player",
    "photo gallery", "quiz game", "habit tracker", "recipe book", "drawing pad",
];

const ADJECTIVES: [&str; 6] = ["simple", "colorful", "offline", "minimal", "shared", "fast"];

pub fn toy_roles() -> [RoleDescription; 2] {
    [
        RoleDescription {
            role_id: "CEO".into(),
            description: "The CEO owns business strategy: budget, revenue, market, investors, profit, pricing, \
                          growth, funding, sales, costs and margin. The CEO approves the plan."
                .into(),
        },
        RoleDescription {
            role_id: "CPO".into(),
            description: "The CPO owns product design: interface, button, screen, layout, color, font, menu, icon, \
                          widget, prototype, wireframe and usability. The CPO specifies the product."
                .into(),
        },
    ]
}

pub fn toy_registry() -> RoleRegistry {
    RoleRegistry::new(toy_roles().to_vec()).expect("toy roles are valid")
}

/// Both roles must end with the strict token.
pub fn toy_rule() -> FilterRule {
    FilterRule::new(TokenMode::Strict, vec!["CEO".into(), "CPO".into()])
}

pub fn toy_endpoint(max_rounds: u32) -> EndpointConfig {
    EndpointConfig {
        base_url: "mock://".into(),
        model: "scripted".into(),
        api_key_env: None,
        max_rounds,
        ..EndpointConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_tasks: usize,
    pub seed: u64,
    /// Prefix of generated task ids.
    pub prefix: String,
    pub max_rounds: u32,
    /// Share of tasks where the CPO never emits a correctly formatted token.
    pub noncompliant: f64,
    /// Share of tasks where one CEO message borrows the CPO vocabulary.
    pub overstep: f64,
}

impl CorpusSpec {
    /// About 200 accepted training dialogues.
    pub fn train() -> Self {
        Self {
            n_tasks: 240,
            seed: 42,
            prefix: "train".into(),
            max_rounds: 4,
            noncompliant: 0.15,
            overstep: 0.0,
        }
    }

    /// Held-out test dialogues, a third of them containing an overstep.
    pub fn test() -> Self {
        Self {
            n_tasks: 60,
            seed: 7,
            prefix: "test".into(),
            max_rounds: 4,
            noncompliant: 0.0,
            overstep: 1.0 / 3.0,
        }
    }
}

fn sentence(rng: &mut Rng, words: &[&str], app: &str) -> String {
    let pick = |rng: &mut Rng| *words.choose(rng).expect("nonempty vocabulary");
    let (a, b, c) = (pick(rng), pick(rng), pick(rng));
    match rng.random_range(0..4) {
        0 => format!("For the {app}, the {a} and the {b} come first; the {c} follows."),
        1 => format!("We should settle the {a} of the {app} before the {b} and {c}."),
        2 => format!("My view on the {app}: {a}, {b}, then {c}."),
        _ => format!("The {app} needs a clear {a}, a solid {b} and a careful {c}."),
    }
}

/// Generated tasks plus the mock script that answers them.
pub fn toy_tasks_and_script(spec: &CorpusSpec) -> (Vec<Task>, DialogueScript) {
    let mut rng = seed::rng(spec.seed, Stream::Synthetic);
    let mut tasks = Vec::with_capacity(spec.n_tasks);
    let mut per_task = BTreeMap::new();
    for i in 0..spec.n_tasks {
        let app = *APPS.choose(&mut rng).expect("apps");
        let adj = *ADJECTIVES.choose(&mut rng).expect("adjectives");
        let task_id = format!("{}-{i:04}", spec.prefix);
        let rounds = rng.random_range(2..=spec.max_rounds.max(2)) as usize;
        let noncompliant = rng.random::<f64>() < spec.noncompliant;
        let overstep = rng.random::<f64>() < spec.overstep;

        let mut ceo: Vec<String> = (0..rounds).map(|_| sentence(&mut rng, &CEO_WORDS, app)).collect();
        let mut cpo: Vec<String> = (0..rounds).map(|_| sentence(&mut rng, &CPO_WORDS, app)).collect();
        let last = rounds - 1;
        ceo[last] = format!("<INFO> {} approved for the {app}.", CEO_WORDS.choose(&mut rng).expect("words"));
        cpo[last] = if noncompliant && rng.random::<bool>() {
            format!("INFO: {} done for the {app}.", CPO_WORDS.choose(&mut rng).expect("words"))
        } else if noncompliant {
            format!("The {} still needs work.", CPO_WORDS.choose(&mut rng).expect("words"))
        } else {
            format!("<INFO> {} finalized for the {app}.", CPO_WORDS.choose(&mut rng).expect("words"))
        };
        if noncompliant {
            // never terminate: a run without the token lasts until the round cap
            ceo[last] = sentence(&mut rng, &CEO_WORDS, app);
        }
        if overstep && last > 0 {
            let k = rng.random_range(0..last);
            ceo[k] = sentence(&mut rng, &CPO_WORDS, app);
        }

        let mut extra = Map::new();
        extra.insert(
            "subset".into(),
            Value::String(if overstep { "hard" } else { "easy" }.into()),
        );
        tasks.push(Task {
            task_id: task_id.clone(),
            prompt: format!("Build a {adj} {app}."),
            extra,
        });
        let mut m = BTreeMap::new();
        m.insert("CEO".to_string(), ceo);
        m.insert("CPO".to_string(), cpo);
        per_task.insert(task_id, m);
    }
    let script = DialogueScript {
        replies: BTreeMap::new(),
        when_exhausted: WhenExhausted::RepeatLast,
        tasks: per_task,
    };
    (tasks, script)
}

/// Collects the corpus described by `spec` into `out` through the mock backend.
pub fn collect_toy_corpus(spec: &CorpusSpec, out: &Path) -> gateway::Result<CollectOutcome> {
    let (tasks, script) = toy_tasks_and_script(spec);
    let backend = ScriptedBackend::new(script)?;
    gateway::collect_dataset(&tasks, &toy_roles(), &backend, &toy_endpoint(spec.max_rounds), &toy_rule(), out)
}

/// File names of the bundled toy inputs, as written by [`write_toy_bundle`].
pub const BUNDLE_FILES: [&str; 5] = [
    "roles.json",
    "train_tasks.jsonl",
    "train_script.json",
    "test_tasks.jsonl",
    "test_script.json",
];

/// Writes the registry plus tasks and mock scripts for both corpora into `dir`.
pub fn write_toy_bundle(dir: &Path) -> Result<(), BundleError> {
    std::fs::create_dir_all(dir).map_err(|e| BundleError::io(dir, e))?;
    toy_registry().save(&dir.join("roles.json"))?;
    for (name, spec) in [("train", CorpusSpec::train()), ("test", CorpusSpec::test())] {
        let (tasks, script) = toy_tasks_and_script(&spec);
        let mut lines = String::new();
        for t in &tasks {
            lines.push_str(&serde_json::to_string(t).expect("tasks serialize"));
            lines.push('\n');
        }
        let path = dir.join(format!("{name}_tasks.jsonl"));
        std::fs::write(&path, lines).map_err(|e| BundleError::io(&path, e))?;
        let path = dir.join(format!("{name}_script.json"));
        let text = serde_json::to_string_pretty(&script).expect("scripts serialize") + "\n";
        std::fs::write(&path, text).map_err(|e| BundleError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] crate::trajectory::StoreError),
}

impl BundleError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        BundleError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Outcome of training both toy roles with one λ and evaluating the composed models.
#[derive(Debug, Clone, Serialize)]
pub struct ToyRun {
    pub lambda: f64,
    pub reports: Vec<TrainReport>,
    pub eval: ClarityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToyExperiment {
    pub train_accepted: usize,
    pub test_cases: usize,
    /// Evaluation with every role on the untrained base.
    pub base: ClarityReport,
    pub runs: Vec<ToyRun>,
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error(transparent)]
    Store(#[from] crate::trajectory::StoreError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

/// Evaluation settings of the toy experiment: overstepping is judged by the
/// embedding argmax alone, since the test dialogues are all well formatted.
pub fn toy_eval_options() -> EvalOptions {
    EvalOptions {
        judge: OverstepJudgeConfig {
            method: JudgeMethod::AssignmentArgmax,
            rule: toy_rule(),
            encoder_checkpoint: None,
        },
        clarity: ClarityConfig::default(),
        include_cases: false,
    }
}

/// Collects both toy corpora into `dir`, trains a CEO and a CPO adapter for each
/// λ in `lambdas` (other settings from `config`), and evaluates every pair on
/// the held-out test corpus.
pub fn toy_experiment(dir: &Path, lambdas: &[f64], config: &TrainConfig) -> Result<ToyExperiment, ExperimentError> {
    let train_path = dir.join("toy_train.jsonl");
    let test_path = dir.join("toy_test.jsonl");
    for p in [&train_path, &test_path] {
        if p.exists() {
            std::fs::remove_file(p).map_err(|e| crate::gateway::GatewayError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
        }
    }
    let train = collect_toy_corpus(&CorpusSpec::train(), &train_path)?.filtered.accepted;
    collect_toy_corpus(&CorpusSpec::test(), &test_path)?;
    let registry = toy_registry();
    let test = crate::trajectory::load_trajectories(&test_path, &registry)?;
    let options = toy_eval_options();

    let base = AgentModel::new(ModelConfig::default(), LoraConfig::toy())?;
    let base_report = evaluate(&test, &registry, &EvalModels::new(base.clone(), BTreeMap::new())?, &options)?;
    let mut runs = Vec::new();
    for &lambda in lambdas {
        let cfg = TrainConfig { lambda, ..*config };
        let (models, reports) = train_all_roles(&base, &train, &registry, &cfg)?;
        let eval = evaluate(&test, &registry, &EvalModels::new(base.clone(), models)?, &options)?;
        log::info!("lambda {lambda}: composed clarity {:.6}", eval.clarity_score_mean);
        runs.push(ToyRun { lambda, reports, eval });
    }
    Ok(ToyExperiment {
        train_accepted: train.len(),
        test_cases: test.len(),
        base: base_report,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabularies_are_disjoint_and_token_free() {
        for w in CEO_WORDS {
            assert!(!CPO_WORDS.contains(&w));
        }
        for w in CEO_WORDS.iter().chain(&CPO_WORDS).chain(&APPS).chain(&ADJECTIVES) {
            assert!(!w.contains("INFO"));
        }
    }

    #[test]
    fn train_corpus_has_about_two_hundred_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("train.jsonl");
        let o = collect_toy_corpus(&CorpusSpec::train(), &out).unwrap();
        let n = o.filtered.accepted.len();
        assert!((180..=220).contains(&n), "accepted {n}");
        assert!(o.failed.is_empty());
        let again = dir.path().join("again.jsonl");
        collect_toy_corpus(&CorpusSpec::train(), &again).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn bundled_data_matches_generator() {
        let dir = tempfile::tempdir().unwrap();
        write_toy_bundle(dir.path()).unwrap();
        let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy");
        for f in BUNDLE_FILES {
            let want = std::fs::read(dir.path().join(f)).unwrap();
            let have = std::fs::read(bundled.join(f)).unwrap_or_default();
            assert!(want == have, "data/toy/{f} is stale; run `cargo run --example toy_corpus`");
        }
    }
}
