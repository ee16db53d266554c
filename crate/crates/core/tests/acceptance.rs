//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test --test acceptance`; exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use role_clarity::clarity::{clarity_matrix, clarity_score, normalize_assignments};
use role_clarity::cli;
use role_clarity::eval::{overstep_rate, quality_q, rate};
use role_clarity::selfcheck::{gradient_probe, identity_probe, merge_probe, Fault};
use role_clarity::synthetic::{toy_experiment, CEO_WORDS, CPO_WORDS};
use role_clarity::tensor::Tensor;
use role_clarity::training::TrainConfig;
use role_clarity::trajectory::{load_trajectories, rejection_filter, FilterRule, RoleRegistry, TokenMode};

const IDENTITY_TOL: f64 = 1e-12;
const IDENTITY_BUDGET_S: f64 = 10.0;
const SIGMOID_ONE: f64 = 0.731059;
const SIGMOID_TOL: f64 = 1e-6;
const UNIFORM2_TOL: f64 = 1e-12;
const UNIFORM3_TOL: f64 = 1e-9;
const TABLE_TOL: f64 = 5e-5;
const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_SEEDS: u64 = 20;
const GRADIENT_BUDGET_S: f64 = 60.0;
const MERGE_TOL: f64 = 1e-10;
const MERGE_PROBES: usize = 1000;
const TOY_BUDGET_S: f64 = 300.0;

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn check(id: &'static str, passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        passed,
        detail: detail.into(),
    }
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn metric_identities() -> Vec<Outcome> {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    let mut total = 0;
    for seed in 0..3 {
        let p = identity_probe(seed, 1000);
        worst = worst.max(p.max_decomposition_error);
        violations += p.bound_violations;
        total += p.matrices;
    }
    let secs = t.elapsed().as_secs_f64();
    vec![
        check(
            "1  decomposition",
            total >= 1000 && worst <= IDENTITY_TOL,
            format!("{total} matrices, max |direct - decomposed| = {worst:.2e} (tol {IDENTITY_TOL:e})"),
        ),
        check("1  diagonal bound", violations == 0, format!("{violations} violations")),
        check(
            "1  runtime",
            secs < IDENTITY_BUDGET_S,
            format!("{secs:.2}s (budget {IDENTITY_BUDGET_S}s)"),
        ),
    ]
}

fn analytic_fixtures() -> Vec<Outcome> {
    let p = normalize_assignments(&Tensor::identity(2), 1.0).unwrap();
    let d = p.get(0, 0);
    let u2 = clarity_matrix(&Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap()).unwrap();
    let third = 1.0 / 3.0;
    let u3 = clarity_matrix(&Tensor::from_rows(&[[third; 3]; 3]).unwrap()).unwrap();
    let c = clarity_score(0.8769);
    vec![
        check(
            "2  softmax of identity",
            (d - SIGMOID_ONE).abs() <= SIGMOID_TOL && (p.get(1, 1) - SIGMOID_ONE).abs() <= SIGMOID_TOL,
            format!("diagonal {d:.9} vs {SIGMOID_ONE} +/- {SIGMOID_TOL:e}"),
        ),
        check(
            "2  uniform 2x2",
            (u2.frob - 1.0).abs() <= UNIFORM2_TOL && (clarity_score(u2.frob) - 0.5).abs() <= UNIFORM2_TOL,
            format!("||M|| = {:.15}, C = {:.15}", u2.frob, clarity_score(u2.frob)),
        ),
        check(
            "2  uniform 3x3",
            (u3.frob - 2f64.sqrt()).abs() <= UNIFORM3_TOL,
            format!("||M|| = {:.12} vs sqrt(2)", u3.frob),
        ),
        check(
            "2  score inversion",
            (c - 0.5328).abs() <= TABLE_TOL,
            format!("C(0.8769) = {c:.6} vs 0.5328 +/- {TABLE_TOL:e}"),
        ),
    ]
}

fn published_arithmetic() -> Vec<Outcome> {
    let q1 = quality_q(0.7272, 0.9561, 0.3894).unwrap();
    let q2 = quality_q(0.7635, 0.8716, 0.3937).unwrap();
    let r1 = rate(42, 500).unwrap();
    let r2 = rate(217, 500).unwrap();
    let mut flags = vec![true; 42];
    flags.resize(500, false);
    let r1b = overstep_rate(&flags).unwrap();
    vec![
        check(
            "3  quality rows",
            (q1 - 0.6909).abs() <= TABLE_TOL && (q2 - 0.6763).abs() <= TABLE_TOL,
            format!("q = {q1:.6}, {q2:.6} vs 0.6909, 0.6763 +/- {TABLE_TOL:e}"),
        ),
        check(
            "3  overstep totals",
            r1 == 0.084 && r2 == 0.434 && r1b == 0.084,
            format!("42/500 = {r1}, 217/500 = {r2}, from flags {r1b}"),
        ),
    ]
}

fn gradient_suite() -> Vec<Outcome> {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut frozen: f64 = 0.0;
    let mut error = None;
    for seed in 0..GRADIENT_SEEDS {
        match gradient_probe(seed, Fault::None) {
            Ok(p) => {
                worst = worst.max(p.max_rel_error);
                frozen = frozen.max(p.frozen_grad_max);
            }
            Err(e) => error = Some(format!("seed {seed}: {e}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let caught = gradient_probe(0, Fault::GradientBug)
        .map(|p| p.max_rel_error > GRADIENT_TOL)
        .unwrap_or(false);
    vec![
        check(
            "4  loss gradient",
            error.is_none() && worst <= GRADIENT_TOL,
            error.unwrap_or_else(|| format!("{GRADIENT_SEEDS} seeds, max relative error {worst:.2e} (tol {GRADIENT_TOL:e})")),
        ),
        check("4  frozen gradient", frozen == 0.0, format!("largest frozen gradient {frozen:e}")),
        check("4  negative control", caught, "a 1% gradient defect is detected"),
        check(
            "4  runtime",
            secs < GRADIENT_BUDGET_S,
            format!("{secs:.2}s (budget {GRADIENT_BUDGET_S}s)"),
        ),
    ]
}

fn lora_contract() -> Vec<Outcome> {
    let p = merge_probe(42, MERGE_PROBES);
    vec![
        check("5  zero-init", p.zero_init_identical, "fresh adapters bit-identical to base"),
        check(
            "5  merge",
            p.probes == MERGE_PROBES && p.max_merge_error <= MERGE_TOL,
            format!("{} probes, max difference {:.2e} (tol {MERGE_TOL:e})", p.probes, p.max_merge_error),
        ),
    ]
}

fn toy_fine_tuning() -> Vec<Outcome> {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let config = TrainConfig {
        seed: 42,
        ..TrainConfig::toy()
    };
    let exp = match toy_experiment(dir.path(), &[0.1, 0.0], &config) {
        Ok(e) => e,
        Err(e) => return vec![check("6  toy experiment", false, e.to_string())],
    };
    let secs = t.elapsed().as_secs_f64();
    let rc = &exp.runs[0].eval;
    let mle = &exp.runs[1].eval;
    let disjoint = CEO_WORDS.iter().all(|w| !CPO_WORDS.contains(w));
    vec![
        check(
            "6  corpus",
            disjoint && (180..=220).contains(&exp.train_accepted),
            format!("{} accepted training dialogues, disjoint vocabularies {disjoint}", exp.train_accepted),
        ),
        check(
            "6a clarity rises",
            rc.clarity_score_mean > exp.base.clarity_score_mean && rc.clarity_score_mean > mle.clarity_score_mean,
            format!(
                "C: lambda 0.1 {:.5}, before training {:.5}, lambda 0 {:.5}",
                rc.clarity_score_mean, exp.base.clarity_score_mean, mle.clarity_score_mean
            ),
        ),
        check(
            "6b overstepping",
            rc.overstep_rate_strict <= mle.overstep_rate_strict,
            format!(
                "argmax overstep rate: lambda 0.1 {:.3}, lambda 0 {:.3}",
                rc.overstep_rate_strict, mle.overstep_rate_strict
            ),
        ),
        check("6c runtime", secs < TOY_BUDGET_S, format!("{secs:.1}s (budget {TOY_BUDGET_S}s)")),
    ]
}

fn rejection_contract() -> Vec<Outcome> {
    let fixture = crate_dir().join("tests/fixtures/filter_golden");
    let registry = RoleRegistry::load(&fixture.join("roles.json")).unwrap();
    let corpus = load_trajectories(&fixture.join("corpus.jsonl"), &registry).unwrap();
    let labels: BTreeMap<String, BTreeMap<String, bool>> =
        serde_json::from_str(&std::fs::read_to_string(fixture.join("labels.json")).unwrap()).unwrap();
    let rule = FilterRule::new(TokenMode::Strict, vec!["CEO".into(), "CPO".into()]);
    let strict = rejection_filter(&corpus, &rule);
    let relaxed = rejection_filter(&corpus, &rule.with_mode(TokenMode::Relaxed));
    let ids = |ts: &[role_clarity::trajectory::Trajectory]| ts.iter().map(|t| t.run_id().to_string()).collect::<Vec<_>>();
    let s_ids = ids(&strict.accepted);
    let r_ids = ids(&relaxed.accepted);

    let mut mismatches = Vec::new();
    for t in &corpus {
        let want = &labels[t.run_id()];
        let got_s = s_ids.iter().any(|i| i == t.run_id());
        let got_r = r_ids.iter().any(|i| i == t.run_id());
        if want["strict"] != got_s || want["relaxed"] != got_r {
            mismatches.push(t.run_id().to_string());
        }
    }
    let again_s = rejection_filter(&strict.accepted, &rule);
    let again_r = rejection_filter(&relaxed.accepted, &rule.with_mode(TokenMode::Relaxed));
    vec![
        check(
            "7  subset",
            s_ids.iter().all(|i| r_ids.contains(i)),
            format!("strict {} of {}, relaxed {}", s_ids.len(), corpus.len(), r_ids.len()),
        ),
        check(
            "7  idempotent",
            again_s.accepted == strict.accepted
                && again_s.rejected.is_empty()
                && again_r.accepted == relaxed.accepted
                && again_r.rejected.is_empty(),
            "refiltering accepted sets changes nothing",
        ),
        check(
            "7  golden labels",
            labels.len() == 20 && corpus.len() == 20 && mismatches.is_empty(),
            format!("{} hand-labeled cases, mismatches {mismatches:?}", labels.len()),
        ),
    ]
}

fn run_cli(args: &[&str]) -> i32 {
    cli::run(std::iter::once("role-clarity").chain(args.iter().copied()))
}

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
    }
    out
}

fn determinism() -> Vec<Outcome> {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let toy = crate_dir().join("data/toy");
    let p = |name: &str| d.join(name).display().to_string();
    let roles = toy.join("roles.json").display().to_string();
    let tasks = toy.join("test_tasks.jsonl").display().to_string();
    let script = toy.join("test_script.json").display().to_string();

    // each command runs twice with identical flags; outputs are removed in between
    let mut codes = Vec::new();
    let collect = ["collect", "--mock", &script, "--tasks", &tasks, "--roles", &roles, "--rounds", "4", "--out", &p("c.jsonl")];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_file(d.join("c.jsonl"));
        codes.push(run_cli(&collect));
        runs.push(std::fs::read(d.join("c.jsonl")).unwrap_or_default());
    }
    let collect_same = !runs[0].is_empty() && runs[0] == runs[1];

    let train = [
        "train", "--seed", "7", "--data", &p("c.jsonl"), "--roles", &roles, "--agent", "CEO", "--epochs", "1",
        "--validation-size", "10", "--checkpoint-every", "20", "--ckpt", &p("ck"),
    ];
    let mut trees = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_dir_all(d.join("ck"));
        codes.push(run_cli(&train));
        trees.push(if d.join("ck").is_dir() { tree_bytes(&d.join("ck")) } else { BTreeMap::new() });
    }
    let train_same = !trees[0].is_empty() && trees[0] == trees[1];

    let eval = ["eval", "--data", &p("c.jsonl"), "--roles", &roles, "--ckpt", &p("ck"), "--report", &p("r.json"), "--csv", &p("r.csv")];
    let mut reports = Vec::new();
    for _ in 0..2 {
        let _ = std::fs::remove_file(d.join("r.json"));
        codes.push(run_cli(&eval));
        let mut bytes = std::fs::read(d.join("r.json")).unwrap_or_default();
        bytes.extend(std::fs::read(d.join("r.csv")).unwrap_or_default());
        reports.push(bytes);
    }
    let eval_same = !reports[0].is_empty() && reports[0] == reports[1];
    let ok = codes.iter().all(|c| *c == 0);
    vec![
        check("8  collect", ok && collect_same, "mock-backed reruns byte-identical"),
        check("8  train", ok && train_same, "checkpoints, manifest, report and merged model byte-identical"),
        check("8  eval", ok && eval_same, format!("reports byte-identical; exit codes {codes:?}")),
    ]
}

fn main() {
    let groups: [(&str, fn() -> Vec<Outcome>); 8] = [
        ("metric identities", metric_identities),
        ("analytic fixtures", analytic_fixtures),
        ("published arithmetic", published_arithmetic),
        ("gradient suite", gradient_suite),
        ("LoRA contract", lora_contract),
        ("toy fine-tuning", toy_fine_tuning),
        ("rejection sampling", rejection_contract),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in groups {
        println!("== {name}");
        for o in f() {
            println!("{} [{}] {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.detail);
            failed += usize::from(!o.passed);
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
