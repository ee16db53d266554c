use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::mpsc;

use role_clarity::cli::{self, EXIT_DATA, EXIT_INVARIANT, EXIT_OK, EXIT_TRANSPORT, EXIT_USAGE};
use role_clarity::trajectory::{load_trajectories, RoleRegistry};
use serde_json::Value;

const GOLDEN: &str = "tests/fixtures/filter_golden";
const TOY: &str = "data/toy";

fn run(args: &[&str]) -> i32 {
    cli::run(std::iter::once("role-clarity").chain(args.iter().copied()))
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("t.jsonl"));
    let tasks = format!("{TOY}/test_tasks.jsonl");
    let script = format!("{TOY}/test_script.json");
    assert_eq!(run(&["collect", "--mock", &script, "--tasks", &tasks, "--out", &out]), EXIT_USAGE);
    assert!(!dir.path().join("t.jsonl").exists());
    assert_eq!(run(&["collect", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(run(&["filter", "--mode", "sloppy"]), EXIT_USAGE);
    assert_eq!(run(&["--help"]), EXIT_OK);
}

#[test]
fn filter_modes_and_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let roles = format!("{GOLDEN}/roles.json");
    let corpus = format!("{GOLDEN}/corpus.jsonl");
    for mode in ["strict", "relaxed"] {
        let code = run(&[
            "filter", "--in", &corpus, "--roles", &roles, "--required", "CEO,CPO", "--mode", mode, "--accepted",
            &s(&d.join(format!("{mode}.jsonl"))), "--rejected", &s(&d.join(format!("{mode}-rej.jsonl"))),
            "--summary", &s(&d.join(format!("{mode}.json"))),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    let registry = RoleRegistry::load(Path::new(&roles)).unwrap();
    let ids = |f: &str| -> Vec<String> {
        load_trajectories(&d.join(f), &registry)
            .unwrap()
            .iter()
            .map(|t| t.run_id().to_string())
            .collect()
    };
    let strict = ids("strict.jsonl");
    let relaxed = ids("relaxed.jsonl");
    assert!(strict.iter().all(|r| relaxed.contains(r)));
    assert!(!strict.contains(&"run-g02".to_string()));
    assert!(relaxed.contains(&"run-g02".to_string()));
    assert_eq!(strict.len() + ids("strict-rej.jsonl").len(), 20);

    let summary = read_json(&d.join("strict.json"));
    assert_eq!(summary["command"], "filter");
    assert_eq!(summary["resolved"]["rule"]["mode"], "strict");
    let reasons = &summary["result"]["rejected"][0]["reasons"];
    assert!(reasons.as_array().is_some_and(|r| !r.is_empty()));

    let empty = d.join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let acc = d.join("empty-acc.jsonl");
    assert_eq!(run(&["filter", "--in", &s(&empty), "--roles", &roles, "--accepted", &s(&acc)]), EXIT_OK);
    assert_eq!(std::fs::read(&acc).unwrap(), b"");

    let bad = d.join("bad.jsonl");
    std::fs::write(&bad, "{\"run_id\": 3}\n").unwrap();
    assert_eq!(run(&["filter", "--in", &s(&bad), "--roles", &roles, "--accepted", &s(&acc)]), EXIT_DATA);
}

#[test]
fn custom_token_in_strict_mode() {
    let dir = tempfile::tempdir().unwrap();
    let roles = format!("{GOLDEN}/roles.json");
    let corpus = format!("{GOLDEN}/corpus.jsonl");
    let acc = dir.path().join("a.jsonl");
    let code = run(&[
        "filter", "--in", &corpus, "--roles", &roles, "--required", "CEO,CPO", "--token", "[INFO]", "--accepted",
        &s(&acc),
    ]);
    assert_eq!(code, EXIT_OK);
    let registry = RoleRegistry::load(Path::new(&roles)).unwrap();
    // only g04 has a bracketed CEO token, and its CPO uses the angle form
    assert!(load_trajectories(&acc, &registry).unwrap().is_empty());
    assert_eq!(
        run(&["filter", "--in", &corpus, "--roles", &roles, "--token", "DONE", "--accepted", &s(&acc)]),
        EXIT_USAGE
    );
}

fn collect_toy(dir: &Path) -> String {
    let out = dir.join("test.jsonl");
    let code = run(&[
        "collect", "--mock", &format!("{TOY}/test_script.json"), "--tasks", &format!("{TOY}/test_tasks.jsonl"),
        "--roles", &format!("{TOY}/roles.json"), "--rounds", "4", "--out", &s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    s(&out)
}

#[test]
fn train_lambda_zero_reports_pure_mle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = collect_toy(d);
    let roles = format!("{TOY}/roles.json");
    for (lambda, ck) in [("0", "l0"), ("0.1", "l1")] {
        let code = run(&[
            "train", "--seed", "3", "--data", &data, "--roles", &roles, "--agent", "CPO", "--lambda", lambda,
            "--epochs", "1", "--validation-size", "10", "--ckpt", &s(&d.join(ck)),
        ]);
        assert_eq!(code, EXIT_OK);
    }
    let r0 = read_json(&d.join("l0/report.json"));
    let r1 = read_json(&d.join("l1/report.json"));
    assert_ne!(r0["result"], r1["result"]);
    assert_eq!(r0["resolved"]["train"]["lambda"], 0.0);
    assert_eq!(r0["resolved"]["seed"], 3);
    for step in r0["result"]["steps"].as_array().unwrap() {
        assert_eq!(step["total"], step["mle"]);
    }
    for f in ["manifest.json", "merged.ckpt", "step-000050.ckpt"] {
        assert!(d.join("l0").join(f).exists(), "{f}");
    }
    let code = run(&[
        "eval", "--data", &data, "--roles", &roles, "--ckpt", &format!("CPO={}", s(&d.join("l1/step-000050.ckpt"))),
        "--report", &s(&d.join("r.json")),
    ]);
    assert_eq!(code, EXIT_OK);
    let r = read_json(&d.join("r.json"));
    assert!(r["result"]["base_clarity_score_mean"].is_number());
    assert_eq!(
        run(&["train", "--data", &data, "--roles", &roles, "--agent", "CFO", "--ckpt", &s(&d.join("x"))]),
        EXIT_USAGE
    );
}

#[test]
fn config_file_is_merged_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = collect_toy(d);
    let cfg = d.join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 11\n[train]\ndata = \"{data}\"\nroles = \"{TOY}/roles.json\"\nagent = \"CEO\"\nepochs = 2\nlambda = 0.5\nvalidation_size = 10\n"
        ),
    )
    .unwrap();
    let ck = d.join("ck");
    let code = run(&["--config", &s(&cfg), "train", "--epochs", "1", "--ckpt", &s(&ck)]);
    assert_eq!(code, EXIT_OK);
    let r = read_json(&ck.join("report.json"));
    assert_eq!(r["resolved"]["seed"], 11);
    assert_eq!(r["resolved"]["train"]["lambda"], 0.5);
    assert_eq!(r["resolved"]["train"]["epochs"], 1);
    assert_eq!(r["result"]["config"]["seed"], 11);

    std::fs::write(&cfg, "[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(run(&["--config", &s(&cfg), "train"]), EXIT_USAGE);
    std::fs::write(&cfg, "[deploy]\nx = 1\n").unwrap();
    assert_eq!(run(&["--config", &s(&cfg), "selfcheck"]), EXIT_USAGE);
}

#[test]
fn eval_golden_base_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("base.json");
    let csv = dir.path().join("base.csv");
    let code = run(&[
        "eval", "--data", &format!("{GOLDEN}/corpus.jsonl"), "--roles", &format!("{GOLDEN}/roles.json"),
        "--required", "CEO,CPO", "--judge", "token-format", "--report", &s(&report), "--csv", &s(&csv),
    ]);
    assert_eq!(code, EXIT_OK);
    let got = read_json(&report)["result"].clone();
    let golden_path = Path::new("tests/fixtures/eval_golden/base_result.json");
    let golden = read_json(golden_path);
    assert_eq!(got, golden, "base report drifted from {}", golden_path.display());
    // strict token judging flags every case the strict filter rejects
    assert_eq!(got["overstep_count_strict"], 14);
    assert_eq!(got["overstep_count_relaxed"], 8);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("scope,n_cases"));
}

#[test]
fn selfcheck_exit_codes() {
    assert_eq!(run(&["selfcheck", "--seed", "42"]), EXIT_OK);
    assert_eq!(run(&["selfcheck", "--seed", "0", "--seeds", "100"]), EXIT_OK);
    assert_eq!(run(&["selfcheck", "--seed", "42", "--inject-fault", "gradient"]), EXIT_INVARIANT);
}

/// Serves `n` chat completions that end the dialogue at once and reports each request body.
fn completion_server(n: usize) -> (String, mpsc::Receiver<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for _ in 0..n {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut chunk = [0u8; 4096];
            let start = loop {
                let k = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..k]);
                if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    break p + 4;
                }
            };
            let head = String::from_utf8_lossy(&buf[..start]).to_lowercase();
            let len: usize = head
                .lines()
                .find_map(|l| l.strip_prefix("content-length:"))
                .map(|v| v.trim().parse().unwrap())
                .unwrap_or(0);
            while buf.len() < start + len {
                let k = sock.read(&mut chunk).unwrap();
                buf.extend_from_slice(&chunk[..k]);
            }
            tx.send(String::from_utf8_lossy(&buf[start..]).into_owned()).unwrap();
            let body = r#"{"choices":[{"message":{"role":"assistant","content":"<INFO> agreed"}}]}"#;
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            sock.write_all(resp.as_bytes()).unwrap();
        }
    });
    (format!("http://{addr}"), rx)
}

#[test]
fn collect_over_http_forwards_temperature() {
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.jsonl");
    std::fs::write(&tasks, "{\"task_id\": \"t1\", \"prompt\": \"Build a timer.\"}\n").unwrap();
    let (url, bodies) = completion_server(2);
    let out = dir.path().join("out.jsonl");
    let code = run(&[
        "collect", "--tasks", &s(&tasks), "--roles", &format!("{TOY}/roles.json"), "--out", &s(&out), "--base-url",
        &url, "--api-key-env", "PATH", "--temperature", "0.0", "--retries", "0",
    ]);
    assert_eq!(code, EXIT_OK);
    for _ in 0..2 {
        let body: Value = serde_json::from_str(&bodies.recv().unwrap()).unwrap();
        assert_eq!(body["temperature"].as_f64(), Some(0.0));
    }
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn unreachable_endpoint_exits_three() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let dir = tempfile::tempdir().unwrap();
    let tasks = dir.path().join("tasks.jsonl");
    std::fs::write(&tasks, "{\"task_id\": \"t1\", \"prompt\": \"Build a timer.\"}\n").unwrap();
    let code = run(&[
        "collect", "--tasks", &s(&tasks), "--roles", &format!("{TOY}/roles.json"), "--out",
        &s(&dir.path().join("o.jsonl")), "--base-url", &format!("http://127.0.0.1:{port}"), "--api-key-env", "PATH",
        "--retries", "0", "--timeout", "2",
    ]);
    assert_eq!(code, EXIT_TRANSPORT);
}
