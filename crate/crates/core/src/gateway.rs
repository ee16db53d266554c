//! Two-role dialogue collection against a chat-completions endpoint or a
//! scripted in-process mock.
//!
//! One round is one exchange: the initiating role speaks, then the responding
//! role replies. A dialogue stops after the first round in which any message
//! carries the relaxed termination token, or after `max_rounds` rounds.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::trajectory::{self, FilterOutcome, FilterRule, Message, RoleDescription, RoleRegistry, Trajectory};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("run {run_id}: {source}")]
    Dialogue {
        run_id: String,
        #[source]
        source: Box<GatewayError>,
    },
    #[error("invalid gateway configuration: {0}")]
    Config(String),
    #[error("dialogue script: {0}")]
    Script(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] trajectory::StoreError),
}

impl GatewayError {
    /// True for failures caused by the endpoint rather than local data.
    pub fn is_transport(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::Malformed(_) => true,
            GatewayError::Dialogue { source, .. } => source.is_transport(),
            _ => false,
        }
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

fn io_err(path: &Path, source: std::io::Error) -> GatewayError {
    GatewayError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer key.
    pub api_key_env: Option<String>,
    /// Sampling temperature sent on the wire.
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_rounds: u32,
    pub timeout_secs: f64,
    /// Extra attempts after the first failure.
    pub retries: u32,
    pub backoff_ms: u64,
    /// Dialogues in flight at once.
    pub concurrency: usize,
    /// `{role_id}` and `{description}` are substituted.
    pub system_template: String,
    /// `{task}` is substituted.
    pub task_template: String,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            temperature: 0.2,
            max_tokens: 512,
            max_rounds: 10,
            timeout_secs: 60.0,
            retries: 3,
            backoff_ms: 500,
            concurrency: 1,
            system_template: "You are the {role_id}. {description}".into(),
            task_template: "Task: {task}".into(),
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_rounds < 1 {
            return Err(GatewayError::Config("max_rounds must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Config("temperature must be >= 0".into()));
        }
        if self.concurrency == 0 {
            return Err(GatewayError::Config("concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Who is speaking, and where in the dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn<'a> {
    pub task_id: &'a str,
    pub task: &'a str,
    pub role_id: &'a str,
    pub round: u32,
}

pub trait ChatBackend: Sync {
    fn complete(&self, turn: &Turn, request: &ChatRequest) -> Result<String>;
}

/// Chat-completions client over HTTP with bearer auth and bounded retries.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    key: Option<String>,
    retries: u32,
    backoff: Duration,
}

impl HttpBackend {
    pub fn new(config: &EndpointConfig) -> Result<Self> {
        config.validate()?;
        let key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            key,
            retries: config.retries,
            backoff: Duration::from_millis(config.backoff_ms),
        })
    }

    fn attempt(&self, request: &ChatRequest) -> Result<String> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status == 429 || status >= 500 {
            return Err(GatewayError::Transport(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(GatewayError::Config(format!("HTTP {status}: {body}")));
        }
        parse_completion(&body)
    }
}

/// Extracts `choices[0].message.content` from a chat-completions response body.
pub fn parse_completion(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| GatewayError::Malformed(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Malformed("missing choices[0].message.content".into()))
}

impl ChatBackend for HttpBackend {
    fn complete(&self, _turn: &Turn, request: &ChatRequest) -> Result<String> {
        let mut last = None;
        for attempt in 0..=self.retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff * attempt);
            }
            match self.attempt(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transport() => {
                    log::warn!("attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhenExhausted {
    /// Keep sending the final reply.
    #[default]
    RepeatLast,
    Cycle,
}

/// Canned replies for the mock backend. Reply `k` (1-based round) of a role is
/// entry `k − 1`; `{task}` and `{round}` are substituted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DialogueScript {
    pub replies: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub when_exhausted: WhenExhausted,
    /// Per-task replacements of `replies`, keyed by task id then role id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tasks: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

impl DialogueScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| GatewayError::Script(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.replies.iter().chain(self.tasks.values().flat_map(|m| m.iter()));
        for (role, lines) in all {
            if lines.is_empty() {
                return Err(GatewayError::Script(format!("role {role} has no replies")));
            }
        }
        Ok(())
    }
}

pub struct ScriptedBackend {
    script: DialogueScript,
}

impl ScriptedBackend {
    pub fn new(script: DialogueScript) -> Result<Self> {
        script.validate()?;
        Ok(Self { script })
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, turn: &Turn, _request: &ChatRequest) -> Result<String> {
        let lines = self
            .script
            .tasks
            .get(turn.task_id)
            .and_then(|m| m.get(turn.role_id))
            .or_else(|| self.script.replies.get(turn.role_id))
            .ok_or_else(|| GatewayError::Script(format!("no replies for role {}", turn.role_id)))?;
        let k = turn.round as usize - 1;
        let line = match self.script.when_exhausted {
            WhenExhausted::RepeatLast => &lines[k.min(lines.len() - 1)],
            WhenExhausted::Cycle => &lines[k % lines.len()],
        };
        Ok(line.replace("{task}", turn.task).replace("{round}", &turn.round.to_string()))
    }
}

/// One line of a tasks file. Extra fields are copied onto every message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub prompt: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line)
            .map_err(|e| GatewayError::Config(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(task);
    }
    Ok(out)
}

pub fn run_id_for(task_id: &str) -> String {
    format!("run-{task_id}")
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .fold(template.to_string(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
}

fn request_for(endpoint: &EndpointConfig, task: &Task, speaker: &RoleDescription, history: &[Message]) -> ChatRequest {
    let mut messages = vec![
        ChatMessage {
            role: "system".into(),
            content: fill(
                &endpoint.system_template,
                &[("role_id", &speaker.role_id), ("description", &speaker.description)],
            ),
        },
        ChatMessage {
            role: "user".into(),
            content: fill(&endpoint.task_template, &[("task", &task.prompt)]),
        },
    ];
    for m in history {
        let role = if m.role_id == speaker.role_id { "assistant" } else { "user" };
        messages.push(ChatMessage {
            role: role.into(),
            content: m.content.clone(),
        });
    }
    ChatRequest {
        model: endpoint.model.clone(),
        messages,
        temperature: endpoint.temperature,
        max_tokens: endpoint.max_tokens,
    }
}

/// Runs one dialogue; `roles[0]` opens every round.
pub fn run_dialogue(
    task: &Task,
    roles: &[RoleDescription; 2],
    backend: &dyn ChatBackend,
    endpoint: &EndpointConfig,
) -> Result<Trajectory> {
    endpoint.validate()?;
    let run_id = run_id_for(&task.task_id);
    let wrap = |e: GatewayError| GatewayError::Dialogue {
        run_id: run_id.clone(),
        source: Box::new(e),
    };
    let mut history: Vec<Message> = Vec::new();
    for round in 1..=endpoint.max_rounds {
        let mut done = false;
        for speaker in roles {
            let turn = Turn {
                task_id: &task.task_id,
                task: &task.prompt,
                role_id: &speaker.role_id,
                round,
            };
            let request = request_for(endpoint, task, speaker, &history);
            let content = backend.complete(&turn, &request).map_err(wrap)?;
            let agent_id = speaker.role_id.to_lowercase();
            let mut msg = Message::new(&run_id, &task.task_id, round, &agent_id, &speaker.role_id, &content);
            msg.extra = task.extra.clone();
            done |= msg.terminated;
            history.push(msg);
        }
        if done {
            break;
        }
    }
    Trajectory::new(history).map_err(|issue| wrap(GatewayError::Script(issue.to_string())))
}

/// Result of [`collect_dataset`].
#[derive(Debug, Clone, Default)]
pub struct CollectOutcome {
    pub filtered: FilterOutcome,
    /// Task ids already present in the output file.
    pub skipped: Vec<String>,
    pub failed: Vec<FailedTask>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FailedTask {
    pub task_id: String,
    pub error: String,
    /// The endpoint, not local data, caused the failure.
    pub transport: bool,
}

/// Runs every task, appends finished dialogues to `out` in task order, and
/// filters everything present in `out` that belongs to `tasks`.
///
/// Tasks whose run already appears in `out` are skipped, so an interrupted
/// collection resumes where it stopped.
pub fn collect_dataset(
    tasks: &[Task],
    roles: &[RoleDescription; 2],
    backend: &dyn ChatBackend,
    endpoint: &EndpointConfig,
    rule: &FilterRule,
    out: &Path,
) -> Result<CollectOutcome> {
    endpoint.validate()?;
    if tasks.is_empty() {
        return Err(GatewayError::Config("no tasks".into()));
    }
    let registry = RoleRegistry::new(roles.to_vec())?;
    let existing = if out.exists() {
        trajectory::load_trajectories(out, &registry)?
    } else {
        Vec::new()
    };
    let done: HashSet<String> = existing.iter().map(|t| t.task_id().to_string()).collect();
    let mut outcome = CollectOutcome::default();
    let pending: Vec<&Task> = tasks
        .iter()
        .filter(|t| {
            let skip = done.contains(&t.task_id);
            if skip {
                outcome.skipped.push(t.task_id.clone());
            }
            !skip
        })
        .collect();
    if !outcome.skipped.is_empty() {
        log::info!("resuming: {} task(s) already collected", outcome.skipped.len());
    }

    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .map_err(|e| io_err(out, e))?;
    let mut writer = std::io::BufWriter::new(file);
    let mut fresh = Vec::new();
    for (chunk_no, chunk) in pending.chunks(endpoint.concurrency).enumerate() {
        let results: Vec<Result<Trajectory>> = if chunk.len() == 1 {
            vec![run_dialogue(chunk[0], roles, backend, endpoint)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|t| s.spawn(move || run_dialogue(t, roles, backend, endpoint)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("dialogue thread panicked")).collect()
            })
        };
        for (task, result) in chunk.iter().zip(results) {
            match result {
                Ok(t) => {
                    trajectory::write_trajectories(&mut writer, std::slice::from_ref(&t)).map_err(|e| io_err(out, e))?;
                    fresh.push(t);
                }
                Err(e) => {
                    log::error!("task {} failed: {e}", task.task_id);
                    outcome.failed.push(FailedTask {
                        task_id: task.task_id.clone(),
                        error: e.to_string(),
                        transport: e.is_transport(),
                    });
                }
            }
        }
        writer.flush().map_err(|e| io_err(out, e))?;
        log::info!(
            "collected {}/{} task(s)",
            ((chunk_no + 1) * endpoint.concurrency).min(pending.len()),
            pending.len()
        );
    }

    let wanted: HashSet<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
    let all: Vec<Trajectory> = existing
        .into_iter()
        .chain(fresh)
        .filter(|t| wanted.contains(t.task_id()))
        .collect();
    outcome.filtered = trajectory::rejection_filter(&all, rule);
    log::info!(
        "accepted {} of {} ({:.3})",
        outcome.filtered.accepted.len(),
        all.len(),
        outcome.filtered.acceptance_rate()
    );
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TokenMode;
    use std::io::Read;
    use std::net::TcpListener;
    use std::sync::mpsc;

    fn roles() -> [RoleDescription; 2] {
        [
            RoleDescription {
                role_id: "CEO".into(),
                description: "Sets direction.".into(),
            },
            RoleDescription {
                role_id: "CPO".into(),
                description: "Owns the product.".into(),
            },
        ]
    }

    fn task(id: &str) -> Task {
        Task {
            task_id: id.into(),
            prompt: "build a timer".into(),
            extra: Map::new(),
        }
    }

    fn script(ceo: &[&str], cpo: &[&str]) -> ScriptedBackend {
        let mut replies = BTreeMap::new();
        replies.insert("CEO".into(), ceo.iter().map(|s| s.to_string()).collect());
        replies.insert("CPO".into(), cpo.iter().map(|s| s.to_string()).collect());
        ScriptedBackend::new(DialogueScript {
            replies,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn terminates_on_round_three() {
        let b = script(&["a", "b", "<INFO> ok"], &["x", "y", "<INFO> ok"]);
        let t = run_dialogue(&task("t1"), &roles(), &b, &EndpointConfig::default()).unwrap();
        assert_eq!(t.rounds(), 3);
        let flags: Vec<bool> = t.messages().iter().map(|m| m.terminated).collect();
        assert_eq!(flags, vec![false, false, false, false, true, true]);
    }

    #[test]
    fn round_cap() {
        let b = script(&["talk about {task} in round {round}"], &["more"]);
        let t = run_dialogue(&task("t1"), &roles(), &b, &EndpointConfig::default()).unwrap();
        assert_eq!(t.rounds(), 10);
        assert_eq!(t.messages().len(), 20);
        assert_eq!(t.messages()[18].content, "talk about build a timer in round 10");
    }

    #[test]
    fn even_tasks_compliant_and_resume() {
        let mut b = script(&["<INFO> yes"], &["<INFO> yes"]).script;
        for i in (1..10).step_by(2) {
            let mut m = BTreeMap::new();
            m.insert("CPO".to_string(), vec!["maybe".to_string(), "INFO later".to_string()]);
            b.tasks.insert(format!("t{i}"), m);
        }
        let backend = ScriptedBackend::new(b).unwrap();
        let tasks: Vec<Task> = (0..10).map(|i| task(&format!("t{i}"))).collect();
        let rule = FilterRule::new(TokenMode::Strict, vec!["CEO".into(), "CPO".into()]);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("traj.jsonl");
        let o = collect_dataset(&tasks, &roles(), &backend, &EndpointConfig::default(), &rule, &out).unwrap();
        assert_eq!(o.filtered.accepted.len(), 5);
        assert_eq!(o.filtered.acceptance_rate(), 0.5);
        let bytes = fs::read(&out).unwrap();

        let again = collect_dataset(&tasks, &roles(), &backend, &EndpointConfig::default(), &rule, &out).unwrap();
        assert_eq!(again.skipped.len(), 10);
        assert_eq!(fs::read(&out).unwrap(), bytes);
        assert_eq!(again.filtered.accepted.len(), 5);
    }

    /// Serves canned HTTP responses and forwards each request body.
    fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut sock, _) = listener.accept().unwrap();
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                let body_start = loop {
                    let n = sock.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                    if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                        break p + 4;
                    }
                };
                let head = String::from_utf8_lossy(&buf[..body_start]).to_lowercase();
                let len: usize = head
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .map(|v| v.trim().parse().unwrap())
                    .unwrap_or(0);
                while buf.len() < body_start + len {
                    let n = sock.read(&mut chunk).unwrap();
                    buf.extend_from_slice(&chunk[..n]);
                }
                tx.send(String::from_utf8_lossy(&buf[body_start..]).into_owned()).unwrap();
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                sock.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn http_config(base_url: String) -> EndpointConfig {
        EndpointConfig {
            base_url,
            api_key_env: None,
            temperature: 0.0,
            retries: 2,
            backoff_ms: 0,
            timeout_secs: 10.0,
            ..EndpointConfig::default()
        }
    }

    #[test]
    fn http_retries_malformed_and_forwards_temperature() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#.to_string();
        let (url, rx) = serve(vec![(200, "not json".into()), (503, "{}".into()), (200, ok)]);
        let backend = HttpBackend::new(&http_config(url)).unwrap();
        let t = task("t");
        let turn = Turn {
            task_id: "t",
            task: &t.prompt,
            role_id: "CEO",
            round: 1,
        };
        let req = request_for(&http_config(String::new()), &t, &roles()[0], &[]);
        assert_eq!(backend.complete(&turn, &req).unwrap(), "hello");
        let first: Value = serde_json::from_str(&rx.recv().unwrap()).unwrap();
        assert_eq!(first["temperature"], serde_json::json!(0.0));
        assert_eq!(first["messages"][0]["role"], "system");
    }

    #[test]
    fn http_gives_up_after_budget() {
        let (url, _rx) = serve(vec![(200, "{}".into()), (200, "{}".into()), (200, "{}".into())]);
        let backend = HttpBackend::new(&http_config(url)).unwrap();
        let ep = http_config(String::new());
        let err = run_dialogue(&task("t9"), &roles(), &backend, &EndpointConfig { max_rounds: 1, ..ep }).unwrap_err();
        assert!(err.is_transport());
        assert!(err.to_string().contains("run-t9"));
    }
}
