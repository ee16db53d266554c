//! Roles, dialogue trajectories, and the termination-token rejection filter.
//!
//! Trajectory files are JSONL with one [`Message`] per line. Role registries are
//! a single JSON document `{"roles": [{"role_id", "description"}, ...]}`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::seed::{self, Stream};

/// Correctly formatted decision/termination token.
pub const TOKEN_STRICT: &str = "<INFO>";
/// Malformed variant that still carries the decision.
pub const TOKEN_RELAXED: &str = "INFO";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid role registry: {0}")]
    Registry(String),
    #[error("{} invalid record(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<LoadIssue>),
    #[error("dataset of {len} cannot hold out {validation_size} validation examples")]
    DatasetTooSmall { len: usize, validation_size: usize },
}

impl StoreError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        StoreError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// A problem found while loading a trajectory file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoadIssue {
    /// 1-based line number, when the problem belongs to one line.
    pub line: Option<usize>,
    pub run_id: Option<String>,
    pub message: String,
}

impl fmt::Display for LoadIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.line, &self.run_id) {
            (Some(l), _) => write!(f, "line {l}: {}", self.message),
            (None, Some(r)) => write!(f, "run {r}: {}", self.message),
            (None, None) => f.write_str(&self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleDescription {
    pub role_id: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRegistry {
    roles: Vec<RoleDescription>,
}

impl RoleRegistry {
    pub fn new(roles: Vec<RoleDescription>) -> Result<Self, StoreError> {
        let mut seen = BTreeSet::new();
        for r in &roles {
            if r.role_id.trim().is_empty() {
                return Err(StoreError::Registry("empty role_id".into()));
            }
            if r.description.trim().is_empty() {
                return Err(StoreError::Registry(format!("role {} has an empty description", r.role_id)));
            }
            if !seen.insert(r.role_id.as_str()) {
                return Err(StoreError::Registry(format!("duplicate role_id {}", r.role_id)));
            }
        }
        Ok(Self { roles })
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
        let raw: RoleRegistry = serde_json::from_str(&text).map_err(|e| StoreError::Registry(e.to_string()))?;
        Self::new(raw.roles)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(self).expect("registry serializes");
        fs::write(path, text + "\n").map_err(|e| StoreError::io(path, e))
    }

    pub fn roles(&self) -> &[RoleDescription] {
        &self.roles
    }

    pub fn get(&self, role_id: &str) -> Option<&RoleDescription> {
        self.roles.iter().find(|r| r.role_id == role_id)
    }

    pub fn index_of(&self, role_id: &str) -> Option<usize> {
        self.roles.iter().position(|r| r.role_id == role_id)
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }
}

/// One turn of a dialogue. Unknown JSON fields are kept in `extra` and written back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub run_id: String,
    pub task_id: String,
    pub round: u32,
    pub agent_id: String,
    pub role_id: String,
    pub content: String,
    pub terminated: bool,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Message {
    pub fn new(run_id: &str, task_id: &str, round: u32, agent_id: &str, role_id: &str, content: &str) -> Self {
        Self {
            run_id: run_id.to_string(),
            task_id: task_id.to_string(),
            round,
            agent_id: agent_id.to_string(),
            role_id: role_id.to_string(),
            content: content.to_string(),
            terminated: content.contains(TOKEN_RELAXED),
            extra: Map::new(),
        }
    }
}

/// Messages of one run, ordered by round.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    run_id: String,
    messages: Vec<Message>,
}

impl Trajectory {
    /// Validates round contiguity, shared `run_id`, and the terminated flag.
    pub fn new(messages: Vec<Message>) -> Result<Self, LoadIssue> {
        let issue = |run: Option<String>, m: String| LoadIssue {
            line: None,
            run_id: run,
            message: m,
        };
        let first = messages.first().ok_or_else(|| issue(None, "trajectory has no messages".into()))?;
        let run_id = first.run_id.clone();
        if let Some(m) = messages.iter().find(|m| m.run_id != run_id) {
            return Err(issue(Some(run_id), format!("mixed run_id {}", m.run_id)));
        }
        let mut messages = messages;
        messages.sort_by_key(|m| m.round);
        let rounds: BTreeSet<u32> = messages.iter().map(|m| m.round).collect();
        let k = *rounds.iter().next_back().unwrap();
        if rounds.len() as u32 != k || rounds.iter().next() != Some(&1) {
            return Err(issue(Some(run_id), format!("rounds are not contiguous from 1 to {k}")));
        }
        Ok(Self { run_id, messages })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn task_id(&self) -> &str {
        &self.messages[0].task_id
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    /// Number of rounds `K`.
    pub fn rounds(&self) -> u32 {
        self.messages.last().map_or(0, |m| m.round)
    }

    /// Participating agents in order of first appearance.
    pub fn agents(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for m in &self.messages {
            if !out.contains(&m.agent_id.as_str()) {
                out.push(&m.agent_id);
            }
        }
        out
    }

    pub fn role_of(&self, agent_id: &str) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.agent_id == agent_id)
            .map(|m| m.role_id.as_str())
    }

    pub fn messages_by<'a>(&'a self, agent_id: &'a str) -> impl Iterator<Item = &'a Message> + 'a {
        self.messages.iter().filter(move |m| m.agent_id == agent_id)
    }

    /// Last message authored by an agent holding `role_id`.
    pub fn final_message_of_role(&self, role_id: &str) -> Option<&Message> {
        self.messages.iter().rev().find(|m| m.role_id == role_id)
    }

    /// Optional `subset` tag (e.g. `easy` / `hard`) carried as an extra field.
    pub fn subset(&self) -> Option<&str> {
        self.messages.iter().find_map(|m| m.extra.get("subset").and_then(Value::as_str))
    }
}

/// Reads a JSONL trajectory file. Every malformed line is reported with its line number.
pub fn load_trajectories(path: &Path, registry: &RoleRegistry) -> Result<Vec<Trajectory>, StoreError> {
    let file = fs::File::open(path).map_err(|e| StoreError::io(path, e))?;
    let mut issues = Vec::new();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Message>> = HashMap::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| StoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fail = |message: String| {
            issues.push(LoadIssue {
                line: Some(lineno),
                run_id: None,
                message,
            })
        };
        let msg: Message = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                fail(format!("schema violation: {e}"));
                continue;
            }
        };
        if msg.round == 0 {
            fail("round must be >= 1".into());
            continue;
        }
        if msg.run_id.is_empty() || msg.agent_id.is_empty() {
            fail("run_id and agent_id must be nonempty".into());
            continue;
        }
        if registry.get(&msg.role_id).is_none() {
            fail(format!("unknown role_id {}", msg.role_id));
            continue;
        }
        if msg.terminated != msg.content.contains(TOKEN_RELAXED) {
            fail("terminated flag disagrees with content".into());
            continue;
        }
        if !groups.contains_key(&msg.run_id) {
            order.push(msg.run_id.clone());
        }
        groups.entry(msg.run_id.clone()).or_default().push(msg);
    }

    let mut out = Vec::with_capacity(order.len());
    for run in order {
        match Trajectory::new(groups.remove(&run).unwrap_or_default()) {
            Ok(t) => out.push(t),
            Err(issue) => issues.push(issue),
        }
    }
    if issues.is_empty() {
        Ok(out)
    } else {
        Err(StoreError::Invalid(issues))
    }
}

pub fn write_trajectories<W: Write>(mut w: W, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for t in trajectories {
        for m in &t.messages {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), StoreError> {
    let file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_trajectories(&mut w, trajectories)
        .and_then(|_| w.flush())
        .map_err(|e| StoreError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    #[default]
    Strict,
    Relaxed,
}

impl std::str::FromStr for TokenMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "strict" => Ok(TokenMode::Strict),
            "relaxed" => Ok(TokenMode::Relaxed),
            other => Err(format!("unknown token mode {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRule {
    pub token_strict: String,
    pub token_relaxed: String,
    pub mode: TokenMode,
    /// Roles whose final message must carry the decision token.
    pub required_agents: Vec<String>,
    /// Roles allowed to emit the decision token; defaults to `required_agents`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_roles: Option<Vec<String>>,
}

impl FilterRule {
    pub fn new(mode: TokenMode, required_agents: Vec<String>) -> Self {
        Self {
            token_strict: TOKEN_STRICT.to_string(),
            token_relaxed: TOKEN_RELAXED.to_string(),
            mode,
            required_agents,
            decision_roles: None,
        }
    }

    pub fn with_mode(&self, mode: TokenMode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Token demanded by the active mode.
    pub fn token(&self) -> &str {
        match self.mode {
            TokenMode::Strict => &self.token_strict,
            TokenMode::Relaxed => &self.token_relaxed,
        }
    }

    pub fn decision_roles(&self) -> &[String] {
        self.decision_roles.as_deref().unwrap_or(&self.required_agents)
    }

    pub fn validate(&self, registry: &RoleRegistry) -> Result<(), StoreError> {
        if !self.token_strict.contains(self.token_relaxed.as_str()) || self.token_relaxed.is_empty() {
            return Err(StoreError::Registry(
                "strict token must contain the nonempty relaxed token".into(),
            ));
        }
        for r in self.required_agents.iter().chain(self.decision_roles()) {
            if registry.get(r).is_none() {
                return Err(StoreError::Registry(format!("filter names unknown role {r}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenEventKind {
    /// A required role's final message lacks the mode's token.
    MissingDecisionToken,
    /// A role outside the decision roles used the decision token.
    UnauthorizedDecisionToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub round: Option<u32>,
    pub role_id: String,
    pub agent_id: Option<String>,
    #[serde(flatten)]
    pub kind: TokenEventKind,
}

/// Token-format violations of one trajectory under `rule`.
///
/// Unauthorized use is detected with the relaxed token in both modes, so the
/// strict event set always contains the relaxed one.
pub fn token_events(trajectory: &Trajectory, rule: &FilterRule) -> Vec<TokenEvent> {
    let mut events = Vec::new();
    for role in &rule.required_agents {
        match trajectory.final_message_of_role(role) {
            Some(m) if m.content.contains(rule.token()) => {}
            found => events.push(TokenEvent {
                round: found.map(|m| m.round),
                role_id: role.clone(),
                agent_id: found.map(|m| m.agent_id.clone()),
                kind: TokenEventKind::MissingDecisionToken,
            }),
        }
    }
    let allowed = rule.decision_roles();
    for m in trajectory.messages() {
        if !allowed.contains(&m.role_id) && m.content.contains(rule.token_relaxed.as_str()) {
            events.push(TokenEvent {
                round: Some(m.round),
                role_id: m.role_id.clone(),
                agent_id: Some(m.agent_id.clone()),
                kind: TokenEventKind::UnauthorizedDecisionToken,
            });
        }
    }
    events
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    MissingToken { role_id: String, token: String },
    Overstep { role_id: String, round: Option<u32> },
    Schema { detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejected {
    pub trajectory: Trajectory,
    pub reasons: Vec<RejectReason>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub accepted: Vec<Trajectory>,
    pub rejected: Vec<Rejected>,
}

impl FilterOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        let total = self.accepted.len() + self.rejected.len();
        if total == 0 {
            0.0
        } else {
            self.accepted.len() as f64 / total as f64
        }
    }
}

/// Reasons a trajectory fails `rule`; empty means accepted.
pub fn rejection_reasons(trajectory: &Trajectory, rule: &FilterRule) -> Vec<RejectReason> {
    let mut reasons = Vec::new();
    for role in &rule.required_agents {
        if trajectory.final_message_of_role(role).is_none() {
            reasons.push(RejectReason::Schema {
                detail: format!("required role {role} absent"),
            });
        }
    }
    for e in token_events(trajectory, rule) {
        match e.kind {
            TokenEventKind::MissingDecisionToken if e.round.is_some() => reasons.push(RejectReason::MissingToken {
                role_id: e.role_id,
                token: rule.token().to_string(),
            }),
            TokenEventKind::MissingDecisionToken => {}
            TokenEventKind::UnauthorizedDecisionToken => reasons.push(RejectReason::Overstep {
                role_id: e.role_id,
                round: e.round,
            }),
        }
    }
    reasons
}

/// Splits trajectories into accepted and rejected-with-reasons.
pub fn rejection_filter(trajectories: &[Trajectory], rule: &FilterRule) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for t in trajectories {
        let reasons = rejection_reasons(t, rule);
        if reasons.is_empty() {
            out.accepted.push(t.clone());
        } else {
            out.rejected.push(Rejected {
                trajectory: t.clone(),
                reasons,
            });
        }
    }
    out
}

/// Seeded shuffle split into `(train, validation)`. Each side keeps input order.
pub fn split_dataset<T: Clone>(items: &[T], validation_size: usize, seed: u64) -> Result<(Vec<T>, Vec<T>), StoreError> {
    if validation_size == 0 {
        return Ok((items.to_vec(), Vec::new()));
    }
    if validation_size >= items.len() {
        return Err(StoreError::DatasetTooSmall {
            len: items.len(),
            validation_size,
        });
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut seed::rng(seed, Stream::Split));
    let mut held: Vec<usize> = idx[..validation_size].to_vec();
    held.sort_unstable();
    let held_set: BTreeSet<usize> = held.iter().copied().collect();
    let train = (0..items.len())
        .filter(|i| !held_set.contains(i))
        .map(|i| items[i].clone())
        .collect();
    let validation = held.into_iter().map(|i| items[i].clone()).collect();
    Ok((train, validation))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> RoleRegistry {
        RoleRegistry::new(vec![
            RoleDescription {
                role_id: "CEO".into(),
                description: "decides".into(),
            },
            RoleDescription {
                role_id: "CPO".into(),
                description: "designs".into(),
            },
        ])
        .unwrap()
    }

    fn dialogue(run: &str, ceo_last: &str, cpo_last: &str) -> Trajectory {
        Trajectory::new(vec![
            Message::new(run, "t", 1, "ceo", "CEO", "What should we build?"),
            Message::new(run, "t", 1, "cpo", "CPO", "A web app."),
            Message::new(run, "t", 2, "ceo", "CEO", ceo_last),
            Message::new(run, "t", 2, "cpo", "CPO", cpo_last),
        ])
        .unwrap()
    }

    fn both() -> Vec<String> {
        vec!["CEO".into(), "CPO".into()]
    }

    #[test]
    fn filter_examples() {
        let ok = dialogue("a", "<INFO> Requirements confirmed.", "<INFO> Requirements confirmed.");
        let relaxed_only = dialogue("b", "<INFO> Requirements confirmed.", "INFO: done");
        let none = dialogue("c", "fine", "ok");
        let all = vec![ok.clone(), relaxed_only.clone(), none];
        let strict = rejection_filter(&all, &FilterRule::new(TokenMode::Strict, both()));
        let relaxed = rejection_filter(&all, &FilterRule::new(TokenMode::Relaxed, both()));
        assert_eq!(strict.accepted, vec![ok.clone()]);
        assert_eq!(relaxed.accepted, vec![ok, relaxed_only]);
        assert_eq!(relaxed.rejected.len(), 1);
        assert!(matches!(strict.rejected[0].reasons[0], RejectReason::MissingToken { .. }));
    }

    #[test]
    fn reserved_token_is_an_overstep() {
        let t = dialogue("a", "<INFO> I decided the design.", "<INFO> done");
        let mut rule = FilterRule::new(TokenMode::Strict, vec!["CPO".into()]);
        rule.decision_roles = Some(vec!["CPO".into()]);
        let events = token_events(&t, &rule);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, TokenEventKind::UnauthorizedDecisionToken);
        assert_eq!(events[0].role_id, "CEO");
    }

    #[test]
    fn missing_required_role_is_schema_rejection() {
        let t = Trajectory::new(vec![Message::new("r", "t", 1, "ceo", "CEO", "<INFO> x")]).unwrap();
        let reasons = rejection_reasons(&t, &FilterRule::new(TokenMode::Relaxed, both()));
        assert_eq!(reasons.len(), 1);
        assert!(matches!(reasons[0], RejectReason::Schema { .. }));
    }

    #[test]
    fn round_gaps_are_rejected() {
        let err = Trajectory::new(vec![
            Message::new("r", "t", 1, "a", "CEO", "x"),
            Message::new("r", "t", 3, "b", "CPO", "y"),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn registry_rejects_duplicates_and_blank_descriptions() {
        let d = RoleDescription {
            role_id: "A".into(),
            description: "x".into(),
        };
        assert!(RoleRegistry::new(vec![d.clone(), d]).is_err());
        assert!(RoleRegistry::new(vec![RoleDescription {
            role_id: "A".into(),
            description: " ".into()
        }])
        .is_err());
        assert_eq!(registry().index_of("CPO"), Some(1));
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..500).collect();
        let (train, val) = split_dataset(&items, 100, 7).unwrap();
        assert_eq!((train.len(), val.len()), (400, 100));
        let mut all: Vec<u32> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert_eq!(split_dataset(&items, 100, 7).unwrap(), (train, val));
        let (train0, val0) = split_dataset(&items, 0, 7).unwrap();
        assert_eq!((train0.len(), val0.len()), (500, 0));
        assert!(matches!(split_dataset(&items[..3], 3, 1), Err(StoreError::DatasetTooSmall { .. })));
    }
}
