//! Test-corpus evaluation: overstep judges, corpus clarity, and the
//! requirement-to-software dimensions (completeness, executability,
//! consistency, quality).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::clarity::{self, AssignmentMatrices, ClarityConfig, ClarityError, MESSAGE_SEPARATOR};
use crate::model::{tokenize, AgentModel, Encoder};
use crate::tensor;
use crate::trajectory::{self, FilterRule, RoleRegistry, TokenEventKind, TokenMode, Trajectory};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test cases")]
    Empty,
    #[error("no artifact files")]
    NoFiles,
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("judge method {0:?} needs an encoder")]
    EncoderMissing(JudgeMethod),
    #[error("checkpoints disagree on the frozen base: {0} vs {1}")]
    BaseMismatch(String, String),
    #[error("role {0} is not in the registry")]
    UnknownRole(String),
    #[error(transparent)]
    Clarity(#[from] ClarityError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeMethod {
    TokenFormat,
    AssignmentArgmax,
    #[default]
    Both,
}

impl JudgeMethod {
    fn tokens(self) -> bool {
        matches!(self, JudgeMethod::TokenFormat | JudgeMethod::Both)
    }

    fn argmax(self) -> bool {
        matches!(self, JudgeMethod::AssignmentArgmax | JudgeMethod::Both)
    }
}

impl std::str::FromStr for JudgeMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "token-format" => Ok(JudgeMethod::TokenFormat),
            "assignment-argmax" => Ok(JudgeMethod::AssignmentArgmax),
            "both" => Ok(JudgeMethod::Both),
            other => Err(format!("unknown judge method {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverstepJudgeConfig {
    pub method: JudgeMethod,
    pub rule: FilterRule,
    pub encoder_checkpoint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeSource {
    TokenFormat,
    AssignmentArgmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverstepEvent {
    pub source: JudgeSource,
    pub round: Option<u32>,
    pub agent_id: Option<String>,
    pub role_id: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseJudgement {
    pub run_id: String,
    pub overstep: bool,
    pub events: Vec<OverstepEvent>,
}

/// Frozen role embeddings plus the behavior encoder for each role.
pub struct ArgmaxJudge<'a, 'e> {
    pub registry: &'a RoleRegistry,
    pub role_embeddings: &'a [Vec<f64>],
    pub encoder_for: &'a dyn Fn(&str) -> &'e dyn Encoder,
}

impl ArgmaxJudge<'_, '_> {
    /// Registry index of the role whose embedding is closest to `text`'s.
    pub fn best_role(&self, role_id: &str, text: &str) -> Result<usize> {
        let v = clarity::embed_text((self.encoder_for)(role_id), &tokenize(text))?;
        let mut best = (0, f64::NEG_INFINITY);
        for (j, r) in self.role_embeddings.iter().enumerate() {
            let s = tensor::cosine(&v, r).map_err(ClarityError::from)?;
            if s > best.1 {
                best = (j, s);
            }
        }
        Ok(best.0)
    }
}

/// Flags a trajectory that oversteps a role boundary at least once.
pub fn judge_overstep(
    t: &Trajectory,
    config: &OverstepJudgeConfig,
    argmax: Option<&ArgmaxJudge>,
) -> Result<CaseJudgement> {
    let mut events = Vec::new();
    if config.method.tokens() {
        for e in trajectory::token_events(t, &config.rule) {
            let detail = match e.kind {
                TokenEventKind::MissingDecisionToken => format!("missing {}", config.rule.token()),
                TokenEventKind::UnauthorizedDecisionToken => format!("unauthorized {}", config.rule.token_relaxed),
            };
            events.push(OverstepEvent {
                source: JudgeSource::TokenFormat,
                round: e.round,
                agent_id: e.agent_id,
                role_id: e.role_id,
                detail,
            });
        }
    }
    if config.method.argmax() {
        let judge = argmax.ok_or(EvalError::EncoderMissing(config.method))?;
        for m in t.messages() {
            let own = judge
                .registry
                .index_of(&m.role_id)
                .ok_or_else(|| EvalError::UnknownRole(m.role_id.clone()))?;
            let best = judge.best_role(&m.role_id, &m.content)?;
            if best != own {
                events.push(OverstepEvent {
                    source: JudgeSource::AssignmentArgmax,
                    round: Some(m.round),
                    agent_id: Some(m.agent_id.clone()),
                    role_id: m.role_id.clone(),
                    detail: format!("closest role {}", judge.registry.roles()[best].role_id),
                });
            }
        }
    }
    Ok(CaseJudgement {
        run_id: t.run_id().to_string(),
        overstep: !events.is_empty(),
        events,
    })
}

/// `count / n`.
pub fn rate(count: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(count as f64 / n as f64)
}

/// Fraction of flagged cases.
pub fn overstep_rate(cases: &[bool]) -> Result<f64> {
    rate(cases.iter().filter(|&&c| c).count(), cases.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusClarity {
    pub mean_score: f64,
    pub mean_frob: f64,
    pub cases: Vec<AssignmentMatrices>,
}

/// Streaming means of the clarity score and `‖M‖_F` over a corpus.
pub fn corpus_clarity<'e>(
    trajectories: &[Trajectory],
    registry: &RoleRegistry,
    role_embeddings: &[Vec<f64>],
    encoder_for: &dyn Fn(&str) -> &'e dyn Encoder,
    config: &ClarityConfig,
) -> Result<CorpusClarity> {
    if trajectories.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = CorpusClarity {
        mean_score: 0.0,
        mean_frob: 0.0,
        cases: Vec::with_capacity(trajectories.len()),
    };
    for t in trajectories {
        let am = clarity::case_assignment(t, registry, role_embeddings, encoder_for, config)?;
        out.push(am);
    }
    Ok(out)
}

impl CorpusClarity {
    /// Folds one more case into the running means.
    pub fn push(&mut self, am: AssignmentMatrices) {
        let n = (self.cases.len() + 1) as f64;
        self.mean_score += (am.score() - self.mean_score) / n;
        self.mean_frob += (am.frob - self.mean_frob) / n;
        self.cases.push(am);
    }
}

pub const DEFAULT_PLACEHOLDERS: [&str; 3] = ["TODO", "FIXME", "pass  # placeholder"];

/// Fraction of files free of every placeholder pattern (case-insensitive).
pub fn completeness_alpha<S: AsRef<str>>(files: &[S], patterns: &[String]) -> Result<f64> {
    if files.is_empty() {
        return Err(EvalError::NoFiles);
    }
    let patterns: Vec<String> = patterns.iter().map(|p| p.to_lowercase()).collect();
    let clean = files
        .iter()
        .filter(|f| {
            let text = f.as_ref().to_lowercase();
            !patterns.iter().any(|p| text.contains(p.as_str()))
        })
        .count();
    Ok(clean as f64 / files.len() as f64)
}

/// Regular files below `dir`, sorted by path.
pub fn artifact_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf());
            io_err(&path, e.into())
        })?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

/// Reads files as UTF-8, replacing invalid bytes.
pub fn read_texts(paths: &[PathBuf]) -> Result<Vec<String>> {
    paths
        .iter()
        .map(|p| {
            fs::read(p)
                .map(|b| String::from_utf8_lossy(&b).into_owned())
                .map_err(|e| io_err(p, e))
        })
        .collect()
}

/// External pass/fail command for executability. `{}` in `args` is replaced by
/// the artifact path; exit status 0 means pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetaHook {
    pub program: String,
    pub args: Vec<String>,
}

/// Fraction of artifacts for which the hook succeeds.
pub fn executability_beta(artifacts: &[PathBuf], hook: &BetaHook) -> Result<f64> {
    if artifacts.is_empty() {
        return Err(EvalError::NoFiles);
    }
    let mut pass = 0usize;
    for a in artifacts {
        let path = a.display().to_string();
        let args: Vec<String> = hook.args.iter().map(|s| s.replace("{}", &path)).collect();
        let status = Command::new(&hook.program)
            .args(&args)
            .status()
            .map_err(|e| io_err(Path::new(&hook.program), e))?;
        pass += usize::from(status.success());
    }
    Ok(pass as f64 / artifacts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gamma {
    /// Cosine clamped to [0, 1].
    pub gamma: f64,
    pub raw: f64,
}

/// Embedding cosine between requirement and artifact text.
pub fn consistency_gamma<E: Encoder + ?Sized>(encoder: &E, requirement: &str, artifact: &str) -> Result<Gamma> {
    if requirement.is_empty() || artifact.is_empty() {
        return Err(ClarityError::EmptyText.into());
    }
    let a = clarity::embed_text(encoder, &tokenize(requirement))?;
    let b = clarity::embed_text(encoder, &tokenize(artifact))?;
    let raw = tensor::cosine(&a, &b).map_err(ClarityError::from)?;
    Ok(Gamma {
        gamma: raw.clamp(0.0, 1.0),
        raw,
    })
}

/// `(α + β + γ) / 3`.
pub fn quality_q(alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    for (name, value) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(EvalError::OutOfRange { name, value });
        }
    }
    Ok((alpha + beta + gamma) / 3.0)
}

/// A frozen base and optional per-role adapted models sharing it.
pub struct EvalModels {
    base: AgentModel,
    adapted: BTreeMap<String, AgentModel>,
}

impl EvalModels {
    pub fn new(base: AgentModel, adapted: BTreeMap<String, AgentModel>) -> Result<Self> {
        let fp = base.base_fingerprint();
        for m in adapted.values() {
            let other = m.base_fingerprint();
            if other != fp {
                return Err(EvalError::BaseMismatch(fp, other));
            }
        }
        Ok(Self { base, adapted })
    }

    pub fn base(&self) -> &AgentModel {
        &self.base
    }

    pub fn has_adapters(&self) -> bool {
        !self.adapted.is_empty()
    }

    /// Adapted model for `role`, or the frozen base.
    pub fn encoder_for(&self, role: &str) -> &dyn Encoder {
        match self.adapted.get(role) {
            Some(m) => m,
            None => &self.base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeEcho {
    pub method: JudgeMethod,
    pub rule: FilterRule,
    pub events_token_format: usize,
    pub events_assignment_argmax: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetSummary {
    pub n_cases: usize,
    pub overstep_count_strict: usize,
    pub overstep_count_relaxed: usize,
    pub overstep_rate_strict: f64,
    pub overstep_rate_relaxed: f64,
    pub clarity_score_mean: f64,
    pub frobenius_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub run_id: String,
    pub subset: Option<String>,
    pub overstep_strict: bool,
    pub overstep_relaxed: bool,
    pub events: Vec<OverstepEvent>,
    pub matrices: AssignmentMatrices,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClarityReport {
    pub n_cases: usize,
    pub overstep_count_strict: usize,
    pub overstep_count_relaxed: usize,
    pub overstep_rate_strict: f64,
    pub overstep_rate_relaxed: f64,
    pub clarity_score_mean: f64,
    pub frobenius_mean: f64,
    /// Same means with every role on the frozen base, when adapters were given.
    pub base_clarity_score_mean: Option<f64>,
    pub base_frobenius_mean: Option<f64>,
    pub role_clear_count: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub gamma_raw: Option<f64>,
    pub quality: Option<f64>,
    pub judge: JudgeEcho,
    pub tau: f64,
    pub epsilon: f64,
    pub separator: String,
    pub encoder_checkpoint: Option<String>,
    pub subsets: BTreeMap<String, SubsetSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cases: Option<Vec<CaseRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub judge: OverstepJudgeConfig,
    pub clarity: ClarityConfig,
    pub include_cases: bool,
}

/// Judges and scores every trajectory of a test corpus.
pub fn evaluate(trajectories: &[Trajectory], registry: &RoleRegistry, models: &EvalModels, options: &EvalOptions) -> Result<ClarityReport> {
    if trajectories.is_empty() {
        return Err(EvalError::Empty);
    }
    options.clarity.validate()?;
    let base_enc = models.base.base_encoder();
    let role_embeddings = clarity::role_embeddings(&base_enc, registry)?;
    let encoder_for = |role: &str| models.encoder_for(role);
    let argmax = ArgmaxJudge {
        registry,
        role_embeddings: &role_embeddings,
        encoder_for: &encoder_for,
    };
    let strict = OverstepJudgeConfig {
        rule: options.judge.rule.with_mode(TokenMode::Strict),
        ..options.judge.clone()
    };
    let relaxed = OverstepJudgeConfig {
        rule: options.judge.rule.with_mode(TokenMode::Relaxed),
        ..options.judge.clone()
    };

    let corpus = corpus_clarity(trajectories, registry, &role_embeddings, &encoder_for, &options.clarity)?;
    let base_corpus = if models.has_adapters() {
        let frozen = |_: &str| -> &dyn Encoder { &base_enc };
        Some(corpus_clarity(trajectories, registry, &role_embeddings, &frozen, &options.clarity)?)
    } else {
        None
    };

    let mut cases = Vec::with_capacity(trajectories.len());
    let mut echo = JudgeEcho {
        method: options.judge.method,
        rule: options.judge.rule.clone(),
        events_token_format: 0,
        events_assignment_argmax: 0,
    };
    let mut subsets: BTreeMap<String, (SubsetSummary, CorpusClarity)> = BTreeMap::new();
    for (t, am) in trajectories.iter().zip(&corpus.cases) {
        let js = judge_overstep(t, &strict, Some(&argmax))?;
        let jr = judge_overstep(t, &relaxed, Some(&argmax))?;
        for e in &js.events {
            match e.source {
                JudgeSource::TokenFormat => echo.events_token_format += 1,
                JudgeSource::AssignmentArgmax => echo.events_assignment_argmax += 1,
            }
        }
        let subset = t.subset().map(str::to_string);
        if let Some(name) = &subset {
            let (s, c) = subsets.entry(name.clone()).or_insert_with(|| {
                (
                    SubsetSummary::default(),
                    CorpusClarity {
                        mean_score: 0.0,
                        mean_frob: 0.0,
                        cases: Vec::new(),
                    },
                )
            });
            s.n_cases += 1;
            s.overstep_count_strict += usize::from(js.overstep);
            s.overstep_count_relaxed += usize::from(jr.overstep);
            c.push(am.clone());
        }
        cases.push(CaseRecord {
            run_id: t.run_id().to_string(),
            subset,
            overstep_strict: js.overstep,
            overstep_relaxed: jr.overstep,
            events: js.events,
            matrices: am.clone(),
        });
    }

    let n = cases.len();
    let count_strict = cases.iter().filter(|c| c.overstep_strict).count();
    let count_relaxed = cases.iter().filter(|c| c.overstep_relaxed).count();
    let subsets = subsets
        .into_iter()
        .map(|(k, (mut s, c))| {
            s.overstep_rate_strict = s.overstep_count_strict as f64 / s.n_cases as f64;
            s.overstep_rate_relaxed = s.overstep_count_relaxed as f64 / s.n_cases as f64;
            s.clarity_score_mean = c.mean_score;
            s.frobenius_mean = c.mean_frob;
            (k, s)
        })
        .collect();
    Ok(ClarityReport {
        n_cases: n,
        overstep_count_strict: count_strict,
        overstep_count_relaxed: count_relaxed,
        overstep_rate_strict: rate(count_strict, n)?,
        overstep_rate_relaxed: rate(count_relaxed, n)?,
        clarity_score_mean: corpus.mean_score,
        frobenius_mean: corpus.mean_frob,
        base_clarity_score_mean: base_corpus.as_ref().map(|c| c.mean_score),
        base_frobenius_mean: base_corpus.as_ref().map(|c| c.mean_frob),
        role_clear_count: corpus.cases.iter().filter(|c| c.is_clear(options.clarity.epsilon)).count(),
        alpha: None,
        beta: None,
        gamma: None,
        gamma_raw: None,
        quality: None,
        judge: echo,
        tau: options.clarity.tau,
        epsilon: options.clarity.epsilon,
        separator: MESSAGE_SEPARATOR.to_string(),
        encoder_checkpoint: options.judge.encoder_checkpoint.clone(),
        subsets,
        cases: options.include_cases.then_some(cases),
    })
}

impl ClarityReport {
    /// Records the software dimensions; `quality` is set once all three are present.
    pub fn set_software_metrics(&mut self, alpha: Option<f64>, beta: Option<f64>, gamma: Option<Gamma>) -> Result<()> {
        self.alpha = alpha;
        self.beta = beta;
        self.gamma = gamma.map(|g| g.gamma);
        self.gamma_raw = gamma.map(|g| g.raw);
        self.quality = match (alpha, beta, self.gamma) {
            (Some(a), Some(b), Some(g)) => Some(quality_q(a, b, g)?),
            _ => None,
        };
        Ok(())
    }

    /// Flat table: one row for the whole corpus, then one per subset.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scope",
            "n_cases",
            "overstep_rate_strict",
            "overstep_rate_relaxed",
            "clarity_score_mean",
            "frobenius_mean",
            "alpha",
            "beta",
            "gamma",
            "quality",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            "all".to_string(),
            self.n_cases.to_string(),
            self.overstep_rate_strict.to_string(),
            self.overstep_rate_relaxed.to_string(),
            self.clarity_score_mean.to_string(),
            self.frobenius_mean.to_string(),
            opt(self.alpha),
            opt(self.beta),
            opt(self.gamma),
            opt(self.quality),
        ])?;
        for (name, s) in &self.subsets {
            w.write_record([
                name.clone(),
                s.n_cases.to_string(),
                s.overstep_rate_strict.to_string(),
                s.overstep_rate_relaxed.to_string(),
                s.clarity_score_mean.to_string(),
                s.frobenius_mean.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }
}
