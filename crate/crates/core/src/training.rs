//! LoRA fine-tuning of one agent with the role-clarity regularizer.
//!
//! Each sample is one trajectory. The agent's own messages are run through the
//! adapted model once; the hidden states feed both the next-token NLL and the
//! behavior embedding whose similarity row against the frozen role embeddings
//! gives the RC term `−log P_ii`. Only the adapter factors are updated.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clarity::{self, ClarityConfig, ClarityError};
use crate::model::{self, nll_on_tape, AgentModel, BoundModel, Encoder, ModelError, Reduction};
use crate::seed::{self, Rng, Stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::trajectory::{self, RoleRegistry, StoreError, Trajectory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training dataset")]
    EmptyDataset,
    #[error("role {0} is not in the registry")]
    RoleMissing(String),
    #[error("trajectory {run_id} has no message from role {role_id}")]
    AgentAbsent { run_id: String, role_id: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last finite checkpoint retained")]
    Diverged { step: usize, retained: Box<AgentModel> },
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error(transparent)]
    Clarity(#[from] ClarityError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub validation_size: usize,
    pub seed: u64,
    pub reduction: Reduction,
    pub momentum: f64,
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eta: 5e-5,
            epochs: 10,
            batch_size: 32,
            checkpoint_every: 50,
            validation_size: 100,
            seed: 42,
            reduction: Reduction::Sum,
            momentum: 0.0,
            tau: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings that train the toy model in seconds on a few hundred trajectories.
    pub fn toy() -> Self {
        Self {
            eta: 0.05,
            epochs: 3,
            batch_size: 1,
            checkpoint_every: 50,
            validation_size: 20,
            reduction: Reduction::Mean,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be finite and > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("batch_size and checkpoint_every must be >= 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        self.clarity().validate()?;
        Ok(())
    }

    fn clarity(&self) -> ClarityConfig {
        ClarityConfig {
            tau: self.tau,
            ..ClarityConfig::default()
        }
    }
}

/// `mle + λ · rc`.
pub fn total_loss(mle: f64, rc: f64, lambda: f64) -> f64 {
    mle + lambda * rc
}

/// Loss terms of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub run_id: String,
    pub total: f64,
    pub mle: f64,
    pub rc: f64,
    /// Row of `P` for the trained agent, over registry roles.
    pub p_row: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Batch means.
    pub total: f64,
    pub mle: f64,
    pub rc: f64,
    pub samples: Vec<SampleLoss>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub id: String,
    pub step: usize,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role_id: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub base_fingerprint: String,
    pub train_size: usize,
    pub validation_size: usize,
    pub steps: Vec<StepLog>,
    /// Mean clarity score on the validation set; entry 0 precedes training.
    pub epoch_clarity: Vec<f64>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub selected_checkpoint: String,
}

/// Frozen inputs shared by every sample of one training run.
pub struct RoleTarget<'r> {
    registry: &'r RoleRegistry,
    role_id: String,
    index: usize,
    role_embeddings: Vec<Vec<f64>>,
    roles: Tensor,
}

impl<'r> RoleTarget<'r> {
    /// Embeds every registry role with the frozen base of `model`.
    pub fn new(model: &AgentModel, registry: &'r RoleRegistry, role_id: &str) -> Result<Self> {
        let index = registry
            .index_of(role_id)
            .ok_or_else(|| TrainError::RoleMissing(role_id.to_string()))?;
        let role_embeddings = clarity::role_embeddings(&model.base_encoder(), registry)?;
        let roles = Tensor::from_rows(&role_embeddings)?;
        Ok(Self {
            registry,
            role_id: role_id.to_string(),
            index,
            role_embeddings,
            roles,
        })
    }

    pub fn role_embeddings(&self) -> &[Vec<f64>] {
        &self.role_embeddings
    }

    /// Registry index of the trained role.
    pub fn index(&self) -> usize {
        self.index
    }

    fn tokens(&self, model: &AgentModel, t: &Trajectory) -> Result<Vec<u32>> {
        let agent = t
            .messages()
            .iter()
            .find(|m| m.role_id == self.role_id)
            .ok_or_else(|| TrainError::AgentAbsent {
                run_id: t.run_id().to_string(),
                role_id: self.role_id.clone(),
            })?;
        Ok(clarity::trajectory_tokens(t, &agent.agent_id, model.config().context_len)?)
    }
}

/// Tape handles of one sample's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub mle: Var,
    pub rc: Var,
    pub p_row: Var,
}

/// Records `NLL + λ · (−log P_ii)` for `tokens` on an already bound model.
///
/// `roles` holds the frozen role embeddings (n × d); `agent` is the row of the
/// trained role.
#[allow(clippy::too_many_arguments)]
pub fn loss_on_tape(
    tape: &mut Tape,
    model: &AgentModel,
    bound: &BoundModel,
    tokens: &[u32],
    roles: Var,
    agent: usize,
    config: &TrainConfig,
    dropout: Option<&mut Rng>,
) -> Result<LossVars> {
    let fwd = model.forward_on_tape(tape, bound, tokens, true, dropout)?;
    let behavior = tape.mean_rows(fwd.hidden)?;
    let row = clarity::rc_row_on_tape(tape, behavior, roles, agent, config.tau)?;
    let mle = nll_on_tape(tape, fwd.logits, tokens, 1, config.reduction)?;
    let weighted = tape.scale(row.loss, config.lambda)?;
    let total = tape.add(mle, weighted)?;
    Ok(LossVars {
        total,
        mle,
        rc: row.loss,
        p_row: row.p_row,
    })
}

/// Loss terms of one sample and, when `grads` is set, the gradient with respect to
/// every adapter factor in [`AgentModel::lora_tensors`] order.
fn run_sample(
    model: &AgentModel,
    target: &RoleTarget,
    t: &Trajectory,
    config: &TrainConfig,
    dropout: Option<&mut Rng>,
    grads: bool,
) -> Result<(SampleLoss, Option<Vec<Tensor>>)> {
    let tokens = target.tokens(model, t)?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, grads)?;
    let roles = tape.constant(target.roles.clone());
    let vars = loss_on_tape(&mut tape, model, &bound, &tokens, roles, target.index, config, dropout)?;
    let value = |v: Var| tape.value(v).data()[0];
    let loss = SampleLoss {
        run_id: t.run_id().to_string(),
        total: value(vars.total),
        mle: value(vars.mle),
        rc: value(vars.rc),
        p_row: tape.value(vars.p_row).data().to_vec(),
    };
    if !grads {
        return Ok((loss, None));
    }
    let g = tape.backward(vars.total)?;
    let lora = model.lora_tensors();
    let out = bound
        .lora_vars()
        .into_iter()
        .zip(&lora)
        .map(|(v, like)| g.get_or_zeros(v, like))
        .collect();
    Ok((loss, Some(out)))
}

/// Eval-mode loss terms of one trajectory.
pub fn sample_loss(model: &AgentModel, target: &RoleTarget, t: &Trajectory, config: &TrainConfig) -> Result<SampleLoss> {
    run_sample(model, target, t, config, None, false).map(|(l, _)| l)
}

/// Eval-mode loss terms and adapter gradients of one trajectory.
pub fn sample_gradients(
    model: &AgentModel,
    target: &RoleTarget,
    t: &Trajectory,
    config: &TrainConfig,
) -> Result<(SampleLoss, Vec<Tensor>)> {
    let (l, g) = run_sample(model, target, t, config, None, true)?;
    Ok((l, g.expect("gradients requested")))
}

/// Plain SGD with optional heavy-ball momentum over the adapter factors.
#[derive(Debug, Clone)]
pub struct Sgd {
    eta: f64,
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(eta: f64, momentum: f64) -> Self {
        Self {
            eta,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Applies one update; returns false if any parameter became non-finite.
    pub fn step(&mut self, model: &mut AgentModel, grads: &[Tensor]) -> bool {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
        }
        let mut finite = true;
        for ((p, g), v) in model.lora_tensors_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
            for i in 0..pd.len() {
                vd[i] = self.momentum * vd[i] + gd[i];
                pd[i] -= self.eta * vd[i];
                finite &= pd[i].is_finite();
            }
        }
        finite
    }
}

/// Mean eval-mode total loss over `set`.
pub fn validation_loss(model: &AgentModel, target: &RoleTarget, set: &[Trajectory], config: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for t in set {
        sum += sample_loss(model, target, t, config)?.total;
    }
    Ok(sum / set.len() as f64)
}

/// Mean clarity score over `set`, the trained role using `model` with adapters
/// and every other role using the frozen base.
pub fn mean_clarity(model: &AgentModel, target: &RoleTarget, set: &[Trajectory], tau: f64) -> Result<f64> {
    let base = model.base_encoder();
    let adapted: &dyn Encoder = model;
    let frozen: &dyn Encoder = &base;
    let pick = |role: &str| if role == target.role_id { adapted } else { frozen };
    let cfg = ClarityConfig {
        tau,
        ..ClarityConfig::default()
    };
    let mut mean = 0.0;
    for (k, t) in set.iter().enumerate() {
        let am = clarity::case_assignment(t, target.registry, &target.role_embeddings, &pick, &cfg)?;
        mean += (am.score() - mean) / (k + 1) as f64;
    }
    Ok(mean)
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. } | TensorError::LogNonPositive { .. }))
            | TrainError::Clarity(ClarityError::Tensor(
                TensorError::NonFinite { .. } | TensorError::LogNonPositive { .. }
            ))
            | TrainError::Clarity(ClarityError::Model(ModelError::Tensor(
                TensorError::NonFinite { .. } | TensorError::LogNonPositive { .. }
            )))
    )
}

/// Index of the smallest loss; ties go to the earliest.
pub fn select_checkpoint(losses: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn checkpoint_id(step: usize) -> String {
    format!("step-{step:06}")
}

pub fn checkpoint_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.ckpt"))
}

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub role_id: String,
    pub base_fingerprint: String,
    pub selected: String,
    pub checkpoints: Vec<CheckpointRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at_step: Option<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a checkpoint file, or the selected checkpoint of a checkpoint directory.
pub fn load_selected(path: &Path) -> Result<AgentModel> {
    if path.is_dir() {
        let m = Manifest::load(path)?;
        Ok(model::load_checkpoint(&checkpoint_path(path, &m.selected))?)
    } else {
        Ok(model::load_checkpoint(path)?)
    }
}

/// Fine-tunes the adapters of `model` for the agent holding `role_id`.
///
/// `dataset` is split into train and validation sets with `config.seed`. When
/// `out_dir` is given every saved checkpoint and a manifest are written there.
/// Returns the selected (lowest validation loss) model.
pub fn train_agent(
    model: &AgentModel,
    dataset: &[Trajectory],
    registry: &RoleRegistry,
    role_id: &str,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(AgentModel, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let target = RoleTarget::new(model, registry, role_id)?;
    let (train, validation) = trajectory::split_dataset(dataset, config.validation_size, config.seed)?;
    for t in dataset {
        target.tokens(model, t)?;
    }
    let held: &[Trajectory] = if validation.is_empty() {
        log::warn!("no validation set; selection and clarity use the training set");
        &train
    } else {
        &validation
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }

    let mut model = model.clone();
    let fingerprint = model.base_fingerprint();
    let mut rng = seed::rng(config.seed, Stream::Dropout);
    let mut sgd = Sgd::new(config.eta, config.momentum);
    let mut report = TrainReport {
        role_id: role_id.to_string(),
        seed: config.seed,
        config: *config,
        base_fingerprint: fingerprint.clone(),
        train_size: train.len(),
        validation_size: validation.len(),
        steps: Vec::new(),
        epoch_clarity: vec![mean_clarity(&model, &target, held, config.tau)?],
        checkpoints: Vec::new(),
        selected_checkpoint: String::new(),
    };
    let mut snapshots: Vec<Vec<Tensor>> = Vec::new();
    let mut step = 0usize;

    let save = |model: &AgentModel, step: usize, report: &mut TrainReport, snapshots: &mut Vec<Vec<Tensor>>| -> Result<()> {
        let id = checkpoint_id(step);
        let validation_loss = validation_loss(model, &target, held, config)?;
        log::info!("checkpoint {id}: validation loss {validation_loss:.6}");
        if let Some(dir) = out_dir {
            model::save_checkpoint(model, &checkpoint_path(dir, &id))?;
        }
        report.checkpoints.push(CheckpointRecord {
            id,
            step,
            validation_loss,
        });
        snapshots.push(model.lora_tensors());
        Ok(())
    };

    let diverged = |step: usize, model: &AgentModel, report: &TrainReport, snapshots: &[Vec<Tensor>]| -> TrainError {
        let mut retained = model.clone();
        let last = snapshots.last().cloned();
        match last {
            Some(ps) => retained.set_lora_tensors(&ps).expect("snapshot shapes match"),
            None => {
                let fresh = AgentModel::new(*model.config(), *model.lora_config()).expect("config was valid");
                retained.set_lora_tensors(&fresh.lora_tensors()).expect("same shapes");
            }
        }
        if let Some(dir) = out_dir {
            let m = Manifest {
                role_id: report.role_id.clone(),
                base_fingerprint: report.base_fingerprint.clone(),
                selected: report.checkpoints.last().map(|c| c.id.clone()).unwrap_or_default(),
                checkpoints: report.checkpoints.clone(),
                diverged_at_step: Some(step),
            };
            if let Err(e) = m.save(dir) {
                log::error!("could not write manifest after divergence: {e}");
            }
        }
        TrainError::Diverged {
            step,
            retained: Box::new(retained),
        }
    };

    for epoch in 1..=config.epochs {
        for batch in train.chunks(config.batch_size) {
            step += 1;
            let mut samples = Vec::with_capacity(batch.len());
            let mut acc: Option<Vec<Tensor>> = None;
            for t in batch {
                let result = run_sample(&model, &target, t, config, Some(&mut rng), true);
                let (loss, grads) = match result {
                    Ok((l, g)) => (l, g.expect("gradients requested")),
                    Err(e) if is_divergence(&e) => return Err(diverged(step, &model, &report, &snapshots)),
                    Err(e) => return Err(e),
                };
                acc = Some(match acc {
                    None => grads,
                    Some(a) => a.iter().zip(&grads).map(|(x, y)| x.add(y)).collect::<Result<_, _>>()?,
                });
                samples.push(loss);
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc
                .expect("batch is nonempty")
                .iter()
                .map(|g| g.scale(inv))
                .collect::<Result<_, _>>()?;
            let mean = |f: fn(&SampleLoss) -> f64| samples.iter().map(f).sum::<f64>() * inv;
            let log = StepLog {
                step,
                epoch,
                total: mean(|s| s.total),
                mle: mean(|s| s.mle),
                rc: mean(|s| s.rc),
                samples,
            };
            log::debug!("step {step}: total {:.6} mle {:.6} rc {:.6}", log.total, log.mle, log.rc);
            report.steps.push(log);
            if !sgd.step(&mut model, &grads) {
                return Err(diverged(step, &model, &report, &snapshots));
            }
            if step % config.checkpoint_every == 0 {
                match save(&model, step, &mut report, &mut snapshots) {
                    Err(e) if is_divergence(&e) => return Err(diverged(step, &model, &report, &snapshots)),
                    other => other?,
                }
            }
        }
        let c = match mean_clarity(&model, &target, held, config.tau) {
            Err(e) if is_divergence(&e) => return Err(diverged(step, &model, &report, &snapshots)),
            other => other?,
        };
        log::info!("epoch {epoch}: clarity {c:.6}");
        report.epoch_clarity.push(c);
    }
    if report.checkpoints.last().map(|c| c.step) != Some(step) {
        match save(&model, step, &mut report, &mut snapshots) {
            Err(e) if is_divergence(&e) => return Err(diverged(step, &model, &report, &snapshots)),
            other => other?,
        }
    }

    let losses: Vec<f64> = report.checkpoints.iter().map(|c| c.validation_loss).collect();
    let best = select_checkpoint(&losses)?;
    report.selected_checkpoint = report.checkpoints[best].id.clone();
    model.set_lora_tensors(&snapshots[best])?;
    debug_assert_eq!(model.base_fingerprint(), fingerprint);

    if let Some(dir) = out_dir {
        Manifest {
            role_id: role_id.to_string(),
            base_fingerprint: fingerprint,
            selected: report.selected_checkpoint.clone(),
            checkpoints: report.checkpoints.clone(),
            diverged_at_step: None,
        }
        .save(dir)?;
    }
    Ok((model, report))
}

/// Trains one adapter per registry role, each starting from `model`.
pub fn train_all_roles(
    model: &AgentModel,
    dataset: &[Trajectory],
    registry: &RoleRegistry,
    config: &TrainConfig,
) -> Result<(BTreeMap<String, AgentModel>, Vec<TrainReport>)> {
    let mut models = BTreeMap::new();
    let mut reports = Vec::new();
    for role in registry.roles() {
        let (m, r) = train_agent(model, dataset, registry, &role.role_id, config, None)?;
        models.insert(role.role_id.clone(), m);
        reports.push(r);
    }
    Ok((models, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraConfig, ModelConfig};
    use crate::trajectory::{Message, RoleDescription};

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(8.3178, 1.0986, 0.0), 8.3178);
        assert!((total_loss(8.3178, 1.0986, 0.1) - 8.4277).abs() < 5e-5);
        assert!((total_loss(8.3178, 1.0986, 1.0) - 9.4164).abs() < 5e-5);
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_checkpoint(&[4.0]).unwrap(), 0);
        assert_eq!(select_checkpoint(&[3.2, 2.9, 3.0]).unwrap(), 1);
        assert_eq!(select_checkpoint(&[2.9, 2.9]).unwrap(), 0);
        assert!(matches!(select_checkpoint(&[]), Err(TrainError::NoCheckpoints)));
    }

    fn tiny() -> (AgentModel, RoleRegistry, Vec<Trajectory>) {
        let cfg = ModelConfig {
            vocab_size: 128,
            d_model: 8,
            n_layers: 1,
            context_len: 64,
            seed: 3,
        };
        let model = AgentModel::new(cfg, LoraConfig { rank: 2, alpha: 2.0, dropout: 0.0 }).unwrap();
        let registry = RoleRegistry::new(vec![
            RoleDescription {
                role_id: "A".into(),
                description: "decides budget".into(),
            },
            RoleDescription {
                role_id: "B".into(),
                description: "writes code".into(),
            },
        ])
        .unwrap();
        let data = (0..6)
            .map(|i| {
                let run = format!("r{i}");
                Trajectory::new(vec![
                    Message::new(&run, "t", 1, "a", "A", &format!("budget plan {i}")),
                    Message::new(&run, "t", 1, "b", "B", &format!("code file {i}")),
                ])
                .unwrap()
            })
            .collect();
        (model, registry, data)
    }

    #[test]
    fn lambda_zero_total_is_mle_and_rc_matches_row() {
        let (model, registry, data) = tiny();
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::toy()
        };
        let target = RoleTarget::new(&model, &registry, "A").unwrap();
        let l = sample_loss(&model, &target, &data[0], &cfg).unwrap();
        assert_eq!(l.total, l.mle);
        assert!((l.rc + l.p_row[0].ln()).abs() < 1e-10);
    }

    #[test]
    fn training_changes_only_adapters_and_is_deterministic() {
        let (model, registry, data) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            validation_size: 2,
            checkpoint_every: 3,
            ..TrainConfig::toy()
        };
        let (a, ra) = train_agent(&model, &data, &registry, "A", &cfg, None).unwrap();
        let (_, rb) = train_agent(&model, &data, &registry, "A", &cfg, None).unwrap();
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
        assert_eq!(a.base_fingerprint(), model.base_fingerprint());
        assert_ne!(a.lora_tensors(), model.lora_tensors());
        assert_eq!(ra.steps.len(), 8);
        assert_eq!(ra.epoch_clarity.len(), 3);
        let steps: Vec<usize> = ra.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![3, 6, 8]);
    }

    #[test]
    fn missing_role_and_empty_dataset_are_errors() {
        let (model, registry, data) = tiny();
        let cfg = TrainConfig::toy();
        assert!(matches!(
            train_agent(&model, &data, &registry, "Z", &cfg, None),
            Err(TrainError::RoleMissing(_))
        ));
        assert!(matches!(
            train_agent(&model, &[], &registry, "A", &cfg, None),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn divergence_keeps_last_finite_checkpoint() {
        let (model, registry, data) = tiny();
        let cfg = TrainConfig {
            eta: 1e300,
            validation_size: 1,
            checkpoint_every: 1,
            ..TrainConfig::toy()
        };
        match train_agent(&model, &data, &registry, "A", &cfg, None) {
            Err(TrainError::Diverged { retained, .. }) => {
                assert!(retained.lora_tensors().iter().all(|t| t.data().iter().all(|v| v.is_finite())));
            }
            other => panic!("expected divergence, got {:?}", other.map(|(_, r)| r.steps.len())),
        }
    }
}
