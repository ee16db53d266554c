//! Built-in verification suites: gradients of the full training loss,
//! clarity-matrix identities, and the LoRA zero-init and merge contracts.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::clarity::{clarity_matrix, diagonal_bound, normalize_assignments};
use crate::model::{AgentModel, LoraConfig, ModelConfig, Reduction};
use crate::seed::{self, Stream};
use crate::tensor::{self, Tape, Tensor, TensorError};
use crate::training::{loss_on_tape, TrainConfig};

pub const GRADIENT_TOL: f64 = 1e-4;
pub const DECOMPOSITION_TOL: f64 = 1e-12;
pub const MERGE_TOL: f64 = 1e-10;

/// Deliberate defects used to confirm that the suites can fail.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales every analytic gradient by 1.01 before comparison.
    GradientBug,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub invariant: String,
    pub passed: bool,
    /// Largest observed error for tolerance suites, violation count otherwise.
    pub worst: f64,
    pub detail: String,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfcheckReport {
    pub seeds: Vec<u64>,
    pub suites: Vec<SuiteResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// A small model with nonzero `B` factors so every adapter path carries gradient.
pub fn probe_model(seed: u64) -> AgentModel {
    let cfg = ModelConfig {
        vocab_size: 24,
        d_model: 8,
        n_layers: 1,
        context_len: 16,
        seed,
    };
    let mut m = AgentModel::new(cfg, LoraConfig { rank: 2, alpha: 2.0, dropout: 0.0 }).expect("probe config is valid");
    let mut rng = seed::rng(seed, Stream::Selfcheck);
    let normal = Normal::new(0.0, 0.3).expect("positive std");
    let tensors: Vec<Tensor> = m
        .lora_tensors()
        .iter()
        .map(|t| {
            let data = (0..t.len()).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("finite samples")
        })
        .collect();
    m.set_lora_tensors(&tensors).expect("same shapes");
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub max_rel_error: f64,
    /// Largest gradient magnitude reaching any frozen input.
    pub frozen_grad_max: f64,
}

/// Compares tape and finite-difference gradients of the full per-sample loss
/// (NLL plus weighted RC term) with respect to every adapter factor.
pub fn gradient_probe(seed: u64, fault: Fault) -> Result<GradientProbe, TensorError> {
    let model = probe_model(seed);
    let mut rng = seed::rng(seed, Stream::Selfcheck);
    let vocab = model.config().vocab_size as u32;
    let len = rng.random_range(4..=model.config().context_len);
    let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
    let normal = Normal::new(0.0, 1.0).expect("positive std");
    let d = model.config().d_model;
    let roles = Tensor::matrix(3, d, (0..3 * d).map(|_| normal.sample(&mut rng)).collect())?;
    let agent = rng.random_range(0..3);
    let config = TrainConfig {
        lambda: 0.7,
        tau: 0.5,
        reduction: Reduction::Mean,
        ..TrainConfig::default()
    };
    let as_tensor_err = |e: crate::training::TrainError| match e {
        crate::training::TrainError::Model(crate::model::ModelError::Tensor(t)) => t,
        other => TensorError::NonFinite {
            context: other.to_string(),
        },
    };

    let f = |tape: &mut Tape, vars: &[tensor::Var]| {
        let bound = model.bind_with_lora(tape, vars).map_err(|e| TensorError::NonFinite {
            context: e.to_string(),
        })?;
        let r = tape.constant(roles.clone());
        loss_on_tape(tape, &model, &bound, &tokens, r, agent, &config, None)
            .map(|l| l.total)
            .map_err(as_tensor_err)
    };
    let report = tensor::finite_diff_check_many(f, &model.lora_tensors(), tensor::DEFAULT_STEP)?;
    let analytic: Vec<Tensor> = match fault {
        Fault::None => report.analytic.clone(),
        Fault::GradientBug => report.analytic.iter().map(|g| g.scale(1.01)).collect::<Result<_, _>>()?,
    };
    let mut max_rel_error: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&report.numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            max_rel_error = max_rel_error.max((x - y).abs() / y.abs().max(1.0));
        }
    }

    // frozen inputs as trainable leaves inside the same graph must receive nothing
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true).map_err(|e| TensorError::NonFinite {
        context: e.to_string(),
    })?;
    let r = tape.leaf(roles.clone().with_grad(false));
    let loss = loss_on_tape(&mut tape, &model, &bound, &tokens, r, agent, &config, None).map_err(as_tensor_err)?;
    let grads = tape.backward(loss.total)?;
    let mut frozen = vec![r, bound.embedding, bound.embedding_t];
    for layer in &bound.layers {
        frozen.extend(layer.iter().map(|b| b.base_t));
    }
    let mut frozen_grad_max = frozen
        .iter()
        .filter_map(|v| grads.get(*v))
        .flat_map(|g| g.data().iter().map(|x| x.abs()))
        .fold(0.0, f64::max);
    if frozen.iter().any(|v| tape.requires_grad(*v)) {
        frozen_grad_max = f64::INFINITY;
    }

    Ok(GradientProbe {
        max_rel_error,
        frozen_grad_max,
    })
}

/// Random row-stochastic matrix with `n` rows.
pub fn random_stochastic(rng: &mut seed::Rng, n: usize) -> Tensor {
    let mut data: Vec<f64> = (0..n * n).map(|_| rng.random_range(1e-3..1.0)).collect();
    for i in 0..n {
        let s: f64 = data[i * n..(i + 1) * n].iter().sum();
        data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
    }
    Tensor::matrix(n, n, data).expect("finite entries")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityProbe {
    pub matrices: usize,
    pub max_decomposition_error: f64,
    pub bound_violations: usize,
}

/// Decomposition identity and diagonal bound on `count` random matrices with n in 2..=8.
pub fn identity_probe(seed: u64, count: usize) -> IdentityProbe {
    let mut rng = seed::rng(seed, Stream::Selfcheck);
    let mut out = IdentityProbe {
        matrices: count,
        max_decomposition_error: 0.0,
        bound_violations: 0,
    };
    for k in 0..count {
        let n = 2 + k % 7;
        // alternate direct draws with softmax outputs of random logits
        let p = if k % 2 == 0 {
            random_stochastic(&mut rng, n)
        } else {
            let s = Tensor::matrix(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite");
            normalize_assignments(&s, rng.random_range(0.05..3.0)).expect("positive tau")
        };
        let cm = clarity_matrix(&p).expect("stochastic by construction");
        let err = (cm.frob * cm.frob - cm.frob_decomposed * cm.frob_decomposed).abs();
        out.max_decomposition_error = out.max_decomposition_error.max(err);
        if cm.frob * cm.frob > diagonal_bound(&p) + DECOMPOSITION_TOL {
            out.bound_violations += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeProbe {
    pub zero_init_identical: bool,
    pub max_merge_error: f64,
    pub probes: usize,
}

/// Fresh adapters must reproduce the base bit-for-bit; merged weights must
/// reproduce the adapted model on random inputs.
pub fn merge_probe(seed: u64, probes: usize) -> MergeProbe {
    let cfg = ModelConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        context_len: 12,
        seed,
    };
    let fresh = AgentModel::new(cfg, LoraConfig::toy()).expect("valid config");
    let tuned = {
        let mut m = fresh.clone();
        let mut rng = seed::rng(seed, Stream::Selfcheck);
        let normal = Normal::new(0.0, 0.5).expect("positive std");
        let ts: Vec<Tensor> = m
            .lora_tensors()
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| normal.sample(&mut rng)).collect()).expect("finite"))
            .collect();
        m.set_lora_tensors(&ts).expect("same shapes");
        m
    };
    let merged = tuned.merged();
    let base = fresh.base_encoder();
    let mut rng = seed::rng(seed ^ 0x5eed, Stream::Selfcheck);
    let mut out = MergeProbe {
        zero_init_identical: true,
        max_merge_error: 0.0,
        probes,
    };
    for _ in 0..probes {
        let len = rng.random_range(1..=cfg.context_len);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
        let a = fresh.encode_hidden_states(&tokens).expect("valid tokens");
        let b = crate::model::Encoder::hidden_states(&base, &tokens).expect("valid tokens");
        out.zero_init_identical &= a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        let la = tuned.forward_logits(&tokens).expect("valid tokens");
        let lb = merged.forward_logits(&tokens).expect("valid tokens");
        out.max_merge_error = out.max_merge_error.max(la.max_abs_diff(&lb));
    }
    out
}

/// Runs every suite over `seeds`.
pub fn run(seeds: &[u64], fault: Fault) -> SelfcheckReport {
    let mut suites = Vec::new();

    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut frozen: f64 = 0.0;
    let mut failure = None;
    for &s in seeds {
        match gradient_probe(s, fault) {
            Ok(p) => {
                worst = worst.max(p.max_rel_error);
                frozen = frozen.max(p.frozen_grad_max);
            }
            Err(e) => failure = Some(format!("seed {s}: {e}")),
        }
    }
    suites.push(SuiteResult {
        name: "gradient".into(),
        invariant: format!("tape gradient of the training loss matches central differences within {GRADIENT_TOL:e}"),
        passed: failure.is_none() && worst <= GRADIENT_TOL,
        worst,
        detail: failure.clone().unwrap_or_else(|| format!("max relative error {worst:.3e}")),
        seconds: t.elapsed().as_secs_f64(),
    });
    suites.push(SuiteResult {
        name: "frozen-gradient".into(),
        invariant: "frozen weights and role embeddings receive zero gradient".into(),
        passed: failure.is_none() && frozen == 0.0,
        worst: frozen,
        detail: format!("largest frozen gradient {frozen:e}"),
        seconds: 0.0,
    });

    let t = Instant::now();
    let mut dec: f64 = 0.0;
    let mut violations = 0usize;
    let mut total = 0usize;
    for &s in seeds {
        let p = identity_probe(s, 1000);
        dec = dec.max(p.max_decomposition_error);
        violations += p.bound_violations;
        total += p.matrices;
    }
    let secs = t.elapsed().as_secs_f64();
    suites.push(SuiteResult {
        name: "decomposition".into(),
        invariant: format!("off-diagonal plus diagonal decomposition equals ||M||^2 within {DECOMPOSITION_TOL:e}"),
        passed: dec <= DECOMPOSITION_TOL,
        worst: dec,
        detail: format!("{total} matrices, max error {dec:.3e}"),
        seconds: secs,
    });
    suites.push(SuiteResult {
        name: "diagonal-bound".into(),
        invariant: format!("||M||^2 <= 2 * sum_i (1 - P_ii)^2 up to {DECOMPOSITION_TOL:e}"),
        passed: violations == 0,
        worst: violations as f64,
        detail: format!("{violations} violations in {total} matrices"),
        seconds: secs,
    });

    let t = Instant::now();
    let mut merge: f64 = 0.0;
    let mut identical = true;
    for &s in seeds {
        let p = merge_probe(s, 1000 / seeds.len().max(1) + 1);
        merge = merge.max(p.max_merge_error);
        identical &= p.zero_init_identical;
    }
    let secs = t.elapsed().as_secs_f64();
    suites.push(SuiteResult {
        name: "zero-init".into(),
        invariant: "fresh adapters reproduce the frozen base bit-for-bit".into(),
        passed: identical,
        worst: if identical { 0.0 } else { 1.0 },
        detail: if identical { "identical".into() } else { "outputs differ".into() },
        seconds: secs,
    });
    suites.push(SuiteResult {
        name: "merge".into(),
        invariant: format!("merged weights reproduce adapted outputs within {MERGE_TOL:e}"),
        passed: merge <= MERGE_TOL,
        worst: merge,
        detail: format!("max output difference {merge:.3e}"),
        seconds: secs,
    });

    SelfcheckReport {
        seeds: seeds.to_vec(),
        suites,
    }
}
