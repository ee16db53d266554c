//! Role clarity for multi-agent dialogue: measure how well each agent's
//! behavior stays inside its own role, and fine-tune small LoRA adapters with
//! a regularizer that pushes it there.
//!
//! The pieces, bottom up:
//!
//! * [`tensor`] is a dense `f64` tensor with a reverse-mode tape.
//! * [`model`] is a byte-level causal transformer with LoRA on the attention
//!   projections, checkpoints, and merging.
//! * [`clarity`] turns role and behavior embeddings into the assignment
//!   matrix, the clarity matrix `M = P - I`, the score `1 / (1 + ||M||_F)` and
//!   the RC regularizer.
//! * [`training`] runs per-sample SGD on `NLL + lambda * RC`.
//! * [`trajectory`] and [`gateway`] store, collect and filter dialogues.
//! * [`eval`] computes overstep rates, corpus clarity and artifact quality.
//! * [`selfcheck`] re-verifies gradients and metric identities at runtime.
//!
//! ```
//! use role_clarity::clarity::{clarity_matrix, clarity_score};
//! use role_clarity::tensor::Tensor;
//!
//! let uniform = Tensor::matrix(2, 2, vec![0.5; 4]).unwrap();
//! let m = clarity_matrix(&uniform).unwrap();
//! assert!((m.frob - 1.0).abs() < 1e-12);
//! assert_eq!(clarity_score(m.frob), 0.5);
//! ```

pub mod clarity;
pub mod cli;
pub mod eval;
pub mod gateway;
pub mod model;
pub mod seed;
pub mod selfcheck;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod trajectory;
