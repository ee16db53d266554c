//! Low-rank adapters over frozen projection weights.
//!
//! The adapted weight is `W0 + (alpha / r) · B · A` with `A: r × d_in` and
//! `B: d_out × r`. `B` starts at zero, so a fresh adapter leaves the layer
//! output unchanged.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::seed::Rng;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraConfig {
    /// Desk-scale default: `r = 4`, `alpha = 4`.
    pub fn toy() -> Self {
        Self {
            rank: 4,
            alpha: 4.0,
            dropout: 0.05,
        }
    }

    /// `r = 16`, `alpha = 16`, dropout 0.05.
    pub fn full() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub(crate) base: Tensor,
    pub(crate) a: Tensor,
    pub(crate) b: Tensor,
    rank: usize,
    alpha: f64,
    dropout: f64,
}

/// Tape handles for one adapted projection.
#[derive(Debug, Clone, Copy)]
pub struct BoundLora {
    /// `W0ᵀ`, recorded as a constant.
    pub base_t: Var,
    pub a: Var,
    pub b: Var,
}

impl LoraLayer {
    /// Wraps `base` (d_out × d_in) with a fresh adapter: `A` uniform in
    /// ±1/sqrt(d_in), `B` zero.
    pub fn new(base: Tensor, config: LoraConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let (d_out, d_in) = base.dims2("lora base")?;
        let bound = 1.0 / (d_in as f64).sqrt();
        let a: Vec<f64> = (0..config.rank * d_in).map(|_| rng.random_range(-bound..bound)).collect();
        let a = Tensor::matrix(config.rank, d_in, a)?;
        let b = Tensor::zeros(vec![d_out, config.rank]);
        Self::from_parts(base, a, b, config.alpha, config.dropout)
    }

    pub fn from_parts(base: Tensor, a: Tensor, b: Tensor, alpha: f64, dropout: f64) -> Result<Self, ModelError> {
        let (d_out, d_in) = base.dims2("lora base")?;
        let (rank, a_in) = a.dims2("lora A")?;
        let (b_out, b_rank) = b.dims2("lora B")?;
        if a_in != d_in || b_out != d_out || b_rank != rank {
            return Err(TensorError::ShapeMismatch {
                op: "lora factors",
                left: vec![d_out, d_in, rank],
                right: vec![b_out, a_in, b_rank],
            }
            .into());
        }
        if rank == 0 || rank >= d_in.min(d_out) {
            return Err(ModelError::Config(format!(
                "lora rank {rank} must satisfy 0 < r < min(d_in, d_out) = {}",
                d_in.min(d_out)
            )));
        }
        if !(0.0..=1.0).contains(&dropout) {
            return Err(ModelError::Config(format!("lora dropout {dropout} outside [0, 1]")));
        }
        if !alpha.is_finite() {
            return Err(ModelError::Config("lora alpha must be finite".into()));
        }
        Ok(Self {
            base,
            a,
            b,
            rank,
            alpha,
            dropout,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }

    pub fn base(&self) -> &Tensor {
        &self.base
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundLora, TensorError> {
        let base_t = tape.constant(self.base.transpose()?);
        let a = tape.leaf(self.a.clone().with_grad(trainable));
        let b = tape.leaf(self.b.clone().with_grad(trainable));
        Ok(BoundLora { base_t, a, b })
    }

    pub(crate) fn bind_with(&self, tape: &mut Tape, a: Var, b: Var) -> Result<BoundLora, TensorError> {
        let base_t = tape.constant(self.base.transpose()?);
        Ok(BoundLora { base_t, a, b })
    }

    /// Records `x · W0ᵀ + s · (drop(x) · Aᵀ) · Bᵀ` for row inputs `x` (T × d_in).
    ///
    /// With `adapters == false` only the frozen path is recorded.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundLora,
        x: Var,
        adapters: bool,
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var, TensorError> {
        let base_out = tape.matmul(x, bound.base_t)?;
        if !adapters {
            return Ok(base_out);
        }
        let lora_in = match dropout_rng {
            Some(rng) if self.dropout > 0.0 => {
                let mask = dropout_mask(tape.value(x).shape(), self.dropout, rng)?;
                let mask = tape.constant(mask);
                tape.mul(x, mask)?
            }
            _ => x,
        };
        let a_t = tape.transpose(bound.a)?;
        let b_t = tape.transpose(bound.b)?;
        let down = tape.matmul(lora_in, a_t)?;
        let up = tape.matmul(down, b_t)?;
        let scaled = tape.scale(up, self.scaling())?;
        tape.add(base_out, scaled)
    }

    /// Applies the adapted layer to row inputs `x` (T × d_in). Dropout on the
    /// low-rank path is active only when `training` is set.
    pub fn lora_forward(&self, x: &Tensor, training: bool, rng: &mut Rng) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone());
        let out = self.forward_on_tape(&mut tape, &bound, xv, true, training.then_some(rng))?;
        Ok(tape.value(out).clone())
    }

    /// `W0 + (alpha / r) · B · A`.
    pub fn lora_merge(&self) -> Tensor {
        let delta = self
            .b
            .matmul(&self.a)
            .and_then(|d| d.scale(self.scaling()))
            .expect("factor shapes are validated at construction");
        self.base.add(&delta).expect("merged shape matches base")
    }

    pub(crate) fn factors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.a, &mut self.b]
    }
}

/// Inverted dropout mask: entries are 0 with probability `p`, else `1 / (1 − p)`.
fn dropout_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor, TensorError> {
    let n: usize = shape.iter().product();
    let keep = if p >= 1.0 { 0.0 } else { 1.0 / (1.0 - p) };
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::{rng, Stream};

    fn rank_one_layer() -> LoraLayer {
        LoraLayer::from_parts(
            Tensor::identity(2),
            Tensor::from_rows(&[[0.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[[1.0], [0.0]]).unwrap(),
            1.0,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_b_gives_base_output() {
        let mut r = rng(3, Stream::LoraInit);
        let base = Tensor::from_rows(&[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0], [2.0, 2.0, 2.0]]).unwrap();
        let layer = LoraLayer::new(base.clone(), LoraConfig { rank: 1, alpha: 1.0, dropout: 0.0 }, &mut r).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.2, 1.5]]).unwrap();
        let out = layer.lora_forward(&x, false, &mut r).unwrap();
        let expected = x.matmul(&base.transpose().unwrap()).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn rank_one_hand_example() {
        let layer = rank_one_layer();
        let mut r = rng(0, Stream::Dropout);
        let x = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(layer.lora_forward(&x, false, &mut r).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(layer.lora_merge().to_rows(), vec![vec![1.0, 1.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn full_dropout_drops_low_rank_path() {
        let mut layer = rank_one_layer();
        layer.dropout = 1.0;
        let mut r = rng(0, Stream::Dropout);
        let x = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(layer.lora_forward(&x, true, &mut r).unwrap().data(), &[0.0, 1.0]);
        // eval mode ignores dropout
        assert_eq!(layer.lora_forward(&x, false, &mut r).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn merge_with_zero_b_is_base() {
        let mut r = rng(1, Stream::LoraInit);
        let base = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]).unwrap();
        let layer = LoraLayer::new(base.clone(), LoraConfig { rank: 2, alpha: 8.0, dropout: 0.1 }, &mut r).unwrap();
        assert_eq!(layer.lora_merge(), base);
    }

    #[test]
    fn rank_must_be_low() {
        let mut r = rng(1, Stream::LoraInit);
        let err = LoraLayer::new(Tensor::identity(2), LoraConfig { rank: 2, alpha: 2.0, dropout: 0.0 }, &mut r);
        assert!(matches!(err, Err(ModelError::Config(_))));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let layer = rank_one_layer();
        let mut r = rng(0, Stream::Dropout);
        let x = Tensor::from_rows(&[[0.0, 1.0, 2.0]]).unwrap();
        assert!(layer.lora_forward(&x, false, &mut r).is_err());
    }
}
