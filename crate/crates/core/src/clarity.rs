//! Role-clarity metrics: assignment matrix, tempered softmax, clarity matrix
//! `M = P − I`, its Frobenius norm, the clarity score and the RC regularizer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{tokenize, Encoder, ModelError};
use crate::tensor::{self, Tape, Tensor, TensorError, Var};
use crate::trajectory::{RoleRegistry, Trajectory};

/// Joins an agent's messages before embedding.
pub const MESSAGE_SEPARATOR: &str = "\n<|turn|>\n";

const STOCHASTIC_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ClarityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("agent {0} has no messages in trajectory")]
    AgentAbsent(String),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("row {row} of P sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("P must be square, got {rows}×{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("diagonal entry P[{row}][{row}] = {value} is not positive")]
    NonPositiveDiagonal { row: usize, value: f64 },
    #[error("{behaviors} behavior embeddings for {roles} roles")]
    CountMismatch { behaviors: usize, roles: usize },
    #[error("no agents")]
    Empty,
}

pub type Result<T, E = ClarityError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClarityConfig {
    pub tau: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
}

impl Default for ClarityConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            epsilon: 0.5,
            aggregation: Aggregation::Mean,
        }
    }
}

impl ClarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(ClarityError::InvalidTemperature(self.tau));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(ClarityError::InvalidEpsilon(self.epsilon));
        }
        Ok(())
    }
}

/// Row `i` of `role` and `behavior` both belong to agent `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub role: Vec<Vec<f64>>,
    pub behavior: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(role: Vec<Vec<f64>>, behavior: Vec<Vec<f64>>) -> Result<Self> {
        if role.is_empty() {
            return Err(ClarityError::Empty);
        }
        if role.len() != behavior.len() {
            return Err(ClarityError::CountMismatch {
                behaviors: behavior.len(),
                roles: role.len(),
            });
        }
        for v in role.iter().chain(&behavior) {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite {
                    context: "embedding".into(),
                }
                .into());
            }
            if tensor::l2(v) == 0.0 {
                return Err(ClarityError::ZeroNorm);
            }
        }
        Ok(Self { role, behavior })
    }

    pub fn n(&self) -> usize {
        self.role.len()
    }
}

/// Mean over rows of a `T × d` hidden-state matrix.
pub fn mean_pool(hidden: &Tensor) -> Result<Vec<f64>> {
    let (t, d) = hidden.dims2("mean pool")?;
    if t == 0 {
        return Err(ClarityError::EmptyText);
    }
    let mut out = vec![0.0; d];
    for i in 0..t {
        for (o, v) in out.iter_mut().zip(hidden.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= t as f64);
    Ok(out)
}

/// Keeps the last `context_len` tokens.
pub fn truncate_front(tokens: &[u32], context_len: usize) -> &[u32] {
    &tokens[tokens.len().saturating_sub(context_len)..]
}

/// Mean-pooled final hidden state of `tokens` (truncated to the encoder's context from the end).
pub fn embed_text<E: Encoder + ?Sized>(encoder: &E, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(ClarityError::EmptyText);
    }
    let hidden = encoder.hidden_states(truncate_front(tokens, encoder.context_len()))?;
    let v = mean_pool(&hidden)?;
    if tensor::l2(&v) == 0.0 {
        return Err(ClarityError::ZeroNorm);
    }
    Ok(v)
}

/// The agent's own messages in round order, joined by [`MESSAGE_SEPARATOR`].
pub fn trajectory_text(trajectory: &Trajectory, agent_id: &str) -> Option<String> {
    let parts: Vec<&str> = trajectory.messages_by(agent_id).map(|m| m.content.as_str()).collect();
    (!parts.is_empty()).then(|| parts.join(MESSAGE_SEPARATOR))
}

pub fn trajectory_tokens(trajectory: &Trajectory, agent_id: &str, context_len: usize) -> Result<Vec<u32>> {
    let text = trajectory_text(trajectory, agent_id).ok_or_else(|| ClarityError::AgentAbsent(agent_id.to_string()))?;
    let tokens = tokenize(&text);
    Ok(truncate_front(&tokens, context_len).to_vec())
}

pub fn embed_trajectory<E: Encoder + ?Sized>(encoder: &E, trajectory: &Trajectory, agent_id: &str) -> Result<Vec<f64>> {
    let tokens = trajectory_tokens(trajectory, agent_id, encoder.context_len())?;
    embed_text(encoder, &tokens)
}

/// Embeds every role description of `registry`, in registry order.
pub fn role_embeddings<E: Encoder + ?Sized>(encoder: &E, registry: &RoleRegistry) -> Result<Vec<Vec<f64>>> {
    registry
        .roles()
        .iter()
        .map(|r| embed_text(encoder, &tokenize(&r.description)))
        .collect()
}

/// `s_ij = cos(b_i, r_j)`.
pub fn assignment_matrix(e: &EmbeddingSet) -> Result<Tensor> {
    let n = e.n();
    let mut s = Vec::with_capacity(n * n);
    for b in &e.behavior {
        for r in &e.role {
            s.push(tensor::cosine(b, r).map_err(|err| match err {
                TensorError::ZeroNorm { .. } => ClarityError::ZeroNorm,
                other => other.into(),
            })?);
        }
    }
    Ok(Tensor::matrix(n, n, s)?)
}

/// Row-wise softmax of `S / tau`.
pub fn normalize_assignments(s: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(ClarityError::InvalidTemperature(tau));
    }
    Ok(tensor::softmax_rows(s, tau)?)
}

fn check_stochastic(p: &Tensor) -> Result<usize> {
    let (rows, cols) = p.dims2("clarity matrix")?;
    if rows != cols {
        return Err(ClarityError::NotSquare { rows, cols });
    }
    if rows == 0 {
        return Err(ClarityError::Empty);
    }
    for i in 0..rows {
        let sum: f64 = p.row(i).iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || p.row(i).iter().any(|&v| v < 0.0) {
            return Err(ClarityError::NotStochastic { row: i, sum });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClarityMatrix {
    pub m: Tensor,
    /// Frobenius norm from the entries of `M`.
    pub frob: f64,
    /// Same norm from off-diagonal mass plus diagonal shortfall.
    pub frob_decomposed: f64,
}

/// `M = P − I` and `‖M‖_F`.
pub fn clarity_matrix(p: &Tensor) -> Result<ClarityMatrix> {
    let n = check_stochastic(p)?;
    let m = p.add(&Tensor::identity(n).scale(-1.0)?)?;
    let frob = tensor::l2(m.data());
    let mut off = 0.0;
    let mut diag = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = p.get(i, j);
            if i == j {
                diag += (v - 1.0) * (v - 1.0);
            } else {
                off += v * v;
            }
        }
    }
    Ok(ClarityMatrix {
        m,
        frob,
        frob_decomposed: (off + diag).sqrt(),
    })
}

/// `‖M‖_F ≤ ε`.
pub fn is_role_clear(frob: f64, epsilon: f64) -> bool {
    frob <= epsilon
}

/// `1 / (1 + ‖M‖_F)`.
pub fn clarity_score(frob: f64) -> f64 {
    1.0 / (1.0 + frob)
}

/// `−(1/n) Σ_i log P_ii`.
pub fn rc_regularizer(p: &Tensor) -> Result<f64> {
    let n = check_stochastic(p)?;
    let mut total = 0.0;
    for i in 0..n {
        let v = p.get(i, i);
        if v <= 0.0 {
            return Err(ClarityError::NonPositiveDiagonal { row: i, value: v });
        }
        total -= v.ln();
    }
    Ok(total / n as f64)
}

/// Upper bound `2 Σ_i (1 − P_ii)²` on `‖M‖_F²`.
pub fn diagonal_bound(p: &Tensor) -> f64 {
    (0..p.rows()).map(|i| 2.0 * (1.0 - p.get(i, i)).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentMatrices {
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    pub frob: f64,
    pub n: usize,
}

impl AssignmentMatrices {
    pub fn compute(e: &EmbeddingSet, config: &ClarityConfig) -> Result<Self> {
        config.validate()?;
        if e.n() == 1 {
            log::warn!("single agent: role clarity is vacuous (C = 1)");
        }
        let s = assignment_matrix(e)?;
        let p = normalize_assignments(&s, config.tau)?;
        let cm = clarity_matrix(&p)?;
        Ok(Self {
            s: s.to_rows(),
            p: p.to_rows(),
            m: cm.m.to_rows(),
            frob: cm.frob,
            n: e.n(),
        })
    }

    pub fn score(&self) -> f64 {
        clarity_score(self.frob)
    }

    pub fn is_clear(&self, epsilon: f64) -> bool {
        is_role_clear(self.frob, epsilon)
    }

    /// Index of the best-matching role for each agent.
    pub fn argmax_roles(&self) -> Vec<usize> {
        self.s
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Assignment matrices for one trajectory.
///
/// Every registry role present in the trajectory contributes one agent (its
/// first speaker), in registry order. `role_embeddings` is indexed like the
/// registry; `encoder_for` picks the behavior encoder by role id.
pub fn case_assignment<'e>(
    trajectory: &Trajectory,
    registry: &RoleRegistry,
    role_embeddings: &[Vec<f64>],
    encoder_for: &dyn Fn(&str) -> &'e dyn Encoder,
    config: &ClarityConfig,
) -> Result<AssignmentMatrices> {
    let mut roles = Vec::new();
    let mut behaviors = Vec::new();
    for (idx, role) in registry.roles().iter().enumerate() {
        let agent = trajectory
            .messages()
            .iter()
            .find(|m| m.role_id == role.role_id)
            .map(|m| m.agent_id.clone());
        if let Some(agent) = agent {
            behaviors.push(embed_trajectory(encoder_for(&role.role_id), trajectory, &agent)?);
            roles.push(role_embeddings[idx].clone());
        }
    }
    AssignmentMatrices::compute(&EmbeddingSet::new(roles, behaviors)?, config)
}

/// Tape handles for one agent's row of the assignment pipeline.
#[derive(Debug, Clone, Copy)]
pub struct RcRow {
    /// `−log P_ii`, 1×1.
    pub loss: Var,
    /// Row `i` of `P`, 1×n.
    pub p_row: Var,
}

/// Records row `agent` of `P` for a 1×d behavior embedding against n×d role
/// embeddings, and the per-row loss `−log P_ii`.
pub fn rc_row_on_tape(tape: &mut Tape, behavior: Var, roles: Var, agent: usize, tau: f64) -> Result<RcRow> {
    if !(tau > 0.0) {
        return Err(ClarityError::InvalidTemperature(tau));
    }
    let sims = tape.cosine(behavior, roles)?;
    let n = tape.value(sims).cols();
    let p_row = tape.softmax_rows(sims, tau)?;
    let mut pick = vec![0.0; n];
    pick[agent] = 1.0;
    let pick = tape.constant(Tensor::matrix(n, 1, pick)?);
    let p_ii = tape.matmul(p_row, pick)?;
    let log_p = tape.log(p_ii)?;
    let loss = tape.scale(log_p, -1.0)?;
    Ok(RcRow { loss, p_row })
}

/// Records `−(1/n) Σ_i log P_ii` where row `i` of `behaviors` (n×d) is agent `i`.
pub fn rc_regularizer_on_tape(tape: &mut Tape, behaviors: Var, roles: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(ClarityError::InvalidTemperature(tau));
    }
    let sims = tape.cosine(behaviors, roles)?;
    let n = tape.value(sims).rows();
    let p = tape.softmax_rows(sims, tau)?;
    let eye = tape.constant(Tensor::identity(n));
    let diag = tape.mul(p, eye)?;
    // off-diagonal entries become 1 so their log is 0
    let fill = tape.constant(Tensor::ones(vec![n, n]).add(&Tensor::identity(n).scale(-1.0)?)?);
    let diag = tape.add(diag, fill)?;
    let logs = tape.log(diag)?;
    let total = tape.sum(logs)?;
    Ok(tape.scale(total, -1.0 / n as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-6;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mean_pool_example() {
        let h = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(mean_pool(&h).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn assignment_examples() {
        let e = EmbeddingSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(assignment_matrix(&e).unwrap(), Tensor::identity(2));

        let e = EmbeddingSet::new(vec![vec![1.0, 0.0]], vec![vec![1.0, 1.0]]).unwrap();
        assert!(close(assignment_matrix(&e).unwrap().data()[0], std::f64::consts::FRAC_1_SQRT_2, TOL));

        let e = EmbeddingSet::new(vec![vec![1.0, 2.0], vec![-3.0, 1.0]], vec![vec![-1.0, -2.0], vec![3.0, -1.0]]).unwrap();
        let s = assignment_matrix(&e).unwrap();
        assert!(close(s.get(0, 0), -1.0, 1e-12) && close(s.get(1, 1), -1.0, 1e-12));

        assert!(matches!(
            EmbeddingSet::new(vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]]),
            Err(ClarityError::ZeroNorm)
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = normalize_assignments(&Tensor::identity(2), 1.0).unwrap();
        assert!(close(p.get(0, 0), 0.731059, TOL) && close(p.get(0, 1), 0.268941, TOL));
        let p = normalize_assignments(&Tensor::identity(2), 0.5).unwrap();
        assert!(close(p.get(1, 1), 0.880797, TOL));
        let c = Tensor::from_rows(&[[0.3, 0.3, 0.3], [-0.2, -0.2, -0.2], [1.0, 1.0, 1.0]]).unwrap();
        let p = normalize_assignments(&c, 0.7).unwrap();
        assert!(p.data().iter().all(|&v| close(v, 1.0 / 3.0, 1e-12)));
        assert!(normalize_assignments(&c, 0.0).is_err());
        assert!(normalize_assignments(&c, -1.0).is_err());
    }

    #[test]
    fn clarity_matrix_examples() {
        let cm = clarity_matrix(&Tensor::identity(3)).unwrap();
        assert_eq!(cm.frob, 0.0);
        let u2 = Tensor::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let cm = clarity_matrix(&u2).unwrap();
        assert_eq!(cm.m.to_rows(), vec![vec![-0.5, 0.5], vec![0.5, -0.5]]);
        assert!(close(cm.frob, 1.0, 1e-12));
        let third = 1.0 / 3.0;
        let u3 = Tensor::from_rows(&[[third; 3], [third; 3], [third; 3]]).unwrap();
        assert!(close(clarity_matrix(&u3).unwrap().frob, 2f64.sqrt(), 1e-12));
        let bad = Tensor::from_rows(&[[0.6, 0.6], [0.5, 0.5]]).unwrap();
        assert!(matches!(clarity_matrix(&bad), Err(ClarityError::NotStochastic { row: 0, .. })));
    }

    #[test]
    fn predicate_and_score_examples() {
        assert!(is_role_clear(0.5, 0.6));
        assert!(!is_role_clear(0.5, 0.4));
        assert!(is_role_clear(0.5, 0.5));
        assert_eq!(clarity_score(0.0), 1.0);
        assert_eq!(clarity_score(1.0), 0.5);
        assert!(close(clarity_score(0.8769), 0.5328, 5e-5));
    }

    #[test]
    fn rc_examples() {
        let p = normalize_assignments(&Tensor::identity(2), 1.0).unwrap();
        assert!(close(rc_regularizer(&p).unwrap(), 0.313262, TOL));
        let third = 1.0 / 3.0;
        let u3 = Tensor::from_rows(&[[third; 3], [third; 3], [third; 3]]).unwrap();
        assert!(close(rc_regularizer(&u3).unwrap(), 3f64.ln(), 1e-12));
        let near = Tensor::from_rows(&[[1.0 - 1e-12, 1e-12], [1e-12, 1.0 - 1e-12]]).unwrap();
        assert!(rc_regularizer(&near).unwrap() < 1e-11);
        let zero = Tensor::from_rows(&[[0.0, 1.0], [0.5, 0.5]]).unwrap();
        assert!(matches!(rc_regularizer(&zero), Err(ClarityError::NonPositiveDiagonal { row: 0, .. })));
    }

    #[test]
    fn single_agent_is_vacuously_clear() {
        let e = EmbeddingSet::new(vec![vec![1.0, 2.0]], vec![vec![-1.0, 0.5]]).unwrap();
        let am = AssignmentMatrices::compute(&e, &ClarityConfig::default()).unwrap();
        assert_eq!(am.frob, 0.0);
        assert_eq!(am.score(), 1.0);
    }

    #[test]
    fn tape_regularizer_matches_closed_form_and_ignores_roles() {
        let b = Tensor::from_rows(&[[1.0, 0.2, -0.3], [0.1, 0.9, 0.4]]).unwrap();
        let r = Tensor::from_rows(&[[0.8, 0.1, 0.0], [-0.2, 1.0, 0.3]]).unwrap();
        let e = EmbeddingSet::new(r.to_rows(), b.to_rows()).unwrap();
        let p = normalize_assignments(&assignment_matrix(&e).unwrap(), 0.7).unwrap();
        let expected = rc_regularizer(&p).unwrap();

        let mut tape = Tape::new();
        let bv = tape.leaf(b.clone().with_grad(true));
        let rv = tape.constant(r.clone());
        let loss = rc_regularizer_on_tape(&mut tape, bv, rv, 0.7).unwrap();
        assert!(close(tape.value(loss).data()[0], expected, 1e-12));
        let g = tape.backward(loss).unwrap();
        assert!(g.get(bv).is_some());
        assert!(g.get(rv).is_none());

        let report = tensor::finite_diff_check(
            |t, x| {
                let rv = t.constant(r.clone());
                rc_regularizer_on_tape(t, x, rv, 0.7).map_err(|e| match e {
                    ClarityError::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &b,
            tensor::DEFAULT_STEP,
        )
        .unwrap();
        assert!(report < 1e-4, "relative error {report}");
    }

    #[test]
    fn row_loss_matches_regularizer_row() {
        let b = Tensor::from_rows(&[[0.1, 0.9, 0.4]]).unwrap();
        let r = Tensor::from_rows(&[[0.8, 0.1, 0.0], [-0.2, 1.0, 0.3]]).unwrap();
        let mut tape = Tape::new();
        let bv = tape.leaf(b.clone().with_grad(true));
        let rv = tape.constant(r.clone());
        let row = rc_row_on_tape(&mut tape, bv, rv, 1, 1.0).unwrap();
        let p = tape.value(row.p_row).data().to_vec();
        assert!(close(tape.value(row.loss).data()[0], -p[1].ln(), 1e-15));
    }

    fn stochastic(n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(0.001f64..1.0, n * n).prop_map(move |raw| {
            let mut data = raw;
            for i in 0..n {
                let s: f64 = data[i * n..(i + 1) * n].iter().sum();
                data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
            }
            Tensor::matrix(n, n, data).unwrap()
        })
    }

    fn logits(n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |d| Tensor::matrix(n, n, d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn decomposition_and_bound(p in (1usize..8).prop_flat_map(stochastic)) {
            let cm = clarity_matrix(&p).unwrap();
            prop_assert!((cm.frob.powi(2) - cm.frob_decomposed.powi(2)).abs() <= 1e-12);
            prop_assert!(cm.frob.powi(2) <= diagonal_bound(&p) + 1e-12);
            for i in 0..p.rows() {
                prop_assert!(cm.m.row(i).iter().sum::<f64>().abs() <= 1e-9);
            }
        }

        #[test]
        fn softmax_rows_are_stochastic(s in (2usize..8).prop_flat_map(logits), tau in 0.05f64..5.0) {
            let p = normalize_assignments(&s, tau).unwrap();
            for i in 0..p.rows() {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(p.row(i).iter().all(|&v| v > 0.0 && v < 1.0));
            }
            let cm = clarity_matrix(&p).unwrap();
            prop_assert!(cm.frob > 0.0);
            prop_assert!(clarity_score(cm.frob) < 1.0);
        }

        #[test]
        fn raising_diagonal_logit_helps(s in (2usize..6).prop_flat_map(logits), i in 0usize..6, bump in 0.01f64..1.0) {
            let n = s.rows();
            let i = i % n;
            let mut raised = s.clone().into_data();
            raised[i * n + i] += bump;
            let raised = Tensor::matrix(n, n, raised).unwrap();
            let row_term = |p: &Tensor| -> f64 {
                (0..n).map(|j| {
                    let v = p.get(i, j) - if i == j { 1.0 } else { 0.0 };
                    v * v
                }).sum()
            };
            let (p0, p1) = (normalize_assignments(&s, 1.0).unwrap(), normalize_assignments(&raised, 1.0).unwrap());
            prop_assert!(row_term(&p1) < row_term(&p0));
            prop_assert!(-p1.get(i, i).ln() < -p0.get(i, i).ln());
        }

        #[test]
        fn score_decreasing_and_clear_monotone(a in 0.0f64..10.0, d in 1e-6f64..10.0, eps in 1e-3f64..5.0, de in 0.0f64..5.0) {
            prop_assert!(clarity_score(a + d) < clarity_score(a));
            let s = clarity_score(a);
            prop_assert!(s > 0.0 && s <= 1.0);
            if is_role_clear(a, eps) {
                prop_assert!(is_role_clear(a, eps + de));
            }
        }
    }
}
