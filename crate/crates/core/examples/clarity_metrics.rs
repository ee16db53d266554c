//! Assignment matrix, clarity matrix and clarity score for three agents whose
//! behavior embeddings drift toward each other's roles.

use role_clarity::clarity::{
    clarity_matrix, clarity_score, diagonal_bound, normalize_assignments, rc_regularizer, AssignmentMatrices,
    ClarityConfig, EmbeddingSet,
};
use role_clarity::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let roles = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    for drift in [0.0, 0.3, 0.6, 1.0] {
        let behavior = vec![
            vec![1.0, drift, 0.0],
            vec![0.0, 1.0, drift],
            vec![drift, 0.0, 1.0],
        ];
        let am = AssignmentMatrices::compute(&EmbeddingSet::new(roles.clone(), behavior)?, &ClarityConfig::default())?;
        println!(
            "drift {drift:.1}: ||M|| = {:.4}, C = {:.4}, clear at 0.5: {}, RC = {:.4}",
            am.frob,
            am.score(),
            am.is_clear(0.5),
            rc_regularizer(&Tensor::from_rows(&am.p)?)?
        );
    }

    // sharper temperatures push P toward the identity
    let s = Tensor::from_rows(&[[0.9, 0.2], [0.3, 0.8]])?;
    for tau in [2.0, 1.0, 0.1] {
        let p = normalize_assignments(&s, tau)?;
        let cm = clarity_matrix(&p)?;
        println!(
            "tau {tau}: ||M||^2 = {:.6} (decomposed {:.6}, bound {:.6}), C = {:.4}",
            cm.frob.powi(2),
            cm.frob_decomposed.powi(2),
            diagonal_bound(&p),
            clarity_score(cm.frob)
        );
    }
    Ok(())
}
