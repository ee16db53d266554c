//! Checks tape gradients against central differences: first on a small
//! composite function, then on the full training loss of a tiny adapted model.

use role_clarity::selfcheck::{gradient_probe, Fault, GRADIENT_TOL};
use role_clarity::tensor::{finite_diff_check, Tensor, DEFAULT_STEP};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // f(X) = sum(softmax(X W / 0.5)^2)
    let x = Tensor::from_rows(&[[0.3, -1.2, 0.8], [1.5, 0.1, -0.4]])?;
    let w = Tensor::from_rows(&[[0.2, 0.7], [-0.5, 0.3], [0.9, -0.1]])?;
    let err = finite_diff_check(
        |tape, x| {
            let w = tape.constant(w.clone());
            let xw = tape.matmul(x, w)?;
            let p = tape.softmax_rows(xw, 0.5)?;
            let sq = tape.square(p)?;
            tape.sum(sq)
        },
        &x,
        DEFAULT_STEP,
    )?;
    println!("softmax composite: max relative error {err:.3e}");

    for seed in 0..5 {
        let p = gradient_probe(seed, Fault::None)?;
        println!(
            "seed {seed}: training loss max relative error {:.3e} (tolerance {GRADIENT_TOL:e}), frozen gradient {}",
            p.max_rel_error, p.frozen_grad_max
        );
    }
    let broken = gradient_probe(0, Fault::GradientBug)?;
    println!("with a 1% gradient defect: {:.3e}", broken.max_rel_error);
    Ok(())
}
