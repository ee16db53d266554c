//! Central-difference gradient checking.

use super::{Result, Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Checks the tape gradient of a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
        .map(|r| r.max_rel_error)
}

/// Checks the tape gradients of a scalar function of several tensors at once.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, xs)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out)
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(tape.value(out).shape().to_vec()))
    };

    let mut numeric = Vec::with_capacity(xs.len());
    let mut worst = None;
    let mut max_rel_error: f64 = 0.0;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let mut grad = vec![0.0; x.len()];
        for idx in 0..x.len() {
            let base = x.data()[idx];
            probe[k] = with_coordinate(x, idx, base + h)?;
            let plus = eval(&probe)?;
            probe[k] = with_coordinate(x, idx, base - h)?;
            let minus = eval(&probe)?;
            probe[k] = x.clone();
            let g = (plus - minus) / (2.0 * h);
            if !g.is_finite() {
                return Err(TensorError::NonFiniteProbe { index: idx });
            }
            grad[idx] = g;
            let a = analytic[k].data()[idx];
            let err = (a - g).abs() / g.abs().max(1.0);
            if worst.is_none() || err > max_rel_error {
                max_rel_error = err;
                worst = Some((k, idx));
            }
        }
        numeric.push(Tensor::new(x.shape().to_vec(), grad)?);
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

fn analytic_gradients<F>(f: &F, xs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let loss = f(&mut tape, &vars)?;
    match tape.backward(loss) {
        Ok(g) => Ok(vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.get_or_zeros(*v, x))
            .collect()),
        // A loss that never touches the inputs has a zero gradient.
        Err(TensorError::Detached) => Ok(xs.iter().map(|x| Tensor::zeros(x.shape().to_vec())).collect()),
        Err(e) => Err(e),
    }
}

fn with_coordinate(x: &Tensor, idx: usize, value: f64) -> Result<Tensor> {
    let mut data = x.data().to_vec();
    data[idx] = value;
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.0], [0.1, 0.5, -0.7]]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let err = finite_diff_check(|t, _| Ok(t.constant(Tensor::scalar(3.0)?)), &x, DEFAULT_STEP).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_probe_is_reported() {
        let x = Tensor::scalar(700.0).unwrap();
        // exp overflows at x + h
        let r = finite_diff_check(|t, x| {
            let y = t.scale(x, 1.0142)?;
            let e = t.exp(y)?;
            t.sum(e)
        }, &x, 1e-5);
        assert!(r.is_err());
    }
}
