use super::{matmul_into, transpose_data, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    L2Norm(Var),
    MeanRows(Var),
    MaxSubtract { input: Var, argmax: Vec<usize> },
    Softmax { input: Var, tau: f64 },
    Cosine(Var, Var),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Parents always precede children.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every `requires_grad` leaf reachable from a loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.slots.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the leaf received none.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Registers a leaf; it is trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Registers a frozen leaf regardless of the tensor's flag.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, parents: &[Var], name: &str) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                context: name.to_string(),
            });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(Tensor::from_parts_unchecked(shape, data), op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.record(out, vec![m, n], Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.record(data, shape, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("subtract", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("multiply", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        self.record(data, shape, op, &[a], name)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scalar-multiply", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(TensorError::LogNonPositive { value: bad });
        }
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    /// Sum of all entries, as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.record(vec![s], vec![1, 1], Op::Sum(a), &[a], "sum")
    }

    /// Euclidean norm of all entries, as a 1×1 tensor.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = super::l2(self.value(a).data());
        if n == 0.0 {
            return Err(TensorError::ZeroNorm { op: "l2-norm" });
        }
        self.record(vec![n], vec![1, 1], Op::L2Norm(a), &[a], "l2-norm")
    }

    /// Mean over rows: an `r×c` input yields a `1×c` output.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("row-wise mean")?;
        if r == 0 {
            return Err(TensorError::NotMatrix {
                op: "row-wise mean",
                shape: vec![r, c],
            });
        }
        let data = self.value(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&data[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        let inv = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.record(out, vec![1, c], Op::MeanRows(a), &[a], "row-wise mean")
    }

    /// Subtracts each row's maximum from that row.
    pub fn max_subtract_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("row-wise max-subtract")?;
        let data = self.value(a).data();
        let mut out = data.to_vec();
        let mut argmax = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let (idx, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            row.iter_mut().for_each(|v| *v -= max);
            argmax.push(idx);
        }
        self.record(
            out,
            vec![r, c],
            Op::MaxSubtract { input: a, argmax },
            &[a],
            "row-wise max-subtract",
        )
    }

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        let out = super::softmax_rows(self.value(a), tau)?;
        let shape = out.shape().to_vec();
        self.record(out.into_data(), shape, Op::Softmax { input: a, tau }, &[a], "row-softmax")
    }

    /// Pairwise cosine similarities between the rows of `a` (m×d) and `b` (n×d): an m×n result.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.value(a).dims2("cosine-similarity")?;
        let (n, d2) = self.value(b).dims2("cosine-similarity")?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine-similarity",
                left: vec![m, d],
                right: vec![n, d2],
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                // Unclamped so the adjoint matches the forward value exactly.
                let (x, y) = (av.row(i), bv.row(j));
                let (nx, ny) = (super::l2(x), super::l2(y));
                if nx == 0.0 || ny == 0.0 {
                    return Err(TensorError::ZeroNorm {
                        op: "cosine-similarity",
                    });
                }
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                out[i * n + j] = dot / (nx * ny);
            }
        }
        self.record(out, vec![m, n], Op::Cosine(a, b), &[a, b], "cosine-similarity")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let data = transpose_data(self.value(a).data(), r, c);
        self.record(data, vec![c, r], Op::Transpose(a), &[a], "transpose")
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }

        let slots = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].requires_grad => Some(Tensor::from_parts_unchecked(
                    self.nodes[i].value.shape().to_vec(),
                    g,
                )),
                _ => None,
            })
            .collect();
        Ok(Gradients { slots })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        contribution(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |slot| {
                    let bt = transpose_data(bv.data(), k, n);
                    matmul_into(g, &bt, slot, m, n, k);
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |slot| {
                    let at = transpose_data(av.data(), m, k);
                    matmul_into(&at, g, slot, k, m, n);
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |s| add_assign(s, g));
                self.accumulate(grads, *b, |s| add_assign(s, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |s| add_assign(s, g));
                self.accumulate(grads, *b, |s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |s| {
                    for ((x, gy), bb) in s.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for ((x, gy), aa) in s.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |s| {
                s.iter_mut().zip(g).for_each(|(x, gy)| *x += c * gy)
            }),
            Op::Exp(a) => self.accumulate(grads, *a, |s| {
                for ((x, gy), y) in s.iter_mut().zip(g).zip(out) {
                    *x += gy * y;
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((x, gy), v) in s.iter_mut().zip(g).zip(av) {
                        *x += gy / v;
                    }
                })
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |s| {
                    for ((x, gy), v) in s.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * v * gy;
                    }
                })
            }
            Op::Sum(a) => self.accumulate(grads, *a, |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::L2Norm(a) => {
                let av = self.value(*a).data();
                let norm = out[0];
                self.accumulate(grads, *a, |s| {
                    for (x, v) in s.iter_mut().zip(av) {
                        *x += g[0] * v / norm;
                    }
                })
            }
            Op::MeanRows(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let inv = 1.0 / r as f64;
                self.accumulate(grads, *a, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j] * inv;
                        }
                    }
                })
            }
            Op::MaxSubtract { input, argmax } => {
                let c = self.value(*input).cols();
                self.accumulate(grads, *input, |s| {
                    for (i, &am) in argmax.iter().enumerate() {
                        let row_g = &g[i * c..(i + 1) * c];
                        let total: f64 = row_g.iter().sum();
                        for j in 0..c {
                            s[i * c + j] += row_g[j];
                        }
                        s[i * c + am] -= total;
                    }
                })
            }
            Op::Softmax { input, tau } => {
                let c = node.value.cols();
                let r = node.value.rows();
                self.accumulate(grads, *input, |s| {
                    for i in 0..r {
                        let y = &out[i * c..(i + 1) * c];
                        let gy = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            s[i * c + j] += y[j] * (gy[j] - dot) / tau;
                        }
                    }
                })
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, d) = (av.rows(), av.cols());
                let n = bv.rows();
                let na: Vec<f64> = (0..m).map(|i| super::l2(av.row(i))).collect();
                let nb: Vec<f64> = (0..n).map(|j| super::l2(bv.row(j))).collect();
                self.accumulate(grads, *a, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let cij = out[i * n + j];
                            let (x, y) = (av.row(i), bv.row(j));
                            for p in 0..d {
                                s[i * d + p] += gij * (y[p] / (na[i] * nb[j]) - cij * x[p] / (na[i] * na[i]));
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            let cij = out[i * n + j];
                            let (x, y) = (av.row(i), bv.row(j));
                            for p in 0..d {
                                s[j * d + p] += gij * (x[p] / (na[i] * nb[j]) - cij * y[p] / (nb[j] * nb[j]));
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                // g is c×r
                let gt = transpose_data(g, c, r);
                self.accumulate(grads, *a, |s| add_assign(s, &gt));
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
