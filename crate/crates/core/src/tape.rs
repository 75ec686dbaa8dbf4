//! Reverse-mode differentiation over a linear operation record.
//!
//! Every forward pass builds a fresh [`Tape`]; values live in the tape's
//! nodes and are addressed through lightweight [`Var`] handles. Calling
//! [`Tape::backward`] replays adjoints from the loss back to the leaves.

use rand::Rng;

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    LogClamped(Var, f64),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Mask(Var, Vec<f64>),
    PairwiseSqDist(Var, Var),
    DivScalar(Var, Var),
    /// Parts, then the (part, flat index, weight) entries the median averages.
    Median(Vec<Var>, Vec<(usize, usize, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a (m×k) · bᵀ` where `b` is stored as `n×k`.
fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `aᵀ · b` where `a` is stored as `k×m` and `b` as `k×n`.
fn matmul_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let av = a[l * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

fn softmax_rows(data: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &data[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            total += *o;
        }
        orow.iter_mut().for_each(|o| *o /= total);
    }
    out
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

    /// Which side of its breakpoint every input of a piecewise op (`relu`,
    /// `abs`, `log_clamped`) lies on. Two evaluations with equal patterns
    /// follow the same smooth branch.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::Abs(a) => out.extend(self.value(*a).data().iter().map(|&x| x > 0.0)),
                Op::LogClamped(a, floor) => out.extend(self.value(*a).data().iter().map(|&x| x > *floor)),
                Op::Median(parts, picked) => {
                    let chosen: Vec<f64> = picked.iter().map(|&(p, i, _)| self.value(parts[p]).data()[i]).collect();
                    let (lo, hi) = (chosen[0], chosen[chosen.len() - 1]);
                    for p in parts {
                        out.extend(self.value(*p).data().iter().flat_map(|&x| [x < lo, x > hi]));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let mut value = value;
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let c = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.any_grad(&[a, b]);
        self.push(Tensor::matrix(m, n, c), Op::MatMul(a, b), ng, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.dims2(a, "transpose")?;
        let t = self.value(a).transpose();
        let ng = self.any_grad(&[a]);
        self.push(t, Op::Transpose(a), ng, "transpose")
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.any_grad(&[a, b]);
        self.push(t, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a `1×c` row vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_row")?;
        let (br, bc) = self.dims2(bias, "add_row")?;
        if br != 1 || bc != c {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![br, bc],
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let ng = self.any_grad(&[a, bias]);
        self.push(Tensor::matrix(r, c, data), Op::AddRow(a, bias), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * factor);
        let ng = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, factor), ng, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        let ng = self.any_grad(&[a]);
        self.push(t, Op::AddScalar(a), ng, "add_scalar")
    }

    /// Elementwise `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.any_grad(&[a]);
        self.push(t, Op::Relu(a), ng, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        let ng = self.any_grad(&[a]);
        self.push(t, Op::Sigmoid(a), ng, "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        let ng = self.any_grad(&[a]);
        self.push(t, Op::Exp(a), ng, "exp")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::abs);
        let ng = self.any_grad(&[a]);
        self.push(t, Op::Abs(a), ng, "abs")
    }

    /// `ln(max(x, floor))`; no gradient flows through clamped entries.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(floor).ln());
        let ng = self.any_grad(&[a]);
        self.push(t, Op::LogClamped(a, floor), ng, "log_clamped")
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_softmax")?;
        let data = softmax_rows(self.value(a).data(), r, c);
        let ng = self.any_grad(&[a]);
        self.push(Tensor::matrix(r, c, data), Op::RowSoftmax(a), ng, "row_softmax")
    }

    /// Appends columns of `parts` in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.any_grad(parts);
        self.push(
            Tensor::matrix(rows, total, data),
            Op::ConcatCols(parts.to_vec()),
            ng,
            "concat_cols",
        )
    }

    /// Stacks rows of `parts` in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let ng = self.any_grad(parts);
        self.push(
            Tensor::matrix(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
            "concat_rows",
        )
    }

    /// Column means of an `r×c` matrix, as `1×c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.any_grad(&[a]);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows(a), ng, "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1/(1-p)`. Returns `a` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let ng = self.any_grad(&[a]);
        self.push(t, Op::Mask(a, mask), ng, "dropout")
    }

    /// Squared Euclidean distances between the rows of `a (n×d)` and `b (m×d)`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "pairwise_sq_dist")?;
        let (m, d2) = self.dims2(b, "pairwise_sq_dist")?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_sq_dist",
                lhs: vec![n, d],
                rhs: vec![m, d2],
            });
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..d).map(|k| (va[i * d + k] - vb[j * d + k]).powi(2)).sum();
            }
        }
        let ng = self.any_grad(&[a, b]);
        self.push(
            Tensor::matrix(n, m, out),
            Op::PairwiseSqDist(a, b),
            ng,
            "pairwise_sq_dist",
        )
    }

    /// Divides every entry of `a` by the `1×1` value `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "div_scalar",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let d = self.value(s).item();
        let t = self.value(a).map(|x| x / d);
        let ng = self.any_grad(&[a, s]);
        self.push(t, Op::DivScalar(a, s), ng, "div_scalar")
    }

    /// Median of all entries of `parts` pooled together; an even count
    /// averages the two middle entries. The gradient flows to the entries
    /// the median selects.
    pub fn median(&mut self, parts: &[Var]) -> Result<Var> {
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for (p, v) in parts.iter().enumerate() {
            all.extend(self.value(*v).data().iter().enumerate().map(|(i, &x)| (x, p, i)));
        }
        if all.is_empty() {
            return Err(TensorError::Empty { op: "median" });
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = all.len();
        let picked: Vec<(usize, usize, f64)> = if n % 2 == 1 {
            vec![(all[n / 2].1, all[n / 2].2, 1.0)]
        } else {
            vec![
                (all[n / 2 - 1].1, all[n / 2 - 1].2, 0.5),
                (all[n / 2].1, all[n / 2].2, 0.5),
            ]
        };
        let value = picked.iter().map(|&(p, i, w)| w * self.value(parts[p]).data()[i]).sum();
        let ng = self.any_grad(parts);
        self.push(Tensor::scalar(value), Op::Median(parts.to_vec(), picked), ng, "median")
    }

    /// Propagates adjoints from a scalar `loss` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut grads);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf if n.needs_grad => grads[i].take(),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves, visited })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if wants(*a) {
                    accumulate(&mut grads[a.0], matmul_bt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], matmul_at(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let gt = Tensor::matrix(r, c, g.to_vec()).transpose();
                accumulate(&mut grads[a.0], gt.into_data());
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if wants(*bias) {
                    let c = node.value.cols();
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::Scale(a, f) => accumulate(&mut grads[a.0], g.iter().map(|x| x * f).collect()),
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.to_vec()),
            Op::Relu(a) => accumulate(
                &mut grads[a.0],
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(a) => accumulate(
                &mut grads[a.0],
                g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y)).collect(),
            ),
            Op::Exp(a) => accumulate(&mut grads[a.0], g.iter().zip(out).map(|(x, y)| x * y).collect()),
            Op::Abs(a) => accumulate(
                &mut grads[a.0],
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| {
                        if v > 0.0 {
                            *x
                        } else if v < 0.0 {
                            -x
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            ),
            Op::LogClamped(a, floor) => accumulate(
                &mut grads[a.0],
                g.iter()
                    .zip(val(*a))
                    .map(|(x, &v)| if v > *floor { x / v } else { 0.0 })
                    .collect(),
            ),
            Op::RowSoftmax(a) => {
                let c = node.value.cols();
                let mut ga = vec![0.0; g.len()];
                for ((grow, yrow), orow) in g.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((o, x), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o = y * (x - dot);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if wants(*p) {
                        let gp = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(&mut grads[p.0], gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if wants(*p) {
                        accumulate(&mut grads[p.0], g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::MeanRows(a) => {
                let r = self.value(*a).rows() as f64;
                let n = self.value(*a).len();
                let ga = (0..n).map(|i| g[i % g.len()] / r).collect();
                accumulate(&mut grads[a.0], ga);
            }
            Op::Sum(a) => accumulate(&mut grads[a.0], vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], vec![g[0] / n as f64; n]);
            }
            Op::Mask(a, mask) => accumulate(&mut grads[a.0], g.iter().zip(mask).map(|(x, m)| x * m).collect()),
            Op::PairwiseSqDist(a, b) => {
                let (n, d) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).rows();
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    for j in 0..m {
                        let gij = 2.0 * g[i * m + j];
                        for k in 0..d {
                            let diff = gij * (va[i * d + k] - vb[j * d + k]);
                            ga[i * d + k] += diff;
                            gb[j * d + k] -= diff;
                        }
                    }
                }
                if wants(*a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s).item();
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|x| x / d).collect());
                }
                if wants(*s) {
                    let dot: f64 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads[s.0], vec![-dot / (d * d)]);
                }
            }
            Op::Median(parts, picked) => {
                for &(p, i, w) in picked {
                    let v = parts[p];
                    if wants(v) {
                        let mut gv = vec![0.0; self.value(v).len()];
                        gv[i] = w * g[0];
                        accumulate(&mut grads[v.0], gv);
                    }
                }
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when the leaf is unreachable from the loss
    /// or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf as a tensor; unreachable leaves yield zeros.
    pub fn tensor(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Adds this leaf's gradient into `target`'s gradient slot, if enabled.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor) {
        if let Some(g) = self.get(v) {
            target.accumulate_grad(g);
        }
    }

    /// Number of non-leaf operations whose adjoints were replayed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
