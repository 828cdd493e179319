//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] owns every node created during a forward pass. Ops append a
//! node holding the forward value and remember their parents, so node ids
//! are already in topological order. [`Tape::backward`] walks the ids in
//! reverse and adds `∂root/∂node` into each node's stored gradient.
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tape::zero_grad`] in between leaves exactly twice the gradient.

use super::{Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Mini-batch statistics computed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (divide-by-B) variance, the one used to normalize.
    pub var: Vec<T>,
    pub count: usize,
}

/// Batch-norm mode: normalize with the batch's own statistics, or with
/// supplied running statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train { eps: T },
    Eval { mean: &'a [T], var: &'a [T], eps: T },
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    Log(Var, T),
    RowSum(Var),
    ColMean(Var),
    Mean(Var),
    Sum(Var),
    Transpose(Var),
    RowNormalize(Var, T),
    ScaleRows(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulT(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b)
            | ScaleRows(a, b) => vec![*a, *b],
            Scale(a, _) | Relu(a) | Tanh(a) | Softmax(a) | Log(a, _) | RowSum(a) | ColMean(a)
            | Mean(a) | Sum(a) | Transpose(a) | RowNormalize(a, _) => vec![*a],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    grad: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable input; its gradient is tracked.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    fn push_unchecked(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        self.push(value, Op::MatMulT(a, b), "matmul_t")
    }

    /// Elementwise sum. `b` may also be a `1×cols` row, broadcast down the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let value = va.add(vb)?;
            return self.push(value, Op::Add(a, b), "add");
        }
        if vb.rows() == 1 && vb.cols() == va.cols() {
            let mut value = va.clone();
            for r in 0..value.rows() {
                for (x, &y) in value.row_mut(r).iter_mut().zip(vb.data()) {
                    *x += y;
                }
            }
            return self.push(value, Op::AddRow(a, b), "add");
        }
        Err(Error::dim(
            "add",
            format!("{:?} + {:?}", va.shape(), vb.shape()),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), "scale")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(T::tanh);
        self.push(value, Op::Tanh(a), "tanh")
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).row_softmax();
        self.push(value, Op::Softmax(a), "softmax")
    }

    /// `ln(a + eps)`.
    pub fn log(&mut self, a: Var, eps: T) -> Result<Var> {
        if eps < T::zero() {
            return Err(Error::Contract(format!("log offset must be >= 0, got {eps}")));
        }
        let value = self.value(a).map(|x| (x + eps).ln());
        self.push(value, Op::Log(a, eps), "log")
    }

    /// Sum of each row, as an `n×1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::column_vector(self.value(a).row_sums());
        self.push(value, Op::RowSum(a), "row_sum")
    }

    /// Mean of each column, as a `1×cols` row.
    pub fn col_mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rows() == 0 {
            return Err(Error::dim("col_mean", "no rows"));
        }
        let value = Matrix::row_vector(self.value(a).col_means());
        self.push(value, Op::ColMean(a), "col_mean")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if self.value(a).is_empty() {
            return Err(Error::dim("mean", "empty operand"));
        }
        let value = Matrix::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a), "mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    /// Unit l2 norm per row; rows shorter than `eps` are divided by `eps` instead.
    pub fn row_normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        let value = self.value(a).row_l2_normalize(eps);
        self.push(value, Op::RowNormalize(a, eps), "row_normalize")
    }

    /// Multiplies row `r` of `a` by `s[r]`, where `s` is an `n×1` column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (self.value(a), self.value(s));
        if vs.shape() != (va.rows(), 1) {
            return Err(Error::dim(
                "scale_rows",
                format!("{:?} by {:?}", va.shape(), vs.shape()),
            ));
        }
        let mut value = va.clone();
        for r in 0..value.rows() {
            let k = vs.data()[r];
            value.row_mut(r).iter_mut().for_each(|x| *x = *x * k);
        }
        self.push(value, Op::ScaleRows(a, s), "scale_rows")
    }

    /// Per-column batch normalization `γ·x̂ + β`, with `gamma`/`beta` as `1×cols` rows.
    ///
    /// In train mode the batch's biased statistics are used (and returned, so
    /// the caller can fold them into running averages) and the gradient flows
    /// through them. In eval mode the supplied statistics are constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let vx = self.value(x);
        let (n, d) = vx.shape();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != (1, d) {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{name} is {:?}, expected (1, {d})", self.value(p).shape()),
                ));
            }
        }
        let (mean, var, eps, stats) = match mode {
            BnMode::Train { eps } => {
                if n == 0 {
                    return Err(Error::dim("batch_norm", "empty batch"));
                }
                let mean = vx.col_means();
                let nt = T::from_usize(n).unwrap();
                let mut var = vec![T::zero(); d];
                for row in vx.row_iter() {
                    for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *v += (x - m) * (x - m);
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / nt);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, eps, Some(stats))
            }
            BnMode::Eval { mean, var, eps } => {
                if mean.len() != d || var.len() != d {
                    return Err(Error::dim(
                        "batch_norm",
                        format!("running stats of width {}/{}, expected {d}", mean.len(), var.len()),
                    ));
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = Matrix::from_fn(n, d, |r, c| (vx.get(r, c) - mean[c]) * inv_std[c]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let value = Matrix::from_fn(n, d, |r, c| g[c] * xhat.get(r, c) + b[c]);
        let batch_stats = stats.is_some();
        let out = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            "batch_norm",
        )?;
        Ok((out, stats))
    }

    /// Adds `∂root/∂node` into every node's gradient. `root` must be 1×1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {shape:?}"
            )));
        }
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(T::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            for (parent, contrib) in self.local_grads(id, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[id].grad.add_assign(&g)?;
        }
        Ok(())
    }

    fn local_grads(&self, id: usize, g: &Matrix<T>) -> Result<Vec<(Var, Matrix<T>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_t(val(*b))?),
                (*b, val(*a).transpose().matmul(g)?),
            ],
            Op::MatMulT(a, b) => vec![
                (*a, g.matmul(val(*b))?),
                (*b, g.transpose().matmul(val(*a))?),
            ],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, b) => vec![(*a, g.clone()), (*b, Matrix::row_vector(g.col_sums()))],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Mul(a, b) => vec![
                (*a, g.hadamard(val(*b))?),
                (*b, g.hadamard(val(*a))?),
            ],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |gi, x| if x > T::zero() { gi } else { T::zero() })?,
            )],
            Op::Tanh(a) => vec![(*a, g.zip_map(&node.value, |gi, y| gi * (T::one() - y * y))?)],
            Op::Softmax(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - inner);
                    }
                }
                vec![(*a, dx)]
            }
            Op::Log(a, eps) => vec![(*a, g.zip_map(val(*a), |gi, x| gi / (x + *eps))?)],
            Op::RowSum(a) => {
                let x = val(*a);
                vec![(*a, Matrix::from_fn(x.rows(), x.cols(), |r, _| g.data()[r]))]
            }
            Op::ColMean(a) => {
                let x = val(*a);
                let n = T::from_usize(x.rows()).unwrap();
                vec![(*a, Matrix::from_fn(x.rows(), x.cols(), |_, c| g.data()[c] / n))]
            }
            Op::Mean(a) => {
                let x = val(*a);
                let n = T::from_usize(x.len()).unwrap();
                vec![(*a, Matrix::filled(x.rows(), x.cols(), g.data()[0] / n))]
            }
            Op::Sum(a) => {
                let x = val(*a);
                vec![(*a, Matrix::filled(x.rows(), x.cols(), g.data()[0]))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::RowNormalize(a, eps) => {
                let (x, y) = (val(*a), &node.value);
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = super::matrix::l2_norm(x.row(r));
                    let (yr, gr) = (y.row(r), g.row(r));
                    if norm >= *eps {
                        let proj: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for ((d, &p), &q) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *d = (q - p * proj) / norm;
                        }
                    } else {
                        for (d, &q) in dx.row_mut(r).iter_mut().zip(gr) {
                            *d = q / *eps;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::ScaleRows(a, s) => {
                let (x, sv) = (val(*a), val(*s));
                let da = Matrix::from_fn(x.rows(), x.cols(), |r, c| g.get(r, c) * sv.data()[r]);
                let ds = Matrix::column_vector(
                    (0..x.rows())
                        .map(|r| super::matrix::dot(g.row(r), x.row(r)))
                        .collect(),
                );
                vec![(*a, da), (*s, ds)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, d) = xhat.shape();
                let gm = val(*gamma).data();
                let dbeta = g.col_sums();
                let dgamma = g.hadamard(xhat)?.col_sums();
                let dx = if *batch_stats {
                    let nt = T::from_usize(n).unwrap();
                    Matrix::from_fn(n, d, |r, c| {
                        gm[c] * inv_std[c] / nt
                            * (nt * g.get(r, c) - dbeta[c] - xhat.get(r, c) * dgamma[c])
                    })
                } else {
                    Matrix::from_fn(n, d, |r, c| g.get(r, c) * gm[c] * inv_std[c])
                };
                vec![
                    (*x, dx),
                    (*gamma, Matrix::row_vector(dgamma)),
                    (*beta, Matrix::row_vector(dbeta)),
                ]
            }
        };
        Ok(out)
    }
}
