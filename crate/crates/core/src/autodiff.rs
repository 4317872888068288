//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Only the operations needed by the coupling layers, the factorized
//! densities and the rate/distortion losses are provided. Every op records
//! its inputs by index; nodes are appended in evaluation order, so the tape is
//! acyclic by construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{leaky_relu, sigmoid, sigmoid_diff, softplus, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    SigmoidDiff(Var, Var),
    ClampMin(Var, T),
    Log2(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    GatherCols(Var, Vec<usize>),
    MergeCols(Var, Vec<usize>, Var, Vec<usize>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    AffineClamp01(Var, T, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.value(x).linear(self.value(w), self.value(b));
        self.push(y, Op::Linear(x, w, b), &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip(self.value(b), |p, q| p + q);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip(self.value(b), |p, q| p - q);
        self.push(y, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip(self.value(b), |p, q| p * q);
        self.push(y, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let y = self.value(a).mul_row(self.value(row));
        self.push(y, Op::MulRow(a, row), &[a, row])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let y = self.value(a).add_row(self.value(row));
        self.push(y, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|v| v * c);
        self.push(y, Op::Scale(a, c), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(T::exp);
        self.push(y, Op::Exp(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).map(T::tanh);
        self.push(y, Op::Tanh(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let y = self.value(a).map(|v| leaky_relu(v, slope));
        self.push(y, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.value(a).map(softplus);
        self.push(y, Op::Softplus(a), &[a])
    }

    /// `σ(upper) − σ(lower)`, elementwise.
    pub fn sigmoid_diff(&mut self, upper: Var, lower: Var) -> Var {
        let y = self.value(upper).zip(self.value(lower), sigmoid_diff);
        self.push(y, Op::SigmoidDiff(upper, lower), &[upper, lower])
    }

    pub fn clamp_min(&mut self, a: Var, floor: T) -> Var {
        let y = self.value(a).map(|v| v.max(floor));
        self.push(y, Op::ClampMin(a, floor), &[a])
    }

    pub fn log2(&mut self, a: Var) -> Var {
        let y = self.value(a).map(T::log2);
        self.push(y, Op::Log2(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let y = self.value(a).map(T::abs);
        self.push(y, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v * v);
        self.push(y, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a), &[a])
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let y = self.value(a).gather_cols(idx);
        self.push(y, Op::GatherCols(a, idx.to_vec()), &[a])
    }

    pub fn merge_cols(&mut self, a: Var, a_idx: &[usize], b: Var, b_idx: &[usize]) -> Var {
        let y = Tensor::merge_cols(self.value(a), a_idx, self.value(b), b_idx);
        self.push(
            y,
            Op::MergeCols(a, a_idx.to_vec(), b, b_idx.to_vec()),
            &[a, b],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let y = self.value(a).slice_rows(start, end);
        self.push(y, Op::SliceRows(a, start), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_rows(&values);
        self.push(y, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let y = self.value(a).reshape(rows, cols);
        self.push(y, Op::Reshape(a), &[a])
    }

    /// `clamp(scale·x + offset, 0, 1)`: the CDF of a uniform density.
    pub fn affine_clamp01(&mut self, a: Var, scale: T, offset: T) -> Var {
        let y = self
            .value(a)
            .map(|v| (v * scale + offset).max(T::zero()).min(T::one()));
        self.push(y, Op::AffineClamp01(a, scale, offset), &[a])
    }

    /// Reverse sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.shape() != (1, 1) {
            return Err(Error::Internal(format!(
                "backward from non-scalar node of shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.all_finite() {
            return Err(Error::Internal("backward from non-finite loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(node, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Linear(x, w, b) => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                let (nin, nout) = (wv.cols(), wv.rows());
                {
                    let dxd = dx.data_mut();
                    for n in 0..xv.rows() {
                        let gy = g.row(n);
                        for (o, &go) in gy.iter().enumerate() {
                            if go == T::zero() {
                                continue;
                            }
                            let wr = wv.row(o);
                            for i in 0..nin {
                                dxd[n * nin + i] += go * wr[i];
                            }
                        }
                    }
                }
                {
                    let dwd = dw.data_mut();
                    for n in 0..xv.rows() {
                        let xr = xv.row(n);
                        let gy = g.row(n);
                        for o in 0..nout {
                            let go = gy[o];
                            if go == T::zero() {
                                continue;
                            }
                            for i in 0..nin {
                                dwd[o * nin + i] += go * xr[i];
                            }
                        }
                    }
                }
                vec![(*x, dx), (*w, dw), (*b, g.col_sums())]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip(val(*b), |p, q| p * q)),
                (*b, g.zip(val(*a), |p, q| p * q)),
            ],
            Op::MulRow(a, row) => vec![
                (*a, g.mul_row(val(*row))),
                (*row, g.zip(val(*a), |p, q| p * q).col_sums()),
            ],
            Op::AddRow(a, row) => vec![(*a, g.clone()), (*row, g.col_sums())],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * *c))],
            Op::Exp(a) => vec![(*a, g.zip(out, |p, y| p * y))],
            Op::Tanh(a) => vec![(*a, g.zip(out, |p, y| p * (T::one() - y * y)))],
            Op::LeakyRelu(a, slope) => vec![(
                *a,
                g.zip(val(*a), |p, x| if x > T::zero() { p } else { p * *slope }),
            )],
            Op::Softplus(a) => vec![(*a, g.zip(val(*a), |p, x| p * sigmoid(x)))],
            Op::SigmoidDiff(u, l) => {
                let dsig = |x: T| sigmoid(x) * sigmoid(-x);
                vec![
                    (*u, g.zip(val(*u), |p, x| p * dsig(x))),
                    (*l, g.zip(val(*l), |p, x| -p * dsig(x))),
                ]
            }
            Op::ClampMin(a, floor) => vec![(
                *a,
                g.zip(val(*a), |p, x| if x > *floor { p } else { T::zero() }),
            )],
            Op::Log2(a) => {
                let ln2 = T::of(std::f64::consts::LN_2);
                vec![(*a, g.zip(val(*a), |p, x| p / (x * ln2)))]
            }
            Op::Abs(a) => vec![(
                *a,
                g.zip(val(*a), |p, x| {
                    if x > T::zero() {
                        p
                    } else if x < T::zero() {
                        -p
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Square(a) => vec![(*a, g.zip(val(*a), |p, x| p * (x + x)))],
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, Tensor::filled(r, c, g.get(0, 0)))]
            }
            Op::GatherCols(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut da = Tensor::zeros(r, c);
                let d = da.data_mut();
                for row in 0..r {
                    for (k, &col) in idx.iter().enumerate() {
                        d[row * c + col] += g.get(row, k);
                    }
                }
                vec![(*a, da)]
            }
            Op::MergeCols(a, a_idx, b, b_idx) => {
                vec![(*a, g.gather_cols(a_idx)), (*b, g.gather_cols(b_idx))]
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut da = Tensor::zeros(r, c);
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, da)]
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let rows = val(p).rows();
                        let part = g.slice_rows(at, at + rows);
                        at += rows;
                        (p, part)
                    })
                    .collect()
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                vec![(*a, g.reshape(r, c))]
            }
            Op::AffineClamp01(a, scale, offset) => vec![(
                *a,
                g.zip(val(*a), |p, x| {
                    let y = x * *scale + *offset;
                    if y > T::zero() && y < T::one() {
                        p * *scale
                    } else {
                        T::zero()
                    }
                }),
            )],
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var, graph: &Graph<T>) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = graph.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}
