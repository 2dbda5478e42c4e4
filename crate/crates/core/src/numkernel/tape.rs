//! Reverse-mode differentiation over a linear operation record.
//!
//! Every forward pass in the crate, traced or not, is built on a [`Tape`].
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction and backward walks it in exact reverse.
//!
//! The tape also counts floating-point work as nodes are pushed. The cost
//! model is: matmul `2mkn`; row softmax 5 per element (scaling, max
//! subtraction, exp, sum, divide); activations 4 per element; every other
//! arithmetic node 1 per output element; data movement (slice, concat,
//! transpose) and leaves are free.

use super::matrix::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smooth elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    /// `x * sigmoid(x)`.
    Silu,
    Tanh,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf {
        trainable: bool,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row.
    AddRow(Var, Var),
    /// `a + alpha * b`.
    Axpy(Var, Var, T),
    /// `alpha * a + beta`.
    Affine(Var, T, T),
    Mul(Var, Var),
    /// Scales row `i` of `a` by `col[i]`.
    ScaleRows(Var, Var),
    /// Row softmax of `scale * a`.
    SoftmaxRows(Var, T),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    MeanRows(Var),
    Activation(Var, Activation),
    SumAll(Var),
    /// `-log softmax(logits)[label]` for `1 x C` logits.
    CrossEntropy(Var, usize),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Matrix<T>,
    requires_grad: bool,
    flops: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Numerically stable cross-entropy for one example.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - logits[label]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op<T> {
        &self.nodes[v.0].op
    }

    /// Total floating-point work recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops_since(0)
    }

    /// Work recorded by nodes at positions `>= start`.
    pub fn flops_since(&self, start: usize) -> u64 {
        self.nodes[start.min(self.nodes.len())..].iter().map(|n| n.flops).sum()
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.leaf(m, false)
    }

    pub fn param(&mut self, m: Matrix<T>) -> Var {
        self.leaf(m, true)
    }

    fn leaf(&mut self, value: Matrix<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { trainable },
            value,
            requires_grad: trainable,
            flops: 0,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = self.eval(&op)?;
        let flops = self.cost(&op, &value);
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            flops,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn cost(&self, op: &Op<T>, out: &Matrix<T>) -> u64 {
        let n = out.len() as u64;
        match op {
            Op::Leaf { .. } | Op::Transpose(_) | Op::ConcatRows(_) | Op::SliceRows(..) => 0,
            Op::MatMul(a, _) => 2 * n * self.shape(*a).1 as u64,
            Op::SoftmaxRows(..) => 5 * n,
            Op::Activation(..) => 4 * n,
            Op::MeanRows(a) | Op::SumAll(a) => self.value(*a).len() as u64,
            Op::CrossEntropy(a, _) => 5 * self.value(*a).len() as u64,
            _ => n,
        }
    }

    fn eval(&self, op: &Op<T>) -> Result<Matrix<T>> {
        eval_op(op, |v| &self.nodes[v.0].value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn axpy(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        self.push(Op::Axpy(a, b, alpha))
    }

    pub fn affine(&mut self, a: Var, alpha: T, beta: T) -> Result<Var> {
        self.push(Op::Affine(a, alpha, beta))
    }

    pub fn scale(&mut self, a: Var, alpha: T) -> Result<Var> {
        self.push(Op::Affine(a, alpha, T::zero()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::ScaleRows(a, col))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SoftmaxRows(a, T::one()))
    }

    pub fn softmax_rows_scaled(&mut self, a: Var, scale: T) -> Result<Var> {
        self.push(Op::SoftmaxRows(a, scale))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceRows(a, start, len))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.push(Op::Activation(a, act))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumAll(a))
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (rows, cols) = self.shape(logits);
        if rows != 1 || label >= cols {
            return Err(Error::InvalidShape(format!(
                "cross entropy needs 1xC logits and label < C, got {rows}x{cols} and {label}"
            )));
        }
        self.push(Op::CrossEntropy(logits, label))
    }

    /// Re-evaluates every non-leaf node from the stored leaf values.
    pub fn replay(&self) -> Result<Vec<Matrix<T>>> {
        let mut values: Vec<Matrix<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf { .. } => node.value.clone(),
                op => eval_op(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Matrix<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        match op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.needs(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *row, g.sum_rows())?;
            }
            Op::Axpy(a, b, alpha) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(*alpha))?;
            }
            Op::Affine(a, alpha, _) => {
                self.accumulate(grads, *a, g.scale(*alpha))?;
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.hadamard(self.value(*b))?)?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.hadamard(self.value(*a))?)?;
                }
            }
            Op::ScaleRows(a, col) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.scale_rows(self.value(*col))?)?;
                }
                if self.needs(*col) {
                    let av = self.value(*a);
                    let gc = Matrix::from_fn(av.rows(), 1, |r, _| {
                        g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum()
                    });
                    self.accumulate(grads, *col, gc)?;
                }
            }
            Op::SoftmaxRows(a, scale) => {
                // d/dx_j of softmax(s x)_i = s y_i (delta_ij - y_j)
                let mut ga = Matrix::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..out.cols() {
                        ga.set(r, c, *scale * y[c] * (gr[c] - dot));
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose())?,
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p).0;
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, rows)?)?;
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.needs(*a) {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = Matrix::zeros(rows, cols);
                    let data = ga.data_mut();
                    data[start * cols..(start + len) * cols].copy_from_slice(g.data());
                    self.accumulate(grads, *a, ga)?;
                }
            }
            Op::MeanRows(a) => {
                let (rows, cols) = self.shape(*a);
                let inv = T::one() / T::from_usize(rows).expect("rows");
                let ga = Matrix::from_fn(rows, cols, |_, c| g.get(0, c) * inv);
                self.accumulate(grads, *a, ga)?;
            }
            Op::Activation(a, act) => {
                let ga = self.value(*a).map(|x| act.derivative(x)).hadamard(g)?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.shape(*a);
                self.accumulate(grads, *a, Matrix::filled(rows, cols, g.get(0, 0)))?;
            }
            Op::CrossEntropy(a, label) => {
                let mut ga = self.value(*a).softmax_rows();
                let l = ga.get(0, *label);
                ga.set(0, *label, l - T::one());
                self.accumulate(grads, *a, ga.scale(g.get(0, 0)))?;
            }
        }
        Ok(())
    }
}

fn inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Axpy(a, b, _)
        | Op::Mul(a, b)
        | Op::ScaleRows(a, b) => {
            vec![*a, *b]
        }
        Op::Affine(a, ..)
        | Op::SoftmaxRows(a, _)
        | Op::Transpose(a)
        | Op::SliceRows(a, ..)
        | Op::MeanRows(a)
        | Op::Activation(a, _)
        | Op::SumAll(a)
        | Op::CrossEntropy(a, _) => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
    }
}

fn eval_op<'a, T: Scalar>(op: &Op<T>, val: impl Fn(Var) -> &'a Matrix<T>) -> Result<Matrix<T>> {
    Ok(match op {
        Op::Leaf { .. } => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::Add(a, b) => val(*a).add(val(*b))?,
        Op::AddRow(a, row) => val(*a).add_row(val(*row))?,
        Op::Axpy(a, b, alpha) => val(*a).axpy(val(*b), *alpha)?,
        Op::Affine(a, alpha, beta) => {
            let (alpha, beta) = (*alpha, *beta);
            if beta == T::zero() {
                val(*a).map(|x| alpha * x)
            } else {
                val(*a).map(|x| alpha * x + beta)
            }
        }
        Op::Mul(a, b) => val(*a).hadamard(val(*b))?,
        Op::ScaleRows(a, col) => val(*a).scale_rows(val(*col))?,
        Op::SoftmaxRows(a, scale) => val(*a).softmax_rows_scaled(*scale),
        Op::Transpose(a) => val(*a).transpose(),
        Op::ConcatRows(parts) => {
            let ms: Vec<&Matrix<T>> = parts.iter().map(|p| val(*p)).collect();
            Matrix::concat_rows(&ms)?
        }
        Op::SliceRows(a, start, len) => val(*a).slice_rows(*start, *len)?,
        Op::MeanRows(a) => val(*a).mean_rows()?,
        Op::Activation(a, act) => val(*a).map(|x| act.apply(x)),
        Op::SumAll(a) => Matrix::filled(1, 1, val(*a).sum()),
        Op::CrossEntropy(a, label) => Matrix::filled(1, 1, cross_entropy(val(*a).data(), *label)),
    })
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::fd::{fd_gradient, relative_error};
    use crate::numkernel::rng::RngStream;

    #[test]
    fn linear_map_gradient_is_outer_structure() {
        // loss = sum(W x); d/dW[i][j] = x[j] for every row i.
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 2.0]]));
        let x = tape.constant(Matrix::from_rows(&[&[0.5], &[-2.0], &[4.0]]));
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap().wrt(w);
        assert_eq!(g, Matrix::from_rows(&[&[0.5, -2.0, 4.0], &[0.5, -2.0, 4.0]]));
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Matrix::from_rows(&[&[1.0, 2.0]]));
        let c = tape.constant(Matrix::from_rows(&[&[3.0]]));
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w), Matrix::zeros(1, 2));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(w),
            Err(Error::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    fn composite(tape: &mut Tape<f64>, p: &[Var], x: Var) -> Var {
        // Exercises every primitive op.
        let h = tape.matmul(x, p[0]).unwrap();
        let h = tape.add_row(h, p[1]).unwrap();
        let h = tape.activation(h, Activation::Silu).unwrap();
        let ht = tape.transpose(h).unwrap();
        let scores = tape.matmul(h, ht).unwrap();
        let att = tape.softmax_rows_scaled(scores, 0.5).unwrap();
        let mixed = tape.matmul(att, h).unwrap();
        let r = tape.axpy(h, mixed, 0.7).unwrap();
        let top = tape.slice_rows(r, 0, 2).unwrap();
        let bottom = tape.slice_rows(r, 2, 2).unwrap();
        let sq = tape.mul(top, bottom).unwrap();
        let cat = tape.concat_rows(&[sq, bottom]).unwrap();
        let gate_logit = tape.matmul(cat, p[2]).unwrap();
        let gate = tape.activation(gate_logit, Activation::Sigmoid).unwrap();
        let one_minus = tape.affine(gate, -1.0, 1.0).unwrap();
        let gated = tape.scale_rows(cat, one_minus).unwrap();
        let t = tape.activation(gated, Activation::Tanh).unwrap();
        let pooled = tape.mean_rows(t).unwrap();
        let logits = tape.matmul(pooled, p[3]).unwrap();
        tape.cross_entropy(logits, 1).unwrap()
    }

    #[test]
    fn backward_matches_finite_differences_on_composite_graph() {
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 0);
            let params: Vec<Matrix<f64>> = vec![
                rng.normal_matrix(3, 3, 0.8),
                rng.normal_matrix(1, 3, 0.5),
                rng.normal_matrix(3, 1, 0.8),
                rng.normal_matrix(3, 4, 0.8),
            ];
            let x = rng.normal_matrix::<f64>(4, 3, 1.0);

            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let xv = tape.constant(x.clone());
            let loss = composite(&mut tape, &vars, xv);
            let grads = tape.backward(loss).unwrap();

            let numeric = fd_gradient(
                |ps: &[Matrix<f64>]| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
                    let xv = t.constant(x.clone());
                    let l = composite(&mut t, &vs, xv);
                    t.value(l).get(0, 0)
                },
                &params,
                1e-5,
            );
            for (v, n) in vars.iter().zip(&numeric) {
                let err = relative_error(&grads.wrt(*v), n);
                assert!(err < 1e-4, "seed {seed}: relative error {err}");
            }
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = RngStream::new(9, 0);
        let params: Vec<Matrix<f64>> = vec![
            rng.normal_matrix(3, 3, 0.8),
            rng.normal_matrix(1, 3, 0.5),
            rng.normal_matrix(3, 1, 0.8),
            rng.normal_matrix(3, 4, 0.8),
        ];
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let xv = tape.constant(rng.normal_matrix(4, 3, 1.0));
        composite(&mut tape, &vars, xv);
        let replayed = tape.replay().unwrap();
        for (i, m) in replayed.iter().enumerate() {
            assert!(m.bitwise_eq(tape.value(Var(i))));
        }
    }

    #[test]
    fn flop_counter_follows_cost_model() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Matrix::zeros(3, 4));
        let b = tape.constant(Matrix::zeros(4, 5));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.flops(), 2 * 3 * 4 * 5);
        let mark = tape.len();
        tape.softmax_rows(c).unwrap();
        assert_eq!(tape.flops_since(mark), 5 * 15);
    }
}
