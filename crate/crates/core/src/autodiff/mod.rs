//! Dense-matrix reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] then walks the record in reverse and
//! returns the gradient of a scalar loss with respect to every trainable
//! leaf. Tapes are single-use: build a fresh one per forward pass.
//!
//! ```
//! use tmgp::autodiff::Tape;
//! use tmgp::Matrix;
//!
//! let tape = Tape::new();
//! let x = tape.param(Matrix::from_rows(&[[1.0, 2.0]]));
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
//! ```

mod adam;

pub use adam::{Adam, AdamConfig, AdamState};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::matrix::Matrix;

pub type Shape = (usize, usize);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("backward: loss must be 1x1, got {0:?}")]
    NonScalarLoss(Shape),
    #[error("backward: loss does not belong to this tape")]
    ForeignTape,
    #[error("backward: tape was already consumed by a previous backward pass")]
    Consumed,
    #[error("{0}: degenerate input")]
    Degenerate(&'static str),
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    Ln(usize),
    Sqrt(usize),
    Clamp(usize, f64, f64),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    RowL2Norms(usize),
    Normalize(usize),
    Gather(usize, Rc<[Option<usize>]>),
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
///
/// Node ids are assigned in record order, so every input id precedes the id
/// of the node computed from it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    shape: Shape,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf; its gradient is reported by [`Tape::backward`].
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Var<'_> {
        let shape = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
            shape,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(AutodiffError::ForeignTape);
        }
        if loss.shape != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(loss.shape));
        }
        if self.consumed.replace(true) {
            return Err(AutodiffError::Consumed);
        }

        let nodes = self.nodes.borrow();
        let mut adjoint: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        adjoint[loss.id] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adjoint[id].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                adjoint[id] = Some(g);
                continue;
            }
            for (input, contrib) in local_gradients(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut adjoint[input] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut grads = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = adjoint
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                grads.push((id, g));
            }
        }
        Ok(Gradients { grads })
    }
}

/// Vector-Jacobian products of one recorded node.
fn local_gradients(nodes: &[Node], node: &Node, g: &Matrix) -> Vec<(usize, Matrix)> {
    let val = |id: usize| -> &Matrix { &nodes[id].value };
    let out = &*node.value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let mut v = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                v.push((*a, g.matmul_t(val(*b))));
            }
            if nodes[*b].requires_grad {
                v.push((*b, val(*a).t_matmul(g)));
            }
            v
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scaled(-1.0))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |g, y| g * y)),
            (*b, g.zip_map(val(*a), |g, x| g * x)),
        ],
        Op::Scale(a, s) => vec![(*a, g.scaled(*s))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))],
        Op::Sigmoid(a) => vec![(*a, g.zip_map(out, |g, y| g * y * (1.0 - y)))],
        Op::Abs(a) => vec![(*a, g.zip_map(val(*a), |g, x| g * sign(x)))],
        Op::Ln(a) => vec![(*a, g.zip_map(val(*a), |g, x| g / x))],
        Op::Sqrt(a) => vec![(*a, g.zip_map(out, |g, y| g / (2.0 * y)))],
        Op::Clamp(a, lo, hi) => vec![(
            *a,
            g.zip_map(val(*a), |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
        )],
        Op::Transpose(a) => vec![(*a, g.transpose())],
        Op::Sum(a) => {
            let x = val(*a);
            vec![(*a, Matrix::filled(x.rows(), x.cols(), g.item()))]
        }
        Op::Mean(a) => {
            let x = val(*a);
            vec![(*a, Matrix::filled(x.rows(), x.cols(), g.item() / x.len() as f64))]
        }
        Op::RowL2Norms(a) => {
            let x = val(*a);
            let mut d = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let norm = out.get(r, 0);
                if norm > 0.0 {
                    let scale = g.get(r, 0) / norm;
                    for (dst, &xv) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                        *dst = scale * xv;
                    }
                }
            }
            vec![(*a, d)]
        }
        Op::Normalize(a) => {
            let norm = val(*a).frobenius_norm();
            let dot: f64 = out.as_slice().iter().zip(g.as_slice()).map(|(y, g)| y * g).sum();
            vec![(*a, g.zip_map(out, |g, y| (g - y * dot) / norm))]
        }
        Op::Gather(a, index) => {
            let x = val(*a);
            let mut d = Matrix::zeros(x.rows(), x.cols());
            let dst = d.as_mut_slice();
            for (k, slot) in index.iter().enumerate() {
                if let Some(src) = slot {
                    dst[*src] += g.as_slice()[k];
                }
            }
            vec![(*a, d)]
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value_of(self.id)
    }

    /// Value of a 1×1 tensor.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(self, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var<'t> {
        let value = f(&self.value());
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary_same_shape(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.check_same_tape(other);
        if self.shape != other.shape {
            return Err(AutodiffError::Dimension {
                op: name,
                left: self.shape,
                right: other.shape,
            });
        }
        let value = self.value().zip_map(&other.value(), f);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn check_same_tape(&self, other: Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other);
        if self.cols() != other.rows() {
            return Err(AutodiffError::Dimension {
                op: "matmul",
                left: self.shape,
                right: other.shape,
            });
        }
        let value = self.value().matmul(&other.value());
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x.scaled(s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x.map(|v| v + s))
    }

    /// `max(x, 0)` with derivative 0 at the kink.
    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| x.map(sigmoid))
    }

    /// `|x|` with derivative `sign(x)`, `sign(0) = 0`.
    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |x| x.map(f64::abs))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln(self.id), |x| x.map(f64::ln))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), |x| x.map(f64::sqrt))
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |x| x.map(|v| v.clamp(lo, hi)))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Matrix::transpose)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.nonempty("sum")?;
        Ok(self.unary(Op::Sum(self.id), |x| Matrix::scalar(x.sum())))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.nonempty("mean")?;
        Ok(self.unary(Op::Mean(self.id), |x| Matrix::scalar(x.mean())))
    }

    /// Euclidean norm of every row, as a `rows × 1` column.
    pub fn row_l2_norms(self) -> Result<Var<'t>> {
        self.nonempty("row_l2_norms")?;
        Ok(self.unary(Op::RowL2Norms(self.id), |x| {
            let norms: Vec<f64> = (0..x.rows())
                .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            Matrix::column(&norms)
        }))
    }

    /// Divides by the Frobenius norm.
    pub fn normalize(self) -> Result<Var<'t>> {
        self.nonempty("normalize")?;
        let norm = self.value().frobenius_norm();
        if !(norm > 0.0) {
            return Err(AutodiffError::Degenerate("normalize"));
        }
        Ok(self.unary(Op::Normalize(self.id), |x| x.scaled(1.0 / norm)))
    }

    /// Builds a `rows × cols` tensor whose entry `k` (row-major) is
    /// `self[index[k]]` (flat row-major index) or zero for `None`.
    pub fn gather(self, rows: usize, cols: usize, index: Rc<[Option<usize>]>) -> Result<Var<'t>> {
        if index.len() != rows * cols {
            return Err(AutodiffError::Dimension {
                op: "gather",
                left: (rows, cols),
                right: (index.len(), 1),
            });
        }
        let value = {
            let src = self.value();
            let flat = src.as_slice();
            if let Some(bad) = index.iter().flatten().find(|&&i| i >= flat.len()) {
                return Err(AutodiffError::Dimension {
                    op: "gather",
                    left: self.shape,
                    right: (*bad, 0),
                });
            }
            let data = index.iter().map(|s| s.map_or(0.0, |i| flat[i])).collect();
            Matrix::from_vec(rows, cols, data).expect("length checked above")
        };
        Ok(self
            .tape
            .push(value, Op::Gather(self.id, index), self.requires_grad()))
    }

    /// Rows `[start, start + count)` as a new tensor.
    pub fn slice_rows(self, start: usize, count: usize) -> Result<Var<'t>> {
        if start + count > self.rows() {
            return Err(AutodiffError::Dimension {
                op: "slice_rows",
                left: self.shape,
                right: (start + count, self.cols()),
            });
        }
        let cols = self.cols();
        let index: Rc<[Option<usize>]> = (start * cols..(start + count) * cols).map(Some).collect();
        self.gather(count, cols, index)
    }

    fn nonempty(&self, op: &'static str) -> Result<()> {
        if self.shape.0 == 0 || self.shape.1 == 0 {
            Err(AutodiffError::Empty { op })
        } else {
            Ok(())
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<(usize, Matrix)>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<&Matrix> {
        self.grads
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|k| &self.grads[k].1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Matrix)> {
        self.grads.iter().map(|(i, g)| (*i, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Matrix {
        Matrix::from_rows(&[v])
    }

    #[test]
    fn matmul_identity_cases() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let i = tape.constant(Matrix::identity(2));
        assert_eq!(*a.matmul(i).unwrap().value(), *a.value());

        let col = tape.constant(Matrix::column(&[5.0, 7.0]));
        assert_eq!(i.matmul(col).unwrap().value().as_slice(), &[5.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::zeros(2, 3));
        let b = tape.constant(Matrix::zeros(2, 3));
        let err = a.matmul(b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Dimension {
                op: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3)"));
    }

    #[test]
    fn elementwise_definitions() {
        let tape = Tape::new();
        let x = tape.constant(row(&[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().as_slice(), &[0.0, 0.0, 2.0]);
        assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
        assert_eq!(x.abs().value().as_slice(), &[1.0, 0.0, 2.0]);
        assert_eq!(x.scale(2.0).value().as_slice(), &[-2.0, 0.0, 4.0]);
        let y = tape.constant(row(&[1.0, 1.0]));
        assert!(x.add(y).is_err());
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        assert_eq!(tape.constant(row(&[2.0, 4.0])).mean().unwrap().item(), 3.0);
        assert_eq!(
            tape.constant(row(&[3.0, 4.0])).row_l2_norms().unwrap().value().as_slice(),
            &[5.0]
        );
        assert_eq!(
            tape.constant(Matrix::zeros(0, 3)).mean().unwrap_err(),
            AutodiffError::Empty { op: "mean" }
        );
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0]));
        let loss = x.mul(x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 1.0, 1.0]));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0]));
        assert_eq!(
            tape.backward(x).unwrap_err(),
            AutodiffError::NonScalarLoss((1, 2))
        );
        let loss = x.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), AutodiffError::Consumed);

        let other = Tape::new();
        let y = other.param(row(&[1.0])).sum().unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), AutodiffError::ForeignTape);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0]));
        let unused = tape.param(Matrix::filled(2, 2, 3.0));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Matrix::zeros(2, 2));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(row(&[1.0, 2.0]));
        let w = tape.param(row(&[0.5, 0.5]));
        let loss = c.mul(w).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn three_op_pipeline_matches_hand_derivation() {
        // L = sum(relu(a * x) * b), so dL/dx_i = a * b_i * [a x_i > 0].
        let tape = Tape::new();
        let x = tape.param(row(&[1.5, -0.5, 2.0]));
        let b = tape.constant(row(&[2.0, 3.0, -1.0]));
        let loss = x.scale(2.0).relu().mul(b).unwrap().sum().unwrap();
        assert_eq!(loss.item(), 3.0 * 2.0 + 0.0 + 4.0 * -1.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[4.0, 0.0, -2.0]);
    }

    #[test]
    fn gather_scatters_gradient_back() {
        let tape = Tape::new();
        let x = tape.param(row(&[1.0, 2.0, 3.0]));
        let idx: Rc<[Option<usize>]> = vec![None, Some(0), Some(0), Some(2)].into();
        let y = x.gather(2, 2, idx).unwrap();
        assert_eq!(y.value().as_slice(), &[0.0, 1.0, 1.0, 3.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0, 0.0, 1.0]);
    }
}
