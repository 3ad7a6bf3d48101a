//! Reverse-mode differentiation over row-major 2-D tensors.
//!
//! Every operation is evaluated eagerly and recorded on a [`Tape`].
//! [`Tape::backward`] walks the record in reverse and accumulates
//! vector-Jacobian products into every node that depends on a trainable
//! leaf. Nodes built only from constants are never visited.
//!
//! Binary elementwise operations broadcast `1 x 1`, `1 x n` and `m x 1`
//! operands against `m x n`. Shape errors inside the tape are programming
//! errors and panic; the checked entry points live in the parent module.

use std::cell::RefCell;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Square(usize),
    ClampMin(usize, f64),
    Sum(usize),
    SumCols(usize),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    ConcatRows(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let shape = broadcast_shape(a.dim(), b.dim());
    let av = a.broadcast(shape).expect("broadcast");
    let bv = b.broadcast(shape).expect("broadcast");
    let mut out = Tensor::zeros(shape);
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    pub fn row(&self, xs: &[f64]) -> Var<'_> {
        self.constant(Tensor::from_shape_vec((1, xs.len()), xs.to_vec()).expect("row"))
    }

    fn unary(&self, a: Var<'_>, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            (nodes[a.id].value.mapv(f), nodes[a.id].needs_grad)
        };
        self.push(value, op, ng)
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Var<'_> {
        let (value, ng) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            (
                zip_broadcast(&na.value, &nb.value, f),
                na.needs_grad || nb.needs_grad,
            )
        };
        self.push(value, op, ng)
    }

    /// Gradients of the scalar `out` with respect to every trainable leaf.
    pub fn backward(&self, out: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[out.id].value.dim();
        if shape != (1, 1) {
            return Err(Error::NonScalarObjective(shape.0, shape.1));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.id + 1];
        grads[out.id] = Some(Tensor::from_elem((1, 1), 1.0));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
            if !nodes[id].needs_grad {
                return;
            }
            match &mut grads[id] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    accumulate(&mut grads, *b, reduce_to(g, val(*b).dim()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    accumulate(&mut grads, *b, reduce_to(-g, val(*b).dim()));
                }
                Op::Mul(a, b) => {
                    if nodes[*a].needs_grad {
                        let ga = zip_broadcast(&g, val(*b), |x, y| x * y);
                        accumulate(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    }
                    if nodes[*b].needs_grad {
                        let gb = zip_broadcast(&g, val(*a), |x, y| x * y);
                        accumulate(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                    }
                }
                Op::Div(a, b) => {
                    if nodes[*a].needs_grad {
                        let ga = zip_broadcast(&g, val(*b), |x, y| x / y);
                        accumulate(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    }
                    if nodes[*b].needs_grad {
                        // d(a/b)/db = -out / b
                        let q = zip_broadcast(&node.value, val(*b), |o, y| -o / y);
                        let gb = zip_broadcast(&g, &q, |x, y| x * y);
                        accumulate(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                    }
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -g),
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::AddScalar(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let d = &g * &node.value.mapv(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = &g * &node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let d = &g * &val(*a).mapv(sigmoid);
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = &g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => accumulate(&mut grads, *a, &g / val(*a)),
                Op::Sqrt(a) => {
                    let d = &g * &node.value.mapv(|y| 0.5 / y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let d = &g * &val(*a).mapv(|x| 2.0 * x);
                    accumulate(&mut grads, *a, d);
                }
                Op::ClampMin(a, lo) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(val(*a))
                        .for_each(|d, &x| {
                            if x < *lo {
                                *d = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let d = Tensor::from_elem(val(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, d);
                }
                Op::SumCols(a) => {
                    let d = g
                        .broadcast(val(*a).dim())
                        .expect("sum_cols grad")
                        .to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Tensor::zeros(val(*a).dim());
                    let w = g.ncols();
                    d.slice_mut(ndarray::s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Tensor::zeros(val(*a).dim());
                    let h = g.nrows();
                    d.slice_mut(ndarray::s![*start..*start + h, ..]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        if nodes[*p].needs_grad {
                            let d = g.slice(ndarray::s![row..row + h, ..]).to_owned();
                            accumulate(&mut grads, *p, d);
                        }
                        row += h;
                    }
                }
            }
        }

        let leaves = grads
            .into_iter()
            .enumerate()
            .filter_map(|(id, g)| match (&nodes[id].op, g) {
                (Op::Leaf, Some(g)) => Some((id, g)),
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }
}

/// Gradients of trainable leaves, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: std::collections::HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for `v`, or zeros of its shape if `v` did not influence the
    /// output.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.leaves
            .get(&v.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        self.leaves
            .remove(&v.id)
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.with_value(|v| {
            assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
            v[[0, 0]]
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            assert_eq!(
                a.value.ncols(),
                b.value.nrows(),
                "matmul {:?} x {:?}",
                a.value.dim(),
                b.value.dim()
            );
            (a.value.dot(&b.value), a.needs_grad || b.needs_grad)
        };
        self.tape.push(value, Op::MatMul(self.id, other.id), ng)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self, o, Op::Add(self.id, o.id), |x, y| x + y)
    }

    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self, o, Op::Sub(self.id, o.id), |x, y| x - y)
    }

    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self, o, Op::Mul(self.id, o.id), |x, y| x * y)
    }

    pub fn div(self, o: Var<'t>) -> Var<'t> {
        self.tape.binary(self, o, Op::Div(self.id, o.id), |x, y| x / y)
    }

    pub fn neg(self) -> Var<'t> {
        self.tape.unary(self, Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self, Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape.unary(self, Op::AddScalar(self.id), |x| x + c)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self, Op::Softplus(self.id), softplus)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self, Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self, Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self, Op::Ln(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self, Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.tape.unary(self, Op::Square(self.id), |x| x * x)
    }

    /// `max(x, lo)`; gradient passes only where `x >= lo`.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.tape.unary(self, Op::ClampMin(self.id, lo), |x| x.max(lo))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(self) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (Tensor::from_elem((1, 1), n.value.sum()), n.needs_grad)
        };
        self.tape.push(value, Op::Sum(self.id), ng)
    }

    /// Row sums, `m x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.sum_axis(Axis(1)).insert_axis(Axis(1)), n.needs_grad)
        };
        self.tape.push(value, Op::SumCols(self.id), ng)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.value.slice(ndarray::s![.., start..start + len]).to_owned(),
                n.needs_grad,
            )
        };
        self.tape.push(value, Op::SliceCols(self.id, start), ng)
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Var<'t> {
        let (value, ng) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.value.slice(ndarray::s![start..start + len, ..]).to_owned(),
                n.needs_grad,
            )
        };
        self.tape.push(value, Op::SliceRows(self.id, start), ng)
    }

    /// Stacks `parts` vertically; all must share a column count.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let (value, ng) = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows shapes");
            (value, parts.iter().any(|p| nodes[p.id].needs_grad))
        };
        tape.push(
            value,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            ng,
        )
    }
}
