//! Append-only Wengert tape for reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so the tape is topologically sorted
//! by construction and cannot contain cycles. `backward` walks it in reverse
//! and accumulates into per-node gradient slots; call [`Tape::zero_grad`]
//! between independent backward passes.

use std::cell::RefCell;

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Tanh(usize),
    Softplus(usize),
    Mish(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    Minimum(usize, usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    Clip(usize, f64, f64),
    StopGrad,
}

struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    tags: RefCell<Vec<&'static str>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Record a leaf (input or parameter) tensor.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Record a gradient-blocking constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::StopGrad)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attach a label to the tape. Used to count structural events such as
    /// policy-network forward passes.
    pub fn tag(&self, label: &'static str) {
        self.tags.borrow_mut().push(label);
    }

    pub fn tag_count(&self, label: &str) -> usize {
        self.tags.borrow().iter().filter(|t| **t == label).count()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Back-propagate from a scalar loss, accumulating into every node at or
    /// before the loss. Nodes with no path to the loss receive zeros.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(self, loss.tape), "loss belongs to another tape");
        let mut nodes = self.nodes.borrow_mut();
        let root = loss.id;
        if nodes[root].value.len() != 1 {
            return Err(Error::NonScalarLoss(nodes[root].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (node, g) in nodes.iter_mut().zip(grads) {
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn unary(
    nodes: &[Node],
    out: usize,
    x: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    d: impl Fn(f64, f64) -> f64,
) {
    let xv = nodes[x].value.data();
    let yv = nodes[out].value.data();
    let gx = g
        .iter()
        .zip(xv.iter().zip(yv))
        .map(|(gi, (&xi, &yi))| gi * d(xi, yi))
        .collect();
    accumulate(grads, x, gx);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out_shape = nodes[id].value.shape();
    match &nodes[id].op {
        Op::Leaf | Op::StopGrad => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let ga = tensor::reduce_to(g, out_shape, nodes[*a].value.shape());
            accumulate(grads, *a, ga);
            let mut gb = tensor::reduce_to(g, out_shape, nodes[*b].value.shape());
            if sign < 0.0 {
                gb.iter_mut().for_each(|x| *x = -*x);
            }
            accumulate(grads, *b, gb);
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let is_div = matches!(nodes[id].op, Op::Div(..));
            let gt = Tensor::new(out_shape.to_vec(), g.to_vec());
            let (ga, gb) = if is_div {
                let ga = tensor::broadcast_binary(&gt, bv, |gi, bi| gi / bi);
                let ab = tensor::broadcast_binary(av, bv, |ai, bi| -ai / (bi * bi));
                let gb = tensor::broadcast_binary(&gt, &ab, |gi, x| gi * x);
                (ga, gb)
            } else {
                let ga = tensor::broadcast_binary(&gt, bv, |gi, bi| gi * bi);
                let gb = tensor::broadcast_binary(&gt, av, |gi, ai| gi * ai);
                (ga, gb)
            };
            accumulate(grads, *a, tensor::reduce_to(ga.data(), ga.shape(), av.shape()));
            accumulate(grads, *b, tensor::reduce_to(gb.data(), gb.shape(), bv.shape()));
        }
        Op::Neg(x) => accumulate(grads, *x, g.iter().map(|v| -v).collect()),
        Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(x) => accumulate(grads, *x, g.to_vec()),
        Op::MatMul(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            // dA = G B^T, dB = A^T G
            let mut ga = vec![0.0; m * k];
            tensor::gemm(m, n, k, g, false, bv.data(), true, &mut ga, false);
            let mut gb = vec![0.0; k * n];
            tensor::gemm(k, m, n, av.data(), true, g, false, &mut gb, false);
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Tanh(x) => unary(nodes, id, *x, g, grads, |_, y| 1.0 - y * y),
        Op::Softplus(x) => unary(nodes, id, *x, g, grads, |x, _| tensor::sigmoid(x)),
        Op::Mish(x) => unary(nodes, id, *x, g, grads, |x, _| tensor::mish_grad(x)),
        Op::Exp(x) => unary(nodes, id, *x, g, grads, |_, y| y),
        Op::Log(x) => unary(nodes, id, *x, g, grads, |x, _| 1.0 / x),
        Op::Square(x) => unary(nodes, id, *x, g, grads, |x, _| 2.0 * x),
        Op::Sin(x) => unary(nodes, id, *x, g, grads, |x, _| x.cos()),
        Op::Cos(x) => unary(nodes, id, *x, g, grads, |x, _| -x.sin()),
        Op::Sum(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::Minimum(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            let mut ga = vec![0.0; g.len()];
            let mut gb = vec![0.0; g.len()];
            for i in 0..g.len() {
                if av[i] <= bv[i] {
                    ga[i] = g[i];
                } else {
                    gb[i] = g[i];
                }
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Concat(parts) => {
            let rows = nodes[id].value.rows();
            let total = nodes[id].value.cols();
            let mut offset = 0;
            for &p in parts {
                let c = nodes[p].value.cols();
                let mut gp = Vec::with_capacity(rows * c);
                for i in 0..rows {
                    gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                }
                accumulate(grads, p, gp);
                offset += c;
            }
        }
        Op::SliceCols(x, start) => {
            let xv = &nodes[*x].value;
            let (rows, cols) = (xv.rows(), xv.cols());
            let width = nodes[id].value.cols();
            let mut gx = vec![0.0; rows * cols];
            for i in 0..rows {
                gx[i * cols + start..i * cols + start + width]
                    .copy_from_slice(&g[i * width..(i + 1) * width]);
            }
            accumulate(grads, *x, gx);
        }
        Op::Clip(x, lo, hi) => {
            unary(nodes, id, *x, g, grads, |x, _| if x >= *lo && x <= *hi { 1.0 } else { 0.0 })
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()))
    }

    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.with_value(|x| x.map(f));
        self.tape.push(v, op)
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(other);
        let v = {
            let nodes = self.tape.nodes.borrow();
            tensor::broadcast_binary(&nodes[self.id].value, &nodes[other.id].value, f)
        };
        self.tape.push(v, op)
    }

    pub(crate) fn add_v(&self, o: &Var<'t>) -> Var<'t> {
        self.binary(o, Op::Add(self.id, o.id), |a, b| a + b)
    }
    pub(crate) fn sub_v(&self, o: &Var<'t>) -> Var<'t> {
        self.binary(o, Op::Sub(self.id, o.id), |a, b| a - b)
    }
    pub(crate) fn mul_v(&self, o: &Var<'t>) -> Var<'t> {
        self.binary(o, Op::Mul(self.id, o.id), |a, b| a * b)
    }
    pub(crate) fn div_v(&self, o: &Var<'t>) -> Var<'t> {
        self.binary(o, Op::Div(self.id, o.id), |a, b| a / b)
    }
    pub(crate) fn neg_v(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }
    pub(crate) fn scale_v(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }
    pub(crate) fn add_scalar_v(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }
    pub(crate) fn matmul_v(&self, o: &Var<'t>) -> Var<'t> {
        self.same_tape(o);
        let v = {
            let nodes = self.tape.nodes.borrow();
            tensor::matmul_values(&nodes[self.id].value, &nodes[o.id].value)
        };
        self.tape.push(v, Op::MatMul(self.id, o.id))
    }
    pub(crate) fn tanh_v(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }
    pub(crate) fn softplus_v(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), tensor::softplus)
    }
    pub(crate) fn mish_v(&self) -> Var<'t> {
        self.unary(Op::Mish(self.id), tensor::mish)
    }
    pub(crate) fn exp_v(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }
    pub(crate) fn log_v(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }
    pub(crate) fn square_v(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }
    pub(crate) fn sin_v(&self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }
    pub(crate) fn cos_v(&self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }
    pub(crate) fn sum_v(&self) -> Var<'t> {
        let v = self.with_value(|x| Tensor::scalar(x.sum()));
        self.tape.push(v, Op::Sum(self.id))
    }
    pub(crate) fn mean_v(&self) -> Var<'t> {
        let v = self.with_value(|x| Tensor::scalar(x.mean()));
        self.tape.push(v, Op::Mean(self.id))
    }
    pub(crate) fn minimum_v(&self, o: &Var<'t>) -> Var<'t> {
        assert_eq!(self.shape(), o.shape(), "minimum requires equal shapes");
        self.binary(o, Op::Minimum(self.id, o.id), f64::min)
    }
    pub(crate) fn concat_v(parts: &[&Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.id].value).collect();
            tensor::concat_cols(&vals)
        };
        tape.push(v, Op::Concat(parts.iter().map(|p| p.id).collect()))
    }
    pub(crate) fn slice_cols_v(&self, start: usize, end: usize) -> Var<'t> {
        let v = self.with_value(|x| tensor::slice_cols(x, start, end));
        self.tape.push(v, Op::SliceCols(self.id, start))
    }
    pub(crate) fn clip_v(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clip(self.id, lo, hi), |x| x.clamp(lo, hi))
    }
    pub(crate) fn stop_grad_v(&self) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::StopGrad)
    }
}
