//! Reverse-mode differentiation on a recorded tape.
//!
//! Every vector-Jacobian product is itself written in terms of taped
//! operations, so the backward pass can be recorded (`create_graph`) and
//! differentiated a second time. That is how gradients of scalars of input
//! gradients are obtained without ever forming a Hessian.

mod kernels;

use std::cell::{Cell, RefCell};
use std::ops;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use kernels::ConvGeom;
pub(crate) use kernels::{sigmoid, softplus};

use crate::error::{FarError, Result};
use crate::tensor::{gemm, numel, Tensor};

/// How the second derivative of a ReLU is treated when a backward pass is
/// differentiated again.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrderMode {
    /// The true second derivative, which is zero almost everywhere.
    Exact,
    /// `beta * sigmoid(beta x) * (1 - sigmoid(beta x))`, the second
    /// derivative of a softplus with tightness `beta`.
    SoftplusSubstitute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub beta: f64,
    pub second_order_mode: SecondOrderMode,
}

impl Default for ActivationSpec {
    fn default() -> Self {
        ActivationSpec::relu()
    }
}

impl ActivationSpec {
    pub fn relu() -> Self {
        ActivationSpec { kind: ActivationKind::Relu, beta: 1.0, second_order_mode: SecondOrderMode::Exact }
    }

    /// ReLU whose second derivative is replaced by the softplus curvature.
    pub fn relu_substitute(beta: f64) -> Self {
        ActivationSpec { kind: ActivationKind::Relu, beta, second_order_mode: SecondOrderMode::SoftplusSubstitute }
    }

    pub fn softplus(beta: f64) -> Self {
        ActivationSpec { kind: ActivationKind::Softplus, beta, second_order_mode: SecondOrderMode::Exact }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(FarError::InvalidArgument(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }

    pub(crate) fn curvature(&self) -> Curvature {
        match self.second_order_mode {
            SecondOrderMode::Exact => Curvature::Exact,
            SecondOrderMode::SoftplusSubstitute => Curvature::Softplus(self.beta),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Curvature {
    Exact,
    Softplus(f64),
}

type Id = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    Scale(Id, f64),
    AddScalar(Id, f64),
    Exp(Id),
    Log(Id),
    Sqrt(Id),
    Abs(Id),
    /// `sigmoid(beta * x)`
    Sigmoid(Id, f64),
    /// `ln(1 + e^(beta x)) / beta`
    Softplus(Id, f64),
    Relu(Id, Curvature),
    /// Derivative of ReLU, `1[x > 0]`, with a configurable derivative of its own.
    ReluMask(Id, Curvature),
    MatMul { a: Id, b: Id, ta: bool, tb: bool },
    AddRowBias(Id, Id),
    SumRows(Id),
    BroadcastRows(Id, usize),
    SumCols(Id),
    BroadcastCols(Id, usize),
    Sum(Id),
    Expand(Id, Vec<usize>),
    Reshape(Id, Vec<usize>),
    Conv2d { x: Id, k: Id, geom: ConvGeom },
    Conv2dInputGrad { gy: Id, k: Id, geom: ConvGeom },
    Conv2dKernelGrad { x: Id, gy: Id, geom: ConvGeom },
    Pad(Id, usize),
    Crop(Id, usize),
    /// `out[i] = a[idx[i]]`, shaped as given.
    Gather(Id, Rc<Vec<usize>>, Vec<usize>),
    /// `out[idx[i]] += a[i]` into a flat output of the given length.
    Scatter(Id, Rc<Vec<usize>>, usize),
}

impl Op {
    fn inputs(&self) -> smallvec::SmallVec<[Id; 2]> {
        use Op::*;
        let mut v = smallvec::SmallVec::new();
        match self {
            Leaf => {}
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | AddRowBias(a, b) => {
                v.push(*a);
                v.push(*b);
            }
            MatMul { a, b, .. } => {
                v.push(*a);
                v.push(*b);
            }
            Conv2d { x, k, .. } => {
                v.push(*x);
                v.push(*k);
            }
            Conv2dInputGrad { gy, k, .. } => {
                v.push(*gy);
                v.push(*k);
            }
            Conv2dKernelGrad { x, gy, .. } => {
                v.push(*x);
                v.push(*gy);
            }
            Neg(a) | Scale(a, _) | AddScalar(a, _) | Exp(a) | Log(a) | Sqrt(a) | Abs(a) | Sigmoid(a, _)
            | Softplus(a, _) | Relu(a, _) | ReluMask(a, _) | SumRows(a) | BroadcastRows(a, _) | SumCols(a)
            | BroadcastCols(a, _) | Sum(a) | Expand(a, _) | Reshape(a, _) | Pad(a, _) | Crop(a, _) | Gather(a, ..)
            | Scatter(a, ..) => v.push(*a),
        }
        v
    }
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// Record of differentiable operations.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape is single-threaded; parallel work uses one tape per thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_node(Op::Leaf, value, true)
    }

    /// A leaf that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(Op::Leaf, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var<'_>) -> Rc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn push_node(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, value: Rc::new(value), requires_grad });
        Var { tape: self, id }
    }

    fn push(&self, op: Op) -> Var<'_> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let inputs = op.inputs();
            let vals: smallvec::SmallVec<[&Tensor; 2]> = inputs.iter().map(|&i| &*nodes[i].value).collect();
            let rg = self.recording.get() && inputs.iter().any(|&i| nodes[i].requires_grad);
            (evaluate(&op, &vals), rg)
        };
        if requires_grad {
            self.push_node(op, value, true)
        } else {
            self.push_node(Op::Leaf, value, false)
        }
    }

    /// Recomputes every non-leaf node from its recorded inputs and reports
    /// whether all values are reproduced bit for bit.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().all(|node| {
            if matches!(node.op, Op::Leaf) {
                return true;
            }
            let vals: smallvec::SmallVec<[&Tensor; 2]> =
                node.op.inputs().iter().map(|&i| &*nodes[i].value).collect();
            let again = evaluate(&node.op, &vals);
            again.shape() == node.value.shape()
                && again.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// True when every input of every node precedes it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.borrow().iter().enumerate().all(|(i, n)| n.op.inputs().iter().all(|&j| j < i))
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// `wrt` may name intermediate nodes, in which case the result is the
    /// derivative with all other inputs of that node held fixed. With
    /// `create_graph` the backward pass is itself recorded, and the
    /// returned gradients can be differentiated again.
    pub fn grad<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>], create_graph: bool) -> Result<Vec<Var<'t>>> {
        if self.value(output).len() != 1 {
            return Err(FarError::Shape(format!(
                "gradient requires a scalar output, got shape {:?}",
                output.shape()
            )));
        }
        let n = output.id + 1;
        let mut needs = vec![false; n];
        {
            let nodes = self.nodes.borrow();
            let mut target = vec![false; n];
            for w in wrt {
                if w.id < n {
                    target[w.id] = true;
                }
            }
            for i in 0..n {
                needs[i] = target[i] || (nodes[i].requires_grad && nodes[i].op.inputs().iter().any(|&j| needs[j]));
            }
        }
        let mut grads: Vec<Option<Var<'t>>> = vec![None; n];
        if needs[output.id] {
            grads[output.id] = Some(self.constant(Tensor::full(output.shape().as_slice(), 1.0)));
        }
        let previous = self.recording.replace(create_graph);
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes.borrow()[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (input, contribution) in self.vjp(i, &op, g, &needs) {
                grads[input] = Some(match grads[input] {
                    Some(existing) => existing + contribution,
                    None => contribution,
                });
            }
        }
        self.recording.set(previous);
        let out: Vec<Var<'t>> = wrt
            .iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect();
        for g in &out {
            if !self.value(*g).all_finite() {
                return Err(FarError::NonFinite("gradient".into()));
            }
        }
        Ok(out)
    }

    fn at(&self, id: Id) -> Var<'_> {
        Var { tape: self, id }
    }

    fn vjp<'t>(&'t self, id: Id, op: &Op, g: Var<'t>, needs: &[bool]) -> Vec<(Id, Var<'t>)> {
        use Op::*;
        let me = self.at(id);
        let mut out = Vec::with_capacity(2);
        let mut emit = |input: Id, f: &dyn Fn() -> Var<'t>| {
            if needs[input] {
                out.push((input, f()));
            }
        };
        match op {
            Leaf => {}
            Add(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g);
            }
            Sub(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| -g);
            }
            Mul(a, b) => {
                emit(*a, &|| g * self.at(*b));
                emit(*b, &|| g * self.at(*a));
            }
            Div(a, b) => {
                let bv = self.at(*b);
                emit(*a, &|| g / bv);
                emit(*b, &|| -(g * me / bv));
            }
            Neg(a) => emit(*a, &|| -g),
            Scale(a, s) => emit(*a, &|| g.scale(*s)),
            AddScalar(a, _) => emit(*a, &|| g),
            Exp(a) => emit(*a, &|| g * me),
            Log(a) => emit(*a, &|| g / self.at(*a)),
            Sqrt(a) => emit(*a, &|| (g / me).scale(0.5)),
            Abs(a) => emit(*a, &|| {
                let sign = self.value(self.at(*a)).map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 });
                g * self.constant(sign)
            }),
            Sigmoid(a, beta) => emit(*a, &|| {
                let one_minus = (-me).add_scalar(1.0);
                g * (me * one_minus).scale(*beta)
            }),
            Softplus(a, beta) => emit(*a, &|| g * self.at(*a).sigmoid(*beta)),
            Relu(a, curv) => emit(*a, &|| g * self.push(ReluMask(*a, *curv))),
            ReluMask(a, curv) => {
                if let Curvature::Softplus(beta) = curv {
                    let beta = *beta;
                    emit(*a, &|| {
                        let c = self.value(self.at(*a)).map(|v| {
                            let s = sigmoid(beta * v);
                            beta * s * (1.0 - s)
                        });
                        g * self.constant(c)
                    });
                }
            }
            MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.at(*a), self.at(*b));
                emit(*a, &|| if *ta { bv.matmul_t(g, *tb, true) } else { g.matmul_t(bv, false, !*tb) });
                emit(*b, &|| if *tb { g.matmul_t(av, true, *ta) } else { av.matmul_t(g, !*ta, false) });
            }
            AddRowBias(a, b) => {
                emit(*a, &|| g);
                emit(*b, &|| g.sum_rows());
            }
            SumRows(a) => {
                let rows = self.at(*a).shape()[0];
                emit(*a, &|| g.broadcast_rows(rows));
            }
            BroadcastRows(a, _) => emit(*a, &|| g.sum_rows()),
            SumCols(a) => {
                let cols = self.at(*a).shape()[1];
                emit(*a, &|| g.broadcast_cols(cols));
            }
            BroadcastCols(a, _) => emit(*a, &|| g.sum_cols()),
            Sum(a) => {
                let shape = self.at(*a).shape();
                emit(*a, &|| g.expand(&shape));
            }
            Expand(a, _) => emit(*a, &|| g.sum()),
            Reshape(a, _) => {
                let shape = self.at(*a).shape();
                emit(*a, &|| g.reshape(&shape));
            }
            Conv2d { x, k, geom } => {
                emit(*x, &|| self.push(Conv2dInputGrad { gy: g.id, k: *k, geom: *geom }));
                emit(*k, &|| self.push(Conv2dKernelGrad { x: *x, gy: g.id, geom: *geom }));
            }
            Conv2dInputGrad { gy, k, geom } => {
                emit(*gy, &|| self.push(Conv2d { x: g.id, k: *k, geom: *geom }));
                emit(*k, &|| self.push(Conv2dKernelGrad { x: g.id, gy: *gy, geom: *geom }));
            }
            Conv2dKernelGrad { x, gy, geom } => {
                emit(*x, &|| self.push(Conv2dInputGrad { gy: *gy, k: g.id, geom: *geom }));
                emit(*gy, &|| self.push(Conv2d { x: *x, k: g.id, geom: *geom }));
            }
            Pad(a, p) => emit(*a, &|| self.push(Crop(g.id, *p))),
            Crop(a, p) => emit(*a, &|| self.push(Pad(g.id, *p))),
            Gather(a, idx, _) => {
                let len = self.at(*a).len();
                let shape = self.at(*a).shape();
                emit(*a, &|| g.scatter(idx.clone(), len).reshape(&shape));
            }
            Scatter(a, idx, _) => {
                let shape = self.at(*a).shape();
                emit(*a, &|| g.gather(idx.clone(), &shape));
            }
        }
        out
    }
}

fn evaluate(op: &Op, v: &[&Tensor]) -> Tensor {
    use Op::*;
    let unary = |f: &dyn Fn(f64) -> f64| v[0].map(f);
    let binary = |f: &dyn Fn(f64, f64) -> f64| {
        v[0].zip_map(v[1], f).unwrap_or_else(|e| panic!("{e} in {op:?}"))
    };
    match op {
        Leaf => unreachable!("leaves are never re-evaluated"),
        Add(..) => binary(&|a, b| a + b),
        Sub(..) => binary(&|a, b| a - b),
        Mul(..) => binary(&|a, b| a * b),
        Div(..) => binary(&|a, b| a / b),
        Neg(_) => unary(&|a| -a),
        Scale(_, s) => unary(&|a| a * s),
        AddScalar(_, s) => unary(&|a| a + s),
        Exp(_) => unary(&f64::exp),
        Log(_) => unary(&f64::ln),
        Sqrt(_) => unary(&f64::sqrt),
        Abs(_) => unary(&f64::abs),
        Sigmoid(_, beta) => unary(&|a| sigmoid(beta * a)),
        Softplus(_, beta) => unary(&|a| softplus(beta * a) / beta),
        Relu(..) => unary(&|a| if a > 0.0 { a } else { 0.0 }),
        ReluMask(..) => unary(&|a| if a > 0.0 { 1.0 } else { 0.0 }),
        MatMul { ta, tb, .. } => {
            let (sa, sb) = (v[0].shape(), v[1].shape());
            assert!(sa.len() == 2 && sb.len() == 2, "matmul needs matrices, got {sa:?} and {sb:?}");
            let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
            let (k2, n) = if *tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            assert_eq!(k, k2, "matmul inner dimensions differ: {sa:?} x {sb:?}");
            let mut c = vec![0.0; m * n];
            gemm(v[0].data(), *ta, v[1].data(), *tb, m, k, n, &mut c);
            Tensor::from_parts(vec![m, n], c)
        }
        AddRowBias(..) => {
            let cols = v[1].len();
            assert_eq!(v[0].shape()[1], cols, "bias length mismatch");
            let mut data = v[0].data().to_vec();
            for row in data.chunks_mut(cols) {
                for (d, b) in row.iter_mut().zip(v[1].data()) {
                    *d += b;
                }
            }
            Tensor::from_parts(v[0].shape().to_vec(), data)
        }
        SumRows(_) => {
            let s = v[0].shape();
            let mut out = vec![0.0; s[1]];
            for row in v[0].data().chunks(s[1]) {
                for (o, r) in out.iter_mut().zip(row) {
                    *o += r;
                }
            }
            Tensor::from_parts(vec![s[1]], out)
        }
        BroadcastRows(_, rows) => {
            let mut data = Vec::with_capacity(rows * v[0].len());
            for _ in 0..*rows {
                data.extend_from_slice(v[0].data());
            }
            Tensor::from_parts(vec![*rows, v[0].len()], data)
        }
        SumCols(_) => {
            let s = v[0].shape();
            let data = v[0].data().chunks(s[1]).map(|r| r.iter().sum()).collect();
            Tensor::from_parts(vec![s[0]], data)
        }
        BroadcastCols(_, cols) => {
            let data = v[0].data().iter().flat_map(|&x| std::iter::repeat_n(x, *cols)).collect();
            Tensor::from_parts(vec![v[0].len(), *cols], data)
        }
        Sum(_) => Tensor::scalar(v[0].sum()),
        Expand(_, shape) => Tensor::full(shape, v[0].item()),
        Reshape(_, shape) => Tensor::from_parts(shape.clone(), v[0].data().to_vec()),
        Gather(_, idx, shape) => {
            let src = v[0].data();
            Tensor::from_parts(shape.clone(), idx.iter().map(|&i| src[i]).collect())
        }
        Scatter(_, idx, len) => {
            let mut out = vec![0.0; *len];
            for (&i, &g) in idx.iter().zip(v[0].data()) {
                out[i] += g;
            }
            Tensor::from_parts(vec![*len], out)
        }
        Conv2d { geom, .. } => Tensor::from_parts(geom.output_shape(), kernels::conv2d(v[0].data(), v[1].data(), geom)),
        Conv2dInputGrad { geom, .. } => {
            Tensor::from_parts(geom.input_shape(), kernels::conv2d_input_grad(v[0].data(), v[1].data(), geom))
        }
        Conv2dKernelGrad { geom, .. } => {
            Tensor::from_parts(geom.kernel_shape(), kernels::conv2d_kernel_grad(v[0].data(), v[1].data(), geom))
        }
        Pad(_, p) => {
            let s = v[0].shape();
            Tensor::from_parts(vec![s[0], s[1] + 2 * p, s[2] + 2 * p, s[3]], kernels::pad_spatial(v[0].data(), s, *p))
        }
        Crop(_, p) => {
            let s = v[0].shape();
            Tensor::from_parts(vec![s[0], s[1] - 2 * p, s[2] - 2 * p, s[3]], kernels::crop_spatial(v[0].data(), s, *p))
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.push(op)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, factor))
    }

    pub fn add_scalar(self, value: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id, value))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id))
    }

    pub fn sigmoid(self, beta: f64) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id, beta))
    }

    pub fn softplus(self, beta: f64) -> Var<'t> {
        self.unary(Op::Softplus(self.id, beta))
    }

    /// Applies the activation described by `spec`.
    pub fn activate(self, spec: &ActivationSpec) -> Var<'t> {
        match spec.kind {
            ActivationKind::Relu => self.unary(Op::Relu(self.id, spec.curvature())),
            ActivationKind::Softplus => self.softplus(spec.beta),
        }
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.matmul_t(rhs, false, false)
    }

    /// `op(self) * op(rhs)` with optional transposes.
    pub fn matmul_t(self, rhs: Var<'t>, ta: bool, tb: bool) -> Var<'t> {
        self.tape.push(Op::MatMul { a: self.id, b: rhs.id, ta, tb })
    }

    /// Adds a length-`m` bias to every row of an `n x m` matrix.
    pub fn add_row_bias(self, bias: Var<'t>) -> Var<'t> {
        self.tape.push(Op::AddRowBias(self.id, bias.id))
    }

    /// Column sums of an `n x m` matrix, giving length `m`.
    pub fn sum_rows(self) -> Var<'t> {
        assert_eq!(self.shape().len(), 2, "sum_rows needs a matrix");
        self.unary(Op::SumRows(self.id))
    }

    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        assert_eq!(self.shape().len(), 1, "broadcast_rows needs a vector");
        self.unary(Op::BroadcastRows(self.id, rows))
    }

    /// Row sums of an `n x m` matrix, giving length `n`.
    pub fn sum_cols(self) -> Var<'t> {
        assert_eq!(self.shape().len(), 2, "sum_cols needs a matrix");
        self.unary(Op::SumCols(self.id))
    }

    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        assert_eq!(self.shape().len(), 1, "broadcast_cols needs a vector");
        self.unary(Op::BroadcastCols(self.id, cols))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Repeats a single-element tensor into `shape`.
    pub fn expand(self, shape: &[usize]) -> Var<'t> {
        assert_eq!(self.len(), 1, "expand needs a single element");
        self.unary(Op::Expand(self.id, shape.to_vec()))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        assert_eq!(numel(shape), self.len(), "cannot reshape {:?} into {:?}", self.shape(), shape);
        if self.shape() == shape {
            return self;
        }
        self.unary(Op::Reshape(self.id, shape.to_vec()))
    }

    /// Stride-1 valid convolution of NHWC input with a `[kh, kw, c, f]` kernel.
    pub fn conv2d(self, kernel: Var<'t>) -> Var<'t> {
        let (s, k) = (self.shape(), kernel.shape());
        assert!(s.len() == 4 && k.len() == 4, "conv2d needs NHWC input and 4-d kernel");
        assert_eq!(s[3], k[2], "conv2d channel mismatch");
        assert!(s[1] >= k[0] && s[2] >= k[1], "conv2d kernel larger than input");
        let geom = ConvGeom { n: s[0], h: s[1], w: s[2], c: s[3], kh: k[0], kw: k[1], f: k[3] };
        self.tape.push(Op::Conv2d { x: self.id, k: kernel.id, geom })
    }

    /// Zero-pads both spatial axes of an NHWC tensor.
    pub fn pad_spatial(self, pad: usize) -> Var<'t> {
        if pad == 0 {
            return self;
        }
        self.unary(Op::Pad(self.id, pad))
    }

    /// Non-overlapping `size x size` max pooling of an NHWC tensor.
    pub fn max_pool(self, size: usize) -> Var<'t> {
        let value = self.value();
        let (idx, shape) = kernels::max_pool_indices(value.data(), value.shape(), size);
        self.gather(Rc::new(idx), &shape)
    }

    pub(crate) fn gather(self, idx: Rc<Vec<usize>>, shape: &[usize]) -> Var<'t> {
        assert_eq!(idx.len(), numel(shape));
        self.unary(Op::Gather(self.id, idx, shape.to_vec()))
    }

    pub(crate) fn scatter(self, idx: Rc<Vec<usize>>, len: usize) -> Var<'t> {
        assert_eq!(idx.len(), self.len());
        self.unary(Op::Scatter(self.id, idx, len))
    }

    /// Elements at the given flat positions, as a vector.
    pub fn select(self, positions: Vec<usize>) -> Var<'t> {
        let n = positions.len();
        self.gather(Rc::new(positions), &[n])
    }

    /// Multiplies every element by a single-element var.
    pub fn mul_scalar_var(self, s: Var<'t>) -> Var<'t> {
        let shape = self.shape();
        self * s.expand(&shape)
    }

    pub fn dot(self, rhs: Var<'t>) -> Var<'t> {
        (self * rhs).sum()
    }
}

macro_rules! binary_op {
    ($trait:ident, $method:ident, $variant:ident) => {
        impl<'t> ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
                let (a, b) = (self.shape(), rhs.shape());
                assert_eq!(a, b, concat!(stringify!($method), " shape mismatch"));
                self.tape.push(Op::$variant(self.id, rhs.id))
            }
        }
    };
}

binary_op!(Add, add, Add);
binary_op!(Sub, sub, Sub);
binary_op!(Mul, mul, Mul);
binary_op!(Div, div, Div);

impl<'t> ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id))
    }
}
