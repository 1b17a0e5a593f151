use std::cell::RefCell;
use std::fmt;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    RowSums(usize),
    SoftmaxTemp(usize, f64),
    LogSoftmaxTemp(usize, f64),
    ConcatCols(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Sum(_) => "sum",
            Op::RowSums(_) => "row_sums",
            Op::SoftmaxTemp(..) => "softmax_temp",
            Op::LogSoftmaxTemp(..) => "log_softmax_temp",
            Op::ConcatCols(_) => "concat_cols",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations in execution order so that a single reverse sweep can
/// propagate gradients back to the leaves.
///
/// Node ids are assigned in push order, so every op's inputs precede it and
/// the reverse sweep visits each op exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs_of(&op).iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the gradient of
    /// every leaf that requires one.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut nodes[id];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Relu(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Sum(a)
        | Op::RowSums(a)
        | Op::SoftmaxTemp(a, _)
        | Op::LogSoftmaxTemp(a, _) => vec![*a],
        Op::ConcatCols(ids) => ids.clone(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, delta: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient contribution to a binary-op input that may have been broadcast
/// from a single value.
fn reduce_broadcast(target_numel: usize, g: Vec<f64>) -> Vec<f64> {
    if target_numel == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let needs = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if needs(*a) {
                // dA = G · Bᵀ
                let bt = vb.transpose();
                let mut da = vec![0.0; m * k];
                matmul_into(g, bt.data(), &mut da, m, n, k);
                accumulate(grads, *a, da);
            }
            if needs(*b) {
                // dB = Aᵀ · G
                let at = va.transpose();
                let mut db = vec![0.0; k * n];
                matmul_into(at.data(), g, &mut db, k, m, n);
                accumulate(grads, *b, db);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            if needs(*a) {
                let n = nodes[*a].value.numel();
                accumulate(grads, *a, reduce_broadcast(n, g.to_vec()));
            }
            if needs(*b) {
                let n = nodes[*b].value.numel();
                let gb = g.iter().map(|v| sign * v).collect();
                accumulate(grads, *b, reduce_broadcast(n, gb));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
            let at = |x: &[f64], i: usize| if x.len() == 1 { x[0] } else { x[i] };
            if needs(*a) {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * at(vb, i)).collect();
                accumulate(grads, *a, reduce_broadcast(va.len(), ga));
            }
            if needs(*b) {
                let gb = g.iter().enumerate().map(|(i, gi)| gi * at(va, i)).collect();
                accumulate(grads, *b, reduce_broadcast(vb.len(), gb));
            }
        }
        Op::AddRow(a, row) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*row) {
                let n = nodes[*row].value.numel();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(s, v)| *s += v);
                }
                accumulate(grads, *row, gr);
            }
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(grads, *a, ga);
        }
        Op::Exp(a) => {
            let ga = g.iter().zip(out.data()).map(|(gi, yi)| gi * yi).collect();
            accumulate(grads, *a, ga);
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            let ga = g.iter().zip(x).map(|(gi, xi)| gi / xi).collect();
            accumulate(grads, *a, ga);
        }
        Op::Neg(a) => accumulate(grads, *a, g.iter().map(|v| -v).collect()),
        Op::Scale(a, k) => accumulate(grads, *a, g.iter().map(|v| k * v).collect()),
        Op::AddScalar(a) => accumulate(grads, *a, g.to_vec()),
        Op::Sum(a) => {
            let n = nodes[*a].value.numel();
            accumulate(grads, *a, vec![g[0]; n]);
        }
        Op::RowSums(a) => {
            let cols = nodes[*a].value.cols();
            let ga = g
                .iter()
                .flat_map(|&gi| std::iter::repeat_n(gi, cols))
                .collect();
            accumulate(grads, *a, ga);
        }
        Op::SoftmaxTemp(a, tau) => {
            let cols = out.cols();
            let mut ga = Vec::with_capacity(g.len());
            for (s, gr) in out.data().chunks(cols).zip(g.chunks(cols)) {
                let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                ga.extend(s.iter().zip(gr).map(|(si, gi)| si * (gi - dot) / tau));
            }
            accumulate(grads, *a, ga);
        }
        Op::LogSoftmaxTemp(a, tau) => {
            let cols = out.cols();
            let mut ga = Vec::with_capacity(g.len());
            for (ls, gr) in out.data().chunks(cols).zip(g.chunks(cols)) {
                let total: f64 = gr.iter().sum();
                ga.extend(
                    ls.iter()
                        .zip(gr)
                        .map(|(li, gi)| (gi - li.exp() * total) / tau),
                );
            }
            accumulate(grads, *a, ga);
        }
        Op::ConcatCols(ids) => {
            let total = out.cols();
            let mut offset = 0;
            for &i in ids {
                let c = nodes[i].value.cols();
                if needs(i) {
                    let gi = g
                        .chunks(total)
                        .flat_map(|row| row[offset..offset + c].iter().copied())
                        .collect();
                    accumulate(grads, i, gi);
                }
                offset += c;
            }
        }
    }
}

/// Row-wise `softmax(x / tau)` with max subtraction.
pub fn softmax_rows(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let cols = x.cols();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|v| ((v - max) / tau).exp()));
        let z: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn log_softmax_rows(x: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let cols = x.cols();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = row.iter().map(|v| (v - max) / tau).collect();
        let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
        data.extend(shifted.iter().map(|v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), data)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {tau}"
        )))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// The scalar held by a single-element var.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage("vars belong to different tapes".into()))
        }
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let out = self.tape.value(self.id).map(f);
        self.tape.push(out, op)
    }

    fn binary(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape() == b.shape() {
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else if b.is_scalar() {
                let y = b.data()[0];
                a.map(|x| f(x, y))
            } else if a.is_scalar() {
                let x = a.data()[0];
                b.map(|y| f(x, y))
            } else {
                return Err(Error::Shape(format!(
                    "{} needs equal shapes or a scalar operand, got {:?} and {:?}",
                    op.name(),
                    a.shape(),
                    b.shape()
                )));
            }
        };
        self.tape.push(out, op)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let out = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(other.id);
            if a.shape().len() != 2 || b.shape().len() != 2 {
                return Err(Error::Shape(format!(
                    "matmul needs rank-2 operands, got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            a.matmul(&b)?
        };
        self.tape.push(out, Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Adds a length-`cols` row to every row of a matrix (bias add).
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(row)?;
        let out = {
            let a = self.tape.value(self.id);
            let r = self.tape.value(row.id);
            if r.numel() != a.cols() || r.rows() != 1 {
                return Err(Error::Shape(format!(
                    "add_row needs a 1x{} row, got {:?}",
                    a.cols(),
                    r.shape()
                )));
            }
            let mut data = a.data().to_vec();
            for chunk in data.chunks_mut(r.numel()) {
                chunk.iter_mut().zip(r.data()).for_each(|(x, b)| *x += b);
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.push(out, Op::AddRow(self.id, row.id))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        if let Some(bad) = self
            .tape
            .value(self.id)
            .data()
            .iter()
            .find(|&&v| v <= 0.0 || v.is_nan())
        {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(&self, k: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, k), |x| k * x)
    }

    pub fn add_scalar(&self, k: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(self.id), |x| x + k)
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.tape.value(self.id).data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.tape.value(self.id).numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Per-row sums of a matrix, as a `rows × 1` column.
    pub fn row_sums(&self) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value(self.id);
            let sums = a.row_iter().map(|r| r.iter().sum()).collect();
            Tensor::matrix(a.rows(), 1, sums)?
        };
        self.tape.push(out, Op::RowSums(self.id))
    }

    /// Row-wise temperature softmax.
    pub fn softmax_temp(&self, tau: f64) -> Result<Var<'t>> {
        let out = softmax_rows(&self.tape.value(self.id), tau)?;
        self.tape.push(out, Op::SoftmaxTemp(self.id, tau))
    }

    /// Row-wise `log softmax(x / tau)`, stable for large logits.
    pub fn log_softmax_temp(&self, tau: f64) -> Result<Var<'t>> {
        let out = log_softmax_rows(&self.tape.value(self.id), tau)?;
        self.tape.push(out, Op::LogSoftmaxTemp(self.id, tau))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        };
        let tape = first.tape;
        for p in parts {
            first.same_tape(p)?;
        }
        let out = {
            let values: Vec<_> = parts.iter().map(|p| tape.value(p.id)).collect();
            let rows = values[0].rows();
            if values.iter().any(|v| v.rows() != rows) {
                return Err(Error::Shape("concat_cols needs equal row counts".into()));
            }
            let cols: usize = values.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }
}
