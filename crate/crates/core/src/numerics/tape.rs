//! Define-by-run reverse-mode differentiation over [`Array`] values.
//!
//! A [`Tape`] records every operation whose operands include at least one
//! attached [`Var`]. Values created with [`Var::constant`] (or cut off with
//! [`Var::detach`]) never get a node, so no gradient can reach them; this is
//! how stop-gradient is expressed.
//!
//! Shape rules for the binary ops (`add`, `sub`, `mul`, `div`): both
//! operands are viewed as matrices and each dimension must either agree or
//! be `1` on one side, in which case that side is repeated. This covers the
//! three forms the models need: bias rows (`1 x d` against `n x d`),
//! per-sample scales (`n x 1` against `n x d`) and scalars (`1 x 1`).
//! Nothing else broadcasts.
//!
//! ```
//! use scorealign::numerics::{Array, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Array::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.wrt(&x).item(), 6.0);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use super::array::Array;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Scale(f64),
    Sum,
    SumRows,
    Mean,
    Square,
    Sqrt,
    Exp,
    Log,
    Softplus,
    ConcatCols,
    GatherRows(Vec<usize>),
    /// Row-wise map with stored per-row Jacobians (`out_cols x in_cols`).
    RowMap { jac: Vec<f64> },
}

#[derive(Debug)]
struct Operand {
    node: Option<usize>,
    value: Rc<Array>,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Operand>,
    value: Rc<Array>,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Append-only record of attached operations.
#[derive(Debug, Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// A value, optionally attached to a tape node.
#[derive(Clone, Debug)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    node: Option<usize>,
    value: Rc<Array>,
}

/// Gradients from one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    /// Gradient reaching `v`; `None` for detached values or nodes the loss
    /// does not depend on.
    pub fn get(&self, v: &Var<'_>) -> Option<&Array> {
        v.node.and_then(|n| self.grads.get(n).and_then(Option::as_ref))
    }

    /// Like [`Gradients::get`] but zero-filled.
    pub fn wrt(&self, v: &Var<'_>) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros_like(v.value()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attached leaf (a differentiable input or parameter).
    pub fn leaf(&self, value: Array) -> Var<'_> {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: value.clone(),
        });
        Var {
            tape: Some(self),
            node: Some(inner.nodes.len() - 1),
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can be reused for a new step.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    fn push(&self, op: Op, inputs: Vec<Operand>, value: Array) -> Var<'_> {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            inputs,
            value: value.clone(),
        });
        Var {
            tape: Some(self),
            node: Some(inner.nodes.len() - 1),
            value,
        }
    }

    /// Reverse sweep from a scalar loss. A tape supports one sweep; call
    /// [`Tape::reset`] before recording the next step.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::NotScalar(loss.value.shape().to_vec()));
        }
        let (Some(tape), Some(root)) = (loss.tape, loss.node) else {
            return Err(Error::Detached);
        };
        if !std::ptr::eq(tape, self) {
            return Err(Error::invalid("loss belongs to a different tape"));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::StaleTape);
        }
        inner.consumed = true;

        let mut grads: Vec<Option<Array>> = vec![None; inner.nodes.len()];
        grads[root] = Some(Array::full(1, 1, 1.0));
        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &inner.nodes[idx];
            let contribs = node_backward(node, &g);
            for (operand, contrib) in node.inputs.iter().zip(contribs) {
                if let (Some(n), Some(c)) = (operand.node, contrib) {
                    match &mut grads[n] {
                        Some(acc) => acc.axpy(1.0, &c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn bcast_dims(op: &'static str, a: &Array, b: &Array) -> Result<(usize, usize)> {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }),
    }
}

#[inline]
fn bidx(a: &Array, i: usize, j: usize) -> usize {
    let (r, c) = a.dims();
    (if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }
}

fn zip_bcast(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    let (r, c) = bcast_dims(op, a, b)?;
    if a.dims() == (r, c) && b.dims() == (r, c) {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Array::matrix(r, c, data);
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(f(a.data()[bidx(a, i, j)], b.data()[bidx(b, i, j)]));
        }
    }
    Array::matrix(r, c, data)
}

/// Sum `g` down to the matrix shape of `like` (undoing broadcast).
fn reduce_to(g: &Array, like: &Array) -> Array {
    if g.dims() == like.dims() {
        return Array::new(like.shape().to_vec(), g.data().to_vec()).expect("same size");
    }
    let (r, c) = g.dims();
    let mut out = Array::zeros_like(like);
    for i in 0..r {
        for j in 0..c {
            let k = bidx(like, i, j);
            out.data_mut()[k] += g.data()[i * c + j];
        }
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn node_backward(node: &Node, g: &Array) -> Vec<Option<Array>> {
    let inp = |k: usize| -> &Array { &node.inputs[k].value };
    let wants = |k: usize| node.inputs[k].node.is_some();
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![
            wants(0).then(|| reduce_to(g, inp(0))),
            wants(1).then(|| reduce_to(g, inp(1))),
        ],
        Op::Sub => vec![
            wants(0).then(|| reduce_to(g, inp(0))),
            wants(1).then(|| reduce_to(&g.map(|v| -v), inp(1))),
        ],
        Op::Mul => {
            let (a, b) = (inp(0), inp(1));
            vec![
                wants(0).then(|| reduce_to(&zip_bcast("mul", g, b, |x, y| x * y).unwrap(), a)),
                wants(1).then(|| reduce_to(&zip_bcast("mul", g, a, |x, y| x * y).unwrap(), b)),
            ]
        }
        Op::Div => {
            let (a, b) = (inp(0), inp(1));
            let ga = wants(0).then(|| reduce_to(&zip_bcast("div", g, b, |x, y| x / y).unwrap(), a));
            let gb = wants(1).then(|| {
                // d(a/b)/db = -out/b
                let q = zip_bcast("div", &node.value, b, |o, y| -o / y).unwrap();
                reduce_to(&zip_bcast("mul", g, &q, |x, y| x * y).unwrap(), b)
            });
            vec![ga, gb]
        }
        Op::MatMul => {
            let (a, b) = (inp(0), inp(1));
            vec![
                wants(0).then(|| g.matmul(&b.transpose()).unwrap()),
                wants(1).then(|| a.transpose().matmul(g).unwrap()),
            ]
        }
        Op::Transpose => vec![Some(g.transpose())],
        Op::Scale(s) => vec![Some(g.map(|v| v * s))],
        Op::Sum => {
            let gv = g.item();
            vec![Some(inp(0).map(|_| gv))]
        }
        Op::Mean => {
            let n = inp(0).len().max(1) as f64;
            let gv = g.item() / n;
            vec![Some(inp(0).map(|_| gv))]
        }
        Op::SumRows => {
            let x = inp(0);
            let (r, c) = x.dims();
            let mut out = Array::zeros(r, c);
            for i in 0..r {
                let gi = g.data()[i];
                out.row_slice_mut(i).iter_mut().for_each(|v| *v = gi);
            }
            vec![Some(out)]
        }
        Op::Square => vec![Some(elementwise(g, inp(0), |gv, x| 2.0 * x * gv))],
        Op::Sqrt => vec![Some(elementwise(g, &node.value, |gv, y| 0.5 * gv / y))],
        Op::Exp => vec![Some(elementwise(g, &node.value, |gv, y| gv * y))],
        Op::Log => vec![Some(elementwise(g, inp(0), |gv, x| gv / x))],
        Op::Softplus => vec![Some(elementwise(g, inp(0), |gv, x| gv * sigmoid(x)))],
        Op::ConcatCols => {
            let rows = g.rows();
            let mut offset = 0;
            let mut out = Vec::with_capacity(node.inputs.len());
            for operand in &node.inputs {
                let w = operand.value.cols();
                if operand.node.is_some() {
                    let mut part = Array::zeros(rows, w);
                    for i in 0..rows {
                        part.row_slice_mut(i)
                            .copy_from_slice(&g.row_slice(i)[offset..offset + w]);
                    }
                    out.push(Some(part));
                } else {
                    out.push(None);
                }
                offset += w;
            }
            out
        }
        Op::GatherRows(idx) => {
            let table = inp(0);
            let mut out = Array::zeros_like(table);
            for (i, &src) in idx.iter().enumerate() {
                for (o, v) in out.row_slice_mut(src).iter_mut().zip(g.row_slice(i)) {
                    *o += v;
                }
            }
            vec![Some(out)]
        }
        Op::RowMap { jac } => {
            let x = inp(0);
            let (rows, d) = x.dims();
            let m = g.cols();
            let mut out = Array::zeros(rows, d);
            for i in 0..rows {
                let gi = g.row_slice(i);
                let ji = &jac[i * m * d..(i + 1) * m * d];
                let oi = out.row_slice_mut(i);
                for (k, &gk) in gi.iter().enumerate() {
                    if gk == 0.0 {
                        continue;
                    }
                    for (o, &jv) in oi.iter_mut().zip(&ji[k * d..(k + 1) * d]) {
                        *o += gk * jv;
                    }
                }
            }
            vec![Some(out)]
        }
    }
}

fn elementwise(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::new(x.shape().to_vec(), data).expect("same size")
}

impl<'t> Var<'t> {
    /// Detached value: participates in arithmetic, never receives gradient.
    pub fn constant(value: Array) -> Self {
        Var {
            tape: None,
            node: None,
            value: Rc::new(value),
        }
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Stop-gradient: same value, no tape node.
    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: None,
            node: None,
            value: self.value.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    fn operand(&self) -> Operand {
        Operand {
            node: self.node,
            value: self.value.clone(),
        }
    }

    fn tape_of(vars: &[&Var<'t>]) -> Result<Option<&'t Tape>> {
        let mut found: Option<&'t Tape> = None;
        for v in vars {
            if let Some(t) = v.tape.filter(|_| v.node.is_some()) {
                match found {
                    Some(f) if !std::ptr::eq(f, t) => {
                        return Err(Error::invalid("operands recorded on different tapes"))
                    }
                    _ => found = Some(t),
                }
            }
        }
        Ok(found)
    }

    fn record(inputs: &[&Var<'t>], op: Op, value: Array) -> Result<Var<'t>> {
        Ok(match Self::tape_of(inputs)? {
            Some(tape) => tape.push(op, inputs.iter().map(|v| v.operand()).collect(), value),
            None => Var::constant(value),
        })
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = zip_bcast("add", &self.value, &other.value, |a, b| a + b)?;
        Self::record(&[self, other], Op::Add, v)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = zip_bcast("sub", &self.value, &other.value, |a, b| a - b)?;
        Self::record(&[self, other], Op::Sub, v)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = zip_bcast("mul", &self.value, &other.value, |a, b| a * b)?;
        Self::record(&[self, other], Op::Mul, v)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = zip_bcast("div", &self.value, &other.value, |a, b| a / b)?;
        Self::record(&[self, other], Op::Div, v)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let v = self.value.matmul(&other.value)?;
        Self::record(&[self, other], Op::MatMul, v)
    }

    /// `self @ weight + bias` with `bias` a `1 x out` row.
    pub fn affine(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        self.matmul(weight)?.add(bias)
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        Self::record(&[self], Op::Transpose, self.value.transpose())
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        Self::record(&[self], Op::Scale(s), self.value.map(|v| v * s))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&self) -> Result<Var<'t>> {
        Self::record(&[self], Op::Sum, Array::scalar(self.value.sum()))
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&self) -> Result<Var<'t>> {
        let n = self.value.len().max(1) as f64;
        Self::record(&[self], Op::Mean, Array::scalar(self.value.sum() / n))
    }

    /// Per-row sums, `n x 1`.
    pub fn sum_rows(&self) -> Result<Var<'t>> {
        let (r, _) = self.value.dims();
        let data = (0..r).map(|i| self.value.row_slice(i).iter().sum()).collect();
        Self::record(&[self], Op::SumRows, Array::matrix(r, 1, data)?)
    }

    pub fn square(&self) -> Result<Var<'t>> {
        Self::record(&[self], Op::Square, self.value.map(|v| v * v))
    }

    pub fn sqrt(&self) -> Result<Var<'t>> {
        Self::record(&[self], Op::Sqrt, self.value.map(f64::sqrt))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        Self::record(&[self], Op::Exp, self.value.map(f64::exp))
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        Self::record(&[self], Op::Log, self.value.map(f64::ln))
    }

    /// `ln(1 + e^x)`, the hidden activation of every network here.
    pub fn softplus(&self) -> Result<Var<'t>> {
        Self::record(&[self], Op::Softplus, self.value.map(softplus))
    }

    /// Full inner product of two same-shaped arrays, `1 x 1`.
    pub fn dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.value.dims() != other.value.dims() {
            return Err(Error::Shape {
                op: "dot",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        self.mul(other)?.sum()
    }

    /// Per-row inner products, `n x 1`.
    pub fn row_dot(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.value.dims() != other.value.dims() {
            return Err(Error::Shape {
                op: "row_dot",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        self.mul(other)?.sum_rows()
    }

    pub fn concat_cols(parts: &[&Var<'t>]) -> Result<Var<'t>> {
        let arrays: Vec<&Array> = parts.iter().map(|p| p.value.as_ref()).collect();
        let v = Array::concat_cols(&arrays)?;
        Self::record(parts, Op::ConcatCols, v)
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let rows = self.value.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("row index {bad} out of {rows}")));
        }
        let v = self.value.select_rows(idx);
        Self::record(&[self], Op::GatherRows(idx.to_vec()), v)
    }

    /// Applies a row-wise map `R^d -> R^m` supplied with its Jacobian.
    ///
    /// `f(row, x, out, jac)` fills `out` (len `m`) and, when `jac` is
    /// `Some`, the row-major `m x d` Jacobian. The Jacobian is only
    /// requested when `self` is attached.
    pub fn map_rows<F>(&self, out_cols: usize, mut f: F) -> Result<Var<'t>>
    where
        F: FnMut(usize, &[f64], &mut [f64], Option<&mut [f64]>) -> Result<()>,
    {
        let (rows, d) = self.value.dims();
        let mut out = Array::zeros(rows, out_cols);
        if self.is_attached() {
            let mut jac = vec![0.0; rows * out_cols * d];
            for i in 0..rows {
                let j = &mut jac[i * out_cols * d..(i + 1) * out_cols * d];
                f(i, self.value.row_slice(i), out.row_slice_mut(i), Some(j))?;
            }
            Self::record(&[self], Op::RowMap { jac }, out)
        } else {
            for i in 0..rows {
                f(i, self.value.row_slice(i), out.row_slice_mut(i), None)?;
            }
            Ok(Var::constant(out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(a: Array) -> Var<'static> {
        Var::constant(a)
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.wrt(&x).item(), 6.0);
    }

    #[test]
    fn sum_of_squares() {
        let s = c(Array::row(&[3.0, 4.0])).square().unwrap().sum().unwrap();
        assert_eq!(s.value().item(), 25.0);
    }

    #[test]
    fn detached_operand_gets_nothing() {
        let tape = Tape::new();
        let w = tape.leaf(Array::row(&[1.0, -2.0]));
        let x = tape.leaf(Array::row(&[0.5, 3.0])).detach();
        let loss = w.dot(&x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&w).data(), &[0.5, 3.0]);
        assert!(g.get(&x).is_none());
    }

    #[test]
    fn least_squares_gradient() {
        let tape = Tape::new();
        let (x, y) = (2.0, 1.0);
        let w = tape.leaf(Array::scalar(0.7));
        let r = w
            .mul(&c(Array::scalar(x)))
            .unwrap()
            .sub(&c(Array::scalar(y)))
            .unwrap();
        let loss = r.square().unwrap().mean().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!((g.wrt(&w).item() - 2.0 * x * (0.7 * x - y)).abs() < 1e-14);
    }

    #[test]
    fn second_backward_is_stale() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(1.0));
        let y = x.square().unwrap();
        tape.backward(&y).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::StaleTape)));
        tape.reset();
        let x = tape.leaf(Array::scalar(1.0));
        let y = x.square().unwrap();
        assert!(tape.backward(&y).is_ok());
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Array::row(&[1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(Error::NotScalar(_))));
        let k = c(Array::scalar(1.0));
        assert!(matches!(tape.backward(&k), Err(Error::Detached)));
    }

    #[test]
    fn broadcast_shapes() {
        let a = c(Array::zeros(3, 2));
        assert_eq!(a.add(&c(Array::row(&[1.0, 2.0]))).unwrap().value().dims(), (3, 2));
        assert_eq!(a.mul(&c(Array::column(&[1.0, 2.0, 3.0]))).unwrap().value().dims(), (3, 2));
        let err = a.add(&c(Array::zeros(2, 2))).unwrap_err().to_string();
        assert!(err.contains("[3, 2]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let tape = Tape::new();
        let x = tape.leaf(Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = tape.leaf(Array::row(&[10.0, 20.0]));
        let s = tape.leaf(Array::column(&[2.0, 3.0]));
        let loss = x.add(&b).unwrap().mul(&s).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&b).data(), &[5.0, 5.0]);
        assert_eq!(g.wrt(&s).data(), &[33.0, 37.0]);
        assert_eq!(g.wrt(&x).data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn constants_do_not_touch_tape() {
        let tape = Tape::new();
        let x = tape.leaf(Array::scalar(2.0));
        let before = tape.len();
        let k = c(Array::scalar(3.0)).exp().unwrap();
        assert_eq!(tape.len(), before);
        let _ = x.mul(&k).unwrap();
        assert_eq!(tape.len(), before + 1);
    }
}
