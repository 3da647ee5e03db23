//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op applied to its [`Var`]s in creation order, so
//! walking the node list backwards is a valid topological order for the
//! backward pass. Nodes that do not depend on a gradient-requiring leaf keep
//! no backward closure.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulators handed to backward closures.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
    needs: &'a [bool],
}

impl GradSink<'_> {
    /// Accumulator for node `id`, or `None` when it needs no gradient.
    pub fn slot(&mut self, id: usize) -> Option<&mut [f64]> {
        if !self.needs[id] {
            return None;
        }
        let size = self.sizes[id];
        Some(self.grads[id].get_or_insert_with(|| vec![0.0; size]))
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` did not influence it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.wrt_id(v.id)
    }

    pub(crate) fn wrt_id(&self, id: usize) -> Tensor {
        let shape = &self.shapes[id];
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::numerics(
            op,
            format!("non-finite value {} at flat index {pos}", t.data()[pos]),
        ));
    }
    Ok(())
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, with broadcast dimensions given stride 0.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides(a);
    let sb = strides(b);
    let rank = out.len();
    let sa: Vec<usize> = (0..rank).map(|d| if a[d] == 1 { 0 } else { sa[d] }).collect();
    let sb: Vec<usize> = (0..rank).map(|d| if b[d] == 1 { 0 } else { sb[d] }).collect();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives a gradient.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push<F>(&self, op: &'static str, value: Tensor, parents: &[usize], backward: F) -> Result<Var<'_>>
    where
        F: Fn(&[f64], &mut GradSink<'_>) + 'static,
    {
        check_finite(op, &value)?;
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the scalar `loss` w.r.t. every node that requires one.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let n = loss.id + 1;
        let sizes: Vec<usize> = nodes.iter().map(|nd| nd.value.len()).collect();
        let needs: Vec<bool> = nodes.iter().map(|nd| nd.requires_grad).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if needs[loss.id] {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..n).rev() {
            let Some(bw) = nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    sizes: &sizes,
                    needs: &needs,
                };
                bw(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        for (id, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerics(
                        "backward",
                        format!("non-finite gradient at node {id}"),
                    ));
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|nd| nd.value.shape().to_vec()).collect(),
        })
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'g>(&'g self, vars: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .shape();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let values: Vec<Rc<Tensor>> = vars.iter().map(|v| v.value()).collect();
        let mut lens = Vec::with_capacity(vars.len());
        for v in &values {
            let s = v.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
        let ids_bw = ids.clone();
        self.push(
            "concat",
            Tensor::new(&out_shape, data)?,
            &ids,
            move |g, sink| {
                let mut offset = 0;
                for (&id, &len) in ids_bw.iter().zip(&lens) {
                    if let Some(s) = sink.slot(id) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, v) in s[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    offset += len;
                }
            },
        )
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    /// Same value, cut off from gradient flow.
    pub fn detach(&self) -> Var<'g> {
        let v = self.value();
        let mut nodes = self.graph.nodes.borrow_mut();
        nodes.push(Node {
            value: v,
            requires_grad: false,
            backward: None,
        });
        Var {
            graph: self.graph,
            id: nodes.len() - 1,
        }
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        // derivative given (input, output)
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'g>> {
        let x = self.value();
        let y = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?;
        if let Some(pos) = y.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::numerics(
                op,
                format!("non-finite output for input {}", x.data()[pos]),
            ));
        }
        let y_rc = Rc::new(y.clone());
        let id = self.id;
        self.graph.push(op, y, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for i in 0..g.len() {
                    s[i] += g[i] * df(x.data()[i], y_rc.data()[i]);
                }
            }
        })
    }

    pub fn exp(&self) -> Result<Var<'g>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Result<Var<'g>> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&self) -> Result<Var<'g>> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Var<'g>> {
        self.unary(
            "sigmoid",
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn relu(&self) -> Result<Var<'g>> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'g>> {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn sqrt(&self) -> Result<Var<'g>> {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Result<Var<'g>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'g>> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'g>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    fn binary(&self, other: Var<'g>, op: BinOp) -> Result<Var<'g>> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(name, a.shape(), b.shape())?;
        let apply = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        let same = a.shape() == b.shape();
        if same {
            for (i, d) in data.iter_mut().enumerate() {
                *d = apply(a.data()[i], b.data()[i]);
            }
        } else {
            for_each_broadcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| {
                data[o] = apply(a.data()[ia], b.data()[ib]);
            });
        }
        let (ia_id, ib_id) = (self.id, other.id);
        let os = out_shape.clone();
        self.graph.push(name, Tensor::new(&out_shape, data)?, &[ia_id, ib_id], move |g, sink| {
            let (ad, bd) = (a.data(), b.data());
            let da = |ga: f64, _x: f64, y: f64| match op {
                BinOp::Add | BinOp::Sub => ga,
                BinOp::Mul => ga * y,
                BinOp::Div => ga / y,
            };
            let db = |gb: f64, x: f64, y: f64| match op {
                BinOp::Add => gb,
                BinOp::Sub => -gb,
                BinOp::Mul => gb * x,
                BinOp::Div => -gb * x / (y * y),
            };
            if let Some(s) = sink.slot(ia_id) {
                if same {
                    for i in 0..g.len() {
                        s[i] += da(g[i], ad[i], bd[i]);
                    }
                } else {
                    for_each_broadcast(&os, a.shape(), b.shape(), |o, ia, ib| {
                        s[ia] += da(g[o], ad[ia], bd[ib]);
                    });
                }
            }
            if let Some(s) = sink.slot(ib_id) {
                if same {
                    for i in 0..g.len() {
                        s[i] += db(g[i], ad[i], bd[i]);
                    }
                } else {
                    for_each_broadcast(&os, a.shape(), b.shape(), |o, ia, ib| {
                        s[ib] += db(g[o], ad[ia], bd[ib]);
                    });
                }
            }
        })
    }

    /// Elementwise ops below broadcast over size-1 dimensions of equal-rank inputs.
    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinOp::Div)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let y = (*x).clone().reshape(shape)?;
        let id = self.id;
        self.graph.push("reshape", y, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                kernels::axpy(1.0, g, s);
            }
        })
    }

    /// General axis permutation: output dim `d` is input dim `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        // map[o] = input flat index of output element o
        let total = x.len();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..rank).rev() {
                idx[d] += 1;
                off += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        let data = map.iter().map(|&i| x.data()[i]).collect();
        let id = self.id;
        self.graph.push("permute", Tensor::new(&out_shape, data)?, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for (o, &i) in map.iter().enumerate() {
                    s[i] += g[o];
                }
            }
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let id = self.id;
        self.graph.push("slice", Tensor::new(&out_shape, data)?, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for o in 0..outer {
                    let dst = &mut s[(o * full + start) * inner..(o * full + start + len) * inner];
                    kernels::axpy(1.0, &g[o * len * inner..(o + 1) * len * inner], dst);
                }
            }
        })
    }

    pub fn sum(&self) -> Result<Var<'g>> {
        let x = self.value();
        let total: f64 = x.data().iter().sum();
        let id = self.id;
        self.graph.push("sum", Tensor::scalar(total), &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                s.iter_mut().for_each(|v| *v += g[0]);
            }
        })
    }

    pub fn mean(&self) -> Result<Var<'g>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sums over `axis`, keeping it with length 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                kernels::axpy(1.0, src, &mut data[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let id = self.id;
        self.graph.push("sum_axis", Tensor::new(&out_shape, data)?, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for o in 0..outer {
                    for l in 0..len {
                        let dst = &mut s[(o * len + l) * inner..(o * len + l + 1) * inner];
                        kernels::axpy(1.0, &g[o * inner..(o + 1) * inner], dst);
                    }
                }
            }
        })
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        check_finite("softmax", &x)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut y = vec![0.0; x.len()];
        softmax_lanes(x.data(), &mut y, outer, len, inner);
        let y = Rc::new(Tensor::new(&shape, y)?);
        let y_bw = Rc::clone(&y);
        let id = self.id;
        self.graph.push("softmax", (*y).clone(), &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                let yd = y_bw.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dotp: f64 = (0..len).map(|l| g[at(l)] * yd[at(l)]).sum();
                        for l in 0..len {
                            s[at(l)] += yd[at(l)] * (g[at(l)] - dotp);
                        }
                    }
                }
            }
        })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("log_softmax", format!("axis {axis} of {shape:?}")));
        }
        check_finite("log_softmax", &x)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = x.data();
        let mut y = vec![0.0; x.len()];
        let mut p = vec![0.0; x.len()];
        softmax_lanes(xd, &mut p, outer, len, inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|l| (xd[at(l)] - m).exp()).sum::<f64>().ln();
                for l in 0..len {
                    y[at(l)] = xd[at(l)] - lse;
                }
            }
        }
        let id = self.id;
        self.graph.push("log_softmax", Tensor::new(&shape, y)?, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: f64 = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            s[at(l)] += g[at(l)] - p[at(l)] * gs;
                        }
                    }
                }
            }
        })
    }

    /// `log Σ exp` along `axis`, keeping it with length 1.
    pub fn logsumexp(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("logsumexp", format!("axis {axis} of {shape:?}")));
        }
        check_finite("logsumexp", &x)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = x.data();
        let mut p = vec![0.0; x.len()];
        softmax_lanes(xd, &mut p, outer, len, inner);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = m + (0..len).map(|l| (xd[at(l)] - m).exp()).sum::<f64>().ln();
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let id = self.id;
        self.graph.push("logsumexp", Tensor::new(&out_shape, out)?, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for o in 0..outer {
                    for i in 0..inner {
                        for l in 0..len {
                            let at = (o * len + l) * inner + i;
                            s[at] += g[o * inner + i] * p[at];
                        }
                    }
                }
            }
        })
    }

    /// Scales each lane along `axis` to unit Euclidean norm. A zero-norm lane
    /// is an error.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("l2_normalize", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = x.data();
        let mut norms = vec![0.0; outer * inner];
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let n = (0..len).map(|l| xd[at(l)] * xd[at(l)]).sum::<f64>().sqrt();
                if !(n > 0.0) || !n.is_finite() {
                    return Err(Error::numerics(
                        "cosine",
                        format!("vector with norm {n} at lane ({o}, {i})"),
                    ));
                }
                norms[o * inner + i] = n;
                for l in 0..len {
                    y[at(l)] = xd[at(l)] / n;
                }
            }
        }
        let y = Rc::new(Tensor::new(&shape, y)?);
        let y_bw = Rc::clone(&y);
        let id = self.id;
        self.graph.push("l2_normalize", (*y).clone(), &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                let yd = y_bw.data();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dotp: f64 = (0..len).map(|l| g[at(l)] * yd[at(l)]).sum();
                        let n = norms[o * inner + i];
                        for l in 0..len {
                            s[at(l)] += (g[at(l)] - yd[at(l)] * dotp) / n;
                        }
                    }
                }
            }
        })
    }

    /// Batched matrix product of rank-3 inputs `(batch, rows, cols)`.
    /// `ta`/`tb` transpose the per-batch matrices; a batch of 1 broadcasts.
    pub fn bmm(&self, other: Var<'g>, ta: bool, tb: bool) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 {
            return Err(Error::shape("bmm", format!("need rank 3, got {sa:?} and {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        let (ba, bb) = (sa[0], sb[0]);
        if k != k2 || (ba != bb && ba != 1 && bb != 1) {
            return Err(Error::shape(
                "bmm",
                format!("{sa:?}{} x {sb:?}{}", if ta { "ᵀ" } else { "" }, if tb { "ᵀ" } else { "" }),
            ));
        }
        let batch = ba.max(bb);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let at = if ba == 1 { 0 } else { t };
            let bt = if bb == 1 { 0 } else { t };
            matmul_into(
                &a.data()[at * m * k..(at + 1) * m * k],
                ta,
                &b.data()[bt * k * n..(bt + 1) * k * n],
                tb,
                &mut out[t * m * n..(t + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let (ida, idb) = (self.id, other.id);
        self.graph.push("bmm", Tensor::new(&[batch, m, n], out)?, &[ida, idb], move |g, sink| {
            if let Some(s) = sink.slot(ida) {
                for t in 0..batch {
                    let at = if ba == 1 { 0 } else { t };
                    let bt = if bb == 1 { 0 } else { t };
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let bslice = &b.data()[bt * k * n..(bt + 1) * k * n];
                    let dst = &mut s[at * m * k..(at + 1) * m * k];
                    if ta {
                        // stored aᵀ (k×m): grad = B·dCᵀ
                        matmul_into(bslice, tb, gt, true, dst, k, n, m);
                    } else {
                        matmul_into(gt, false, bslice, !tb, dst, m, n, k);
                    }
                }
            }
            if let Some(s) = sink.slot(idb) {
                for t in 0..batch {
                    let at = if ba == 1 { 0 } else { t };
                    let bt = if bb == 1 { 0 } else { t };
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let aslice = &a.data()[at * m * k..(at + 1) * m * k];
                    let dst = &mut s[bt * k * n..(bt + 1) * k * n];
                    if tb {
                        // stored bᵀ (n×k): grad = dCᵀ·A
                        matmul_into(gt, true, aslice, ta, dst, n, m, k);
                    } else {
                        matmul_into(aslice, !ta, gt, false, dst, k, m, n);
                    }
                }
            }
        })
    }

    /// `x · wᵀ + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&self, w: Var<'g>, b: Option<Var<'g>>) -> Result<Var<'g>> {
        let xs = self.shape();
        let ws = w.shape();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let y = self
            .reshape(&[1, xs[0], xs[1]])?
            .bmm(w.reshape(&[1, ws[0], ws[1]])?, false, true)?
            .reshape(&[xs[0], ws[0]])?;
        match b {
            Some(b) => y.add(b.reshape(&[1, ws[0]])?),
            None => Ok(y),
        }
    }

    /// Row gather: `ids` index the first axis of a `(vocab, dim)` table.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'g>> {
        let table = self.value();
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", format!("table {shape:?}")));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocab { id: bad, size: vocab });
        }
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&table.data()[i * dim..(i + 1) * dim]);
        }
        let ids = ids.to_vec();
        let id = self.id;
        self.graph.push("embedding", Tensor::new(&[ids.len(), dim], data)?, &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for (r, &i) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * dim..(r + 1) * dim], &mut s[i * dim..(i + 1) * dim]);
                }
            }
        })
    }

    /// 2-D convolution of `(B, C, H, W)` with weights `(O, C, k, k)`, explicit
    /// stride and zero padding.
    pub fn conv2d(&self, w: Var<'g>, bias: Option<Var<'g>>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let x = self.value();
        let wt = w.value();
        let (xs, ws) = (x.shape().to_vec(), wt.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}, stride {stride}")));
        }
        let geom = ConvGeom {
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            stride,
            pad,
        };
        if xs[2] + 2 * pad < geom.k || xs[3] + 2 * pad < geom.k {
            return Err(Error::shape("conv2d", format!("kernel {} larger than padded input {xs:?}", geom.k)));
        }
        let (batch, c_out) = (xs[0], ws[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (krows, ncol) = (geom.col_rows(), geom.col_cols());
        let in_sz = xs[1] * xs[2] * xs[3];
        let out_sz = c_out * ncol;
        let bias_val = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [c_out] {
                    return Err(Error::shape("conv2d", format!("bias {:?} for {c_out} channels", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![0.0; batch * out_sz];
        let mut cols = vec![0.0; krows * ncol];
        for t in 0..batch {
            kernels::im2col(&x.data()[t * in_sz..(t + 1) * in_sz], &geom, &mut cols);
            let dst = &mut out[t * out_sz..(t + 1) * out_sz];
            if let Some(bv) = &bias_val {
                for o in 0..c_out {
                    dst[o * ncol..(o + 1) * ncol].fill(bv.data()[o]);
                }
            }
            kernels::gemm_nn(wt.data(), &cols, dst, c_out, krows, ncol);
        }
        let (idx, idw) = (self.id, w.id);
        let idb = bias.map(|b| b.id);
        let mut parents = vec![idx, idw];
        parents.extend(idb);
        self.graph.push(
            "conv2d",
            Tensor::new(&[batch, c_out, oh, ow], out)?,
            &parents,
            move |g, sink| {
                let mut cols = vec![0.0; krows * ncol];
                let mut dcols = vec![0.0; krows * ncol];
                let need_x = sink.slot(idx).is_some();
                let need_w = sink.slot(idw).is_some();
                for t in 0..batch {
                    let gt = &g[t * out_sz..(t + 1) * out_sz];
                    if need_w {
                        kernels::im2col(&x.data()[t * in_sz..(t + 1) * in_sz], &geom, &mut cols);
                        let dw = sink.slot(idw).unwrap();
                        kernels::gemm_nt(gt, &cols, dw, c_out, ncol, krows);
                    }
                    if need_x {
                        dcols.fill(0.0);
                        kernels::gemm_tn(wt.data(), gt, &mut dcols, krows, c_out, ncol);
                        let dx = sink.slot(idx).unwrap();
                        kernels::col2im(&dcols, &geom, &mut dx[t * in_sz..(t + 1) * in_sz]);
                    }
                }
                if let Some(idb) = idb {
                    if let Some(db) = sink.slot(idb) {
                        for t in 0..batch {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = t * out_sz + o * ncol;
                                *d += g[base..base + ncol].iter().sum::<f64>();
                            }
                        }
                    }
                }
            },
        )
    }

    /// Nearest-neighbour 2× upsampling of `(B, C, H, W)`.
    pub fn upsample2x(&self) -> Result<Var<'g>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample2x", format!("{s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = x.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let id = self.id;
        self.graph.push("upsample2x", Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?, &[id], move |g, sink| {
            if let Some(d) = sink.slot(id) {
                for p in 0..planes {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
            }
        })
    }

    /// Mean over the spatial axes of `(B, C, H, W)`, giving `(B, C)`.
    pub fn global_avg_pool(&self) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        self.reshape(&[s[0] * s[1], s[2] * s[3]])?
            .sum_axis(1)?
            .scale(1.0 / (s[2] * s[3]) as f64)?
            .reshape(&[s[0], s[1]])
    }

    /// Per-channel normalization with batch statistics (biased variance) and
    /// affine `gamma`, `beta`. Works on `(B, C)` or `(B, C, H, W)`.
    pub fn batch_norm(&self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 2 && s.len() != 4 {
            return Err(Error::shape("batch_norm", format!("{s:?}")));
        }
        let (batch, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("batch_norm", format!("affine params for {c} channels")));
        }
        let count = (batch * spatial) as f64;
        let at = move |t: usize, ch: usize, p: usize| (t * c + ch) * spatial + p;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let mut mean = 0.0;
            for t in 0..batch {
                for p in 0..spatial {
                    mean += x.data()[at(t, ch, p)];
                }
            }
            mean /= count;
            let mut var = 0.0;
            for t in 0..batch {
                for p in 0..spatial {
                    let d = x.data()[at(t, ch, p)] - mean;
                    var += d * d;
                }
            }
            var /= count;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for t in 0..batch {
                for p in 0..spatial {
                    let i = at(t, ch, p);
                    xhat[i] = (x.data()[i] - mean) * is;
                    out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                }
            }
        }
        let (idx, idg, idb) = (self.id, gamma.id, beta.id);
        self.graph.push("batch_norm", Tensor::new(&s, out)?, &[idx, idg, idb], move |g, sink| {
            if let Some(dg) = sink.slot(idg) {
                for ch in 0..c {
                    for t in 0..batch {
                        for p in 0..spatial {
                            dg[ch] += g[at(t, ch, p)] * xhat[at(t, ch, p)];
                        }
                    }
                }
            }
            if let Some(db) = sink.slot(idb) {
                for ch in 0..c {
                    for t in 0..batch {
                        for p in 0..spatial {
                            db[ch] += g[at(t, ch, p)];
                        }
                    }
                }
            }
            if let Some(dx) = sink.slot(idx) {
                for ch in 0..c {
                    let gam = gv.data()[ch];
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for t in 0..batch {
                        for p in 0..spatial {
                            let i = at(t, ch, p);
                            let d = g[i] * gam;
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                    }
                    for t in 0..batch {
                        for p in 0..spatial {
                            let i = at(t, ch, p);
                            let d = g[i] * gam;
                            dx[i] += inv_std[ch] * (d - sum_d / count - xhat[i] * sum_dx / count);
                        }
                    }
                }
            }
        })
    }

    /// Mean binary cross-entropy of `sigmoid(self)` against `targets`.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Var<'g>> {
        let x = self.value();
        if x.len() != targets.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits vs {} targets", x.len(), targets.len()),
            ));
        }
        let n = x.len() as f64;
        let loss: f64 = x
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let targets = targets.to_vec();
        let id = self.id;
        self.graph.push("bce_with_logits", Tensor::scalar(loss), &[id], move |g, sink| {
            if let Some(s) = sink.slot(id) {
                for (i, (&z, &t)) in x.data().iter().zip(&targets).enumerate() {
                    let p = if z >= 0.0 {
                        1.0 / (1.0 + (-z).exp())
                    } else {
                        let e = z.exp();
                        e / (1.0 + e)
                    };
                    s[i] += g[0] * (p - t) / n;
                }
            }
        })
    }
}

fn softmax_lanes(x: &[f64], y: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let m = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[at(l)] - m).exp();
                y[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                y[at(l)] /= total;
            }
        }
    }
}

/// `out += op(x) · op(y)` where `op` optionally transposes; the effective
/// operands are `m×k` and `k×n`.
#[allow(clippy::too_many_arguments)]
fn matmul_into(x: &[f64], tx: bool, y: &[f64], ty: bool, out: &mut [f64], m: usize, k: usize, n: usize) {
    match (tx, ty) {
        (false, false) => kernels::gemm_nn(x, y, out, m, k, n),
        (false, true) => kernels::gemm_nt(x, y, out, m, k, n),
        (true, false) => kernels::gemm_tn(x, y, out, m, k, n),
        (true, true) => {
            let yt = kernels::transpose(y, n, k);
            kernels::gemm_tn(x, &yt, out, m, k, n)
        }
    }
}

/// Plain softmax of a slice, max-subtracted. Errors on non-finite input.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::shape("softmax", "empty input"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerics("softmax", "non-finite input"));
    }
    let mut y = vec![0.0; x.len()];
    softmax_lanes(x, &mut y, 1, x.len(), 1);
    Ok(y)
}
