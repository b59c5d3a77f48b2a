//! Operation tape and reverse-mode gradient propagation.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::array::{axis_strides, dims2, Array};
use crate::error::{Error, Result};

/// Emits a gradient contribution toward one parent node.
pub(super) type Emit<'a> = dyn FnMut(usize, Array) + 'a;
pub(super) type BackFn = Box<dyn Fn(&Array, &mut Emit)>;

struct Node {
    value: Rc<Array>,
    backward: Option<BackFn>,
}

struct GraphInner {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// A computation graph. Values are recorded in creation order; the
/// backward pass walks the same list in reverse, so gradient
/// accumulation is deterministic and each use contributes exactly once.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<GraphInner>,
}

/// Handle to one node of a [`Graph`].
#[derive(Clone)]
pub struct Var {
    pub(super) graph: Graph,
    pub(super) idx: usize,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: &Var) -> Option<&Array> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient of a variable, or a zero array of its shape if the loss
    /// did not depend on it.
    pub fn get_or_zeros(&self, v: &Var) -> Array {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array::zeros(v.value().shape()),
        }
    }
}

impl Graph {
    /// Graph that records backward closures (training mode).
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
                grad_enabled: true,
            }),
        }
    }

    /// Graph that only tracks values; backward is unavailable but
    /// forward passes skip all tape bookkeeping.
    pub fn inference() -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
                grad_enabled: false,
            }),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.grad_enabled
    }

    pub(super) fn push(&self, value: Array, backward: Option<BackFn>) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            backward: if self.inner.grad_enabled {
                backward
            } else {
                None
            },
        });
        Var {
            graph: self.clone(),
            idx,
        }
    }

    /// Introduces an input/parameter node.
    pub fn leaf(&self, value: Array) -> Var {
        self.push(value, None)
    }

    /// Alias for [`Graph::leaf`]; constants simply never have their
    /// gradients read.
    pub fn constant(&self, value: Array) -> Var {
        self.push(value, None)
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse pass from a scalar loss. Gradients of all ancestors are
    /// populated; unrelated nodes stay `None`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if !self.inner.grad_enabled {
            return Err(Error::Contract(
                "backward on an inference graph".to_string(),
            ));
        }
        if !loss.value().is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.value().shape()
            )));
        }
        let nodes = self.inner.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Array::scalar(1.0));
        for i in (0..=loss.idx).rev() {
            if grads[i].is_none() {
                continue;
            }
            let Some(back) = nodes[i].backward.as_ref() else {
                continue;
            };
            let (lo, hi) = grads.split_at_mut(i);
            let g = hi[0].as_ref().expect("checked above");
            back(g, &mut |parent, contrib| {
                debug_assert!(parent < i, "tape order violated");
                match &mut lo[parent] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Ok(Gradients { grads })
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Computes the broadcast output shape for elementwise binary ops:
/// shapes equal, or one operand's shape is a suffix of the other's
/// (replicated along the leading axes).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a[a.len() - b.len()..] == *b {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        return Ok(b.to_vec());
    }
    Err(Error::Dimension {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// Sums `g` over its leading axes down to `shape` (the broadcast
/// adjoint of the smaller operand).
fn reduce_to_shape(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let small: usize = shape.iter().product();
    let reps = g.len() / small;
    let mut out = Array::zeros(shape);
    for r in 0..reps {
        for i in 0..small {
            out.data_mut()[i] += g.data()[r * small + i];
        }
    }
    out
}

fn binary_forward(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = shape.iter().product();
    let an = a.len();
    let bn = b.len();
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(f(a.data()[i % an], b.data()[i % bn]));
    }
    Array::new(shape, data)
}

impl Var {
    pub fn value(&self) -> Rc<Array> {
        self.graph.inner.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    fn check_same_graph(&self, other: &Var, op: &'static str) -> Result<()> {
        if !self.graph.same_graph(&other.graph) {
            return Err(Error::Contract(format!("{op}: operands from different graphs")));
        }
        Ok(())
    }

    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        // d out / d x as a function of x
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Var {
        let x = self.value();
        let out = x.map(&f);
        let idx = self.idx;
        self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                let mut contrib = g.clone();
                for (c, &xv) in contrib.data_mut().iter_mut().zip(x.data()) {
                    *c *= df(xv);
                }
                emit(idx, contrib);
            })),
        )
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        // elementwise ∂out/∂a and ∂out/∂b as functions of (a, b)
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        self.check_same_graph(other, op)?;
        let a = self.value();
        let b = other.value();
        let out = binary_forward(op, &a, &b, f)?;
        let (ai, bi) = (self.idx, other.idx);
        let out_shape = out.shape().to_vec();
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                let an = a.len();
                let bn = b.len();
                let mut ga = Array::zeros(&out_shape);
                let mut gb = Array::zeros(&out_shape);
                for i in 0..g.len() {
                    let (av, bv) = (a.data()[i % an], b.data()[i % bn]);
                    ga.data_mut()[i] = g.data()[i] * dfa(av, bv);
                    gb.data_mut()[i] = g.data()[i] * dfb(av, bv);
                }
                emit(ai, reduce_to_shape(&ga, a.shape()));
                emit(bi, reduce_to_shape(&gb, b.shape()));
            })),
        ))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, |_| -1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x + c, |_| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x * c, move |_| c)
    }

    pub fn exp(&self) -> Var {
        self.unary(|x| x.exp(), |x| x.exp())
    }

    pub fn relu(&self) -> Var {
        self.unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&self) -> Var {
        self.unary(gelu_fwd, gelu_dfdx)
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Var {
        self.unary(
            |x| x * sigmoid(x),
            |x| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    /// ln(1 + e^x), stable form.
    pub fn softplus(&self) -> Var {
        self.unary(softplus_fwd, sigmoid)
    }

    /// Elementwise product with a scalar node (shape [1]).
    pub fn scale_by(&self, s: &Var) -> Result<Var> {
        self.check_same_graph(s, "scale_by")?;
        let sv = s.value();
        if !sv.is_scalar() {
            return Err(Error::Contract(format!(
                "scale_by expects a scalar, got shape {:?}",
                sv.shape()
            )));
        }
        let x = self.value();
        let c = sv.scalar_value();
        let out = x.map(|v| v * c);
        let (xi, si) = (self.idx, s.idx);
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                let mut gx = g.clone();
                gx.scale_in_place(c);
                emit(xi, gx);
                let ds: f64 = g.data().iter().zip(x.data()).map(|(gv, xv)| gv * xv).sum();
                emit(si, Array::scalar(ds));
            })),
        ))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_same_graph(other, "matmul")?;
        let a = self.value();
        let b = other.value();
        let out = a.matmul_plain(&b)?;
        let (ai, bi) = (self.idx, other.idx);
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                // dA = G * B^T ; dB = A^T * G
                let bt = transpose_plain(&b);
                let at = transpose_plain(&a);
                emit(ai, g.matmul_plain(&bt).expect("shape fixed by forward"));
                emit(bi, at.matmul_plain(g).expect("shape fixed by forward"));
            })),
        ))
    }

    pub fn transpose(&self) -> Result<Var> {
        dims2(&self.value())?;
        let x = self.value();
        let out = transpose_plain(&x);
        let idx = self.idx;
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                emit(idx, transpose_plain(g));
            })),
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let x = self.value();
        let out = x.softmax_axis(axis)?;
        let s = Rc::new(out.clone());
        let idx = self.idx;
        let strides = axis_strides(x.shape(), axis)?;
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                // ds = s ⊙ (g − Σ_axis g⊙s)
                let (outer, extent, inner) = strides;
                let mut contrib = Array::zeros(s.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let mut dot = 0.0;
                        for e in 0..extent {
                            let k = base + e * inner;
                            dot += g.data()[k] * s.data()[k];
                        }
                        for e in 0..extent {
                            let k = base + e * inner;
                            contrib.data_mut()[k] = s.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                emit(idx, contrib);
            })),
        ))
    }

    /// Numerically stable log(softmax(x)) along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Var> {
        let x = self.value();
        let (outer, extent, inner) = axis_strides(x.shape(), axis)?;
        let mut out = Array::zeros(x.shape());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * extent * inner + i;
                let mut max = f64::NEG_INFINITY;
                for e in 0..extent {
                    max = max.max(x.data()[base + e * inner]);
                }
                let mut sum = 0.0;
                for e in 0..extent {
                    sum += (x.data()[base + e * inner] - max).exp();
                }
                let lse = max + sum.ln();
                for e in 0..extent {
                    let k = base + e * inner;
                    out.data_mut()[k] = x.data()[k] - lse;
                }
            }
        }
        let soft = Rc::new(out.map(|v| v.exp()));
        let idx = self.idx;
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                // dx = g − softmax ⊙ Σ_axis g
                let mut contrib = Array::zeros(soft.shape());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * extent * inner + i;
                        let mut gsum = 0.0;
                        for e in 0..extent {
                            gsum += g.data()[base + e * inner];
                        }
                        for e in 0..extent {
                            let k = base + e * inner;
                            contrib.data_mut()[k] = g.data()[k] - soft.data()[k] * gsum;
                        }
                    }
                }
                emit(idx, contrib);
            })),
        ))
    }

    /// Layer normalization along the last axis, variance epsilon 1e-5,
    /// then affine with `gain` and `bias` (shape = last-axis extent).
    pub fn layernorm(&self, gain: &Var, bias: &Var) -> Result<Var> {
        self.check_same_graph(gain, "layernorm")?;
        self.check_same_graph(bias, "layernorm")?;
        const EPS: f64 = 1e-5;
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| {
            Error::Contract("layernorm on zero-rank array".to_string())
        })?;
        if d < 2 {
            return Err(Error::Contract(format!(
                "layernorm axis extent must be >= 2, got {d}"
            )));
        }
        let gv = gain.value();
        let bv = bias.value();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: x.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = x.len() / d;
        let mut xhat = Array::zeros(x.shape());
        let mut rstd = vec![0.0; rows];
        let mut out = Array::zeros(x.shape());
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat.data_mut()[r * d + j] = xh;
                out.data_mut()[r * d + j] = gv.data()[j] * xh + bv.data()[j];
            }
        }
        let xhat = Rc::new(xhat);
        let (xi, gi, bi) = (self.idx, gain.idx, bias.idx);
        let gshape = gv.shape().to_vec();
        let bshape = bv.shape().to_vec();
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                let mut dx = Array::zeros(xhat.shape());
                let mut dgain = Array::zeros(&gshape);
                let mut dbias = Array::zeros(&bshape);
                for r in 0..rows {
                    let mut m1 = 0.0; // mean of dxhat
                    let mut m2 = 0.0; // mean of dxhat ⊙ xhat
                    for j in 0..d {
                        let k = r * d + j;
                        let dxh = g.data()[k] * gv.data()[j];
                        m1 += dxh;
                        m2 += dxh * xhat.data()[k];
                        dgain.data_mut()[j] += g.data()[k] * xhat.data()[k];
                        dbias.data_mut()[j] += g.data()[k];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let k = r * d + j;
                        let dxh = g.data()[k] * gv.data()[j];
                        dx.data_mut()[k] = rstd[r] * (dxh - m1 - xhat.data()[k] * m2);
                    }
                }
                emit(xi, dx);
                emit(gi, dgain);
                emit(bi, dbias);
            })),
        ))
    }

    pub fn sum_all(&self) -> Var {
        let x = self.value();
        let out = Array::scalar(x.sum());
        let idx = self.idx;
        self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                emit(idx, Array::full(x.shape(), g.scalar_value()));
            })),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Rows `[start, start+len)` of a 2-D array.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let x = self.value();
        let (r, c) = dims2(&x)?;
        if start + len > r {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let out = Array::new(
            vec![len, c],
            x.data()[start * c..(start + len) * c].to_vec(),
        )?;
        let idx = self.idx;
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                let mut full = Array::zeros(&[r, c]);
                full.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                emit(idx, full);
            })),
        ))
    }

    pub fn row(&self, i: usize) -> Result<Var> {
        self.slice_rows(i, 1)
    }

    /// Columns `[start, start+len)` of a 2-D array.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let x = self.value();
        let (r, c) = dims2(&x)?;
        if start + len > c {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {c} cols",
                start + len
            )));
        }
        let mut out = Array::zeros(&[r, len]);
        for i in 0..r {
            for j in 0..len {
                out.set2(i, j, x.at2(i, start + j));
            }
        }
        let idx = self.idx;
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                let mut full = Array::zeros(&[r, c]);
                for i in 0..r {
                    for j in 0..len {
                        full.set2(i, start + j, g.at2(i, j));
                    }
                }
                emit(idx, full);
            })),
        ))
    }

    /// Embedding lookup: rows of a 2-D table; backward scatter-adds.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Var> {
        let t = self.value();
        let (r, c) = dims2(&t)?;
        for &i in indices {
            if i >= r {
                return Err(Error::Capacity(format!(
                    "gather index {i} beyond table rows {r}"
                )));
            }
        }
        let mut out = Array::zeros(&[indices.len(), c]);
        for (k, &i) in indices.iter().enumerate() {
            out.data_mut()[k * c..(k + 1) * c].copy_from_slice(t.row_slice(i));
        }
        let idx = self.idx;
        let indices = indices.to_vec();
        Ok(self.graph.push(
            out,
            Some(Box::new(move |g, emit| {
                let mut full = Array::zeros(&[r, c]);
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        full.data_mut()[i * c + j] += g.data()[k * c + j];
                    }
                }
                emit(idx, full);
            })),
        ))
    }

    /// Training-time dropout: Bernoulli keep-mask with inverted scaling.
    /// The mask is drawn eagerly from `rng`, so a seeded caller is fully
    /// deterministic. `rate = 0` is the identity.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate == 0.0 {
            return Ok(self.clone());
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let x = self.value();
        let scale = 1.0 / (1.0 - rate);
        let mask = Array::new(
            x.shape().to_vec(),
            (0..x.len())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                .collect(),
        )?;
        let m = self.graph.constant(mask);
        self.mul(&m)
    }
}

/// Stacks 2-D pieces vertically. All pieces must share a column count.
pub fn concat_rows(graph: &Graph, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_rows of zero parts".to_string()));
    }
    let c = dims2(&parts[0].value())?.1;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let v = p.value();
        let (r, pc) = dims2(&v)?;
        if pc != c {
            return Err(Error::Dimension {
                op: "concat_rows",
                lhs: parts[0].value().shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        rows += r;
        data.extend_from_slice(v.data());
    }
    let out = Array::new(vec![rows, c], data)?;
    let idxs: Vec<(usize, usize)> = parts
        .iter()
        .map(|p| (p.idx, p.value().shape()[0]))
        .collect();
    Ok(graph.push(
        out,
        Some(Box::new(move |g, emit| {
            let mut row0 = 0;
            for &(idx, r) in &idxs {
                let piece = Array::new(
                    vec![r, c],
                    g.data()[row0 * c..(row0 + r) * c].to_vec(),
                )
                .expect("split of valid grad");
                emit(idx, piece);
                row0 += r;
            }
        })),
    ))
}

/// Concatenates 2-D pieces horizontally. All pieces must share a row count.
pub fn concat_cols(graph: &Graph, parts: &[Var]) -> Result<Var> {
    if parts.is_empty() {
        return Err(Error::Contract("concat_cols of zero parts".to_string()));
    }
    let r = dims2(&parts[0].value())?.0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (pr, pc) = dims2(&p.value())?;
        if pr != r {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: parts[0].value().shape().to_vec(),
                rhs: p.value().shape().to_vec(),
            });
        }
        widths.push(pc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Array::zeros(&[r, total]);
    let mut col0 = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let v = p.value();
        for i in 0..r {
            for j in 0..w {
                out.set2(i, col0 + j, v.at2(i, j));
            }
        }
        col0 += w;
    }
    let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    Ok(graph.push(
        out,
        Some(Box::new(move |g, emit| {
            let mut col0 = 0;
            for (&idx, &w) in idxs.iter().zip(&widths) {
                let mut piece = Array::zeros(&[r, w]);
                for i in 0..r {
                    for j in 0..w {
                        piece.set2(i, j, g.at2(i, col0 + j));
                    }
                }
                emit(idx, piece);
                col0 += w;
            }
        })),
    ))
}

pub(crate) fn transpose_plain(a: &Array) -> Array {
    let r = a.shape()[0];
    let c = a.shape()[1];
    let mut out = Array::zeros(&[c, r]);
    for i in 0..r {
        for j in 0..c {
            out.set2(j, i, a.at2(i, j));
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_fwd(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_dfdx(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let g = Graph::new();
        let a = g.leaf(Array::from_vec(vec![1.0, 2.0]));
        let b = g.leaf(Array::from_vec(vec![3.0, 4.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn exp_at_zero() {
        let g = Graph::new();
        let a = g.leaf(Array::from_vec(vec![0.0]));
        assert_eq!(a.exp().value().data(), &[1.0]);
    }

    #[test]
    fn gelu_at_zero() {
        let g = Graph::new();
        let a = g.leaf(Array::from_vec(vec![0.0]));
        assert_eq!(a.gelu().value().data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(Array::zeros(&[2, 3]));
        let b = g.leaf(Array::zeros(&[4]));
        let err = a.add(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn broadcast_bias_add() {
        let g = Graph::new();
        let a = g.leaf(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Array::from_vec(vec![10.0, 20.0]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().data(), &[11.0, 22.0, 13.0, 24.0]);
        // gradient of the broadcast operand sums over leading axes
        let loss = c.sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn square_gradient() {
        let g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![3.0]));
        let y = x.mul(&x).unwrap();
        let grads = g.backward(&y).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_sum_is_constant_so_grad_is_zero() {
        let g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![0.3, -1.2, 2.0]));
        let loss = x.softmax(0).unwrap().sum_all();
        let grads = g.backward(&loss).unwrap();
        for &v in grads.get(&x).unwrap().data() {
            assert!(v.abs() < 1e-12, "grad {v}");
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![5.0, 5.0, 5.0]));
        let gain = g.leaf(Array::from_vec(vec![1.0, 1.0, 1.0]));
        let bias = g.leaf(Array::from_vec(vec![0.0, 0.0, 0.0]));
        let y = x.layernorm(&gain, &bias).unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layernorm_already_normalized() {
        let g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![1.0, -1.0]));
        let gain = g.leaf(Array::from_vec(vec![1.0, 1.0]));
        let bias = g.leaf(Array::from_vec(vec![0.0, 0.0]));
        let y = x.layernorm(&gain, &bias).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-2);
        assert!((y.value().data()[1] + 1.0).abs() < 1e-2);
    }

    #[test]
    fn layernorm_statistics() {
        let g = Graph::new();
        let vals = vec![0.3, -1.7, 2.4, 0.9, -0.2, 1.1, 0.05, -2.2];
        let d = vals.len();
        let x = g.leaf(Array::from_vec(vals));
        let gain = g.leaf(Array::full(&[d], 1.0));
        let bias = g.leaf(Array::zeros(&[d]));
        let y = x.layernorm(&gain, &bias).unwrap();
        let out = y.value();
        let mean = out.sum() / d as f64;
        let var = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-7, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-3, "std {}", var.sqrt());
    }

    #[test]
    fn backward_requires_scalar() {
        let g = Graph::new();
        let x = g.leaf(Array::from_vec(vec![1.0, 2.0]));
        let y = x.mul_scalar(2.0);
        assert!(matches!(g.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let g = Graph::new();
            let w = g.leaf(Array::new(vec![3, 2], vec![0.3, -0.9, 1.1, 0.2, -0.5, 0.8]).unwrap());
            let x = g.leaf(Array::new(vec![1, 3], vec![0.1, 0.7, -0.4]).unwrap());
            let y = x.matmul(&w).unwrap().gelu().sum_all();
            let grads = g.backward(&y).unwrap();
            grads.get(&w).unwrap().data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical gradients");
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let g = Graph::new();
        let t = g.leaf(Array::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = t.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(picked.value().data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = picked.sum_all();
        let grads = g.backward(&loss).unwrap();
        // row 1 used twice, row 0 once, row 2 never
        assert_eq!(grads.get(&t).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_rows_roundtrip_grad() {
        let g = Graph::new();
        let a = g.leaf(Array::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Array::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = concat_rows(&g, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.value().shape(), &[3, 2]);
        let loss = c.mul_scalar(2.0).sum_all();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(grads.get(&b).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_cols_order() {
        let g = Graph::new();
        let a = g.leaf(Array::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.leaf(Array::new(vec![1, 1], vec![9.0]).unwrap());
        let c = concat_cols(&g, &[a, b]).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 9.0]);
    }

    #[test]
    fn inference_graph_rejects_backward() {
        let g = Graph::inference();
        let x = g.leaf(Array::scalar(2.0));
        let y = x.mul(&x).unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        assert!(g.backward(&y).is_err());
    }
}
