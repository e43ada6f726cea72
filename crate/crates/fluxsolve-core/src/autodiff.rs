//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! the computed value and the indices of its inputs. [`Tape::backward`]
//! replays the records once in reverse construction order (which is a
//! topological order by construction), accumulating adjoints only into nodes
//! reachable from the loss. Tapes are single-use: after a backward pass the
//! tape refuses further work, so stale handles fail loudly instead of
//! silently mixing passes.
//!
//! The op set is exactly what the flux-network forward pass needs: linear
//! maps, broadcast arithmetic, `tanh`, row norms, feature concatenation,
//! row gather/scatter and full reduction. Scatter accumulates in a fixed
//! order (sorted by target row, then source position) so results are
//! bit-reproducible. Every op checks its output for non-finite entries and
//! reports the originating op and row on failure.

use std::cell::RefCell;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// `(rows, cols)` of a tape value.
pub type Shape = (usize, usize);

/// Errors raised while recording or differentiating a pass.
#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: produced a non-finite value at row {row}")]
    NonFinite { op: &'static str, row: usize },
    #[error("{op}: index {index} out of bounds for {rows} rows")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("division by zero scalar")]
    DivisionByZero,
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NonScalarLoss(Shape),
    #[error("{op}: tensors must be non-empty")]
    Empty { op: &'static str },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScalarMul(usize, f64),
    Linear { w: usize, x: usize },
    Tanh(usize),
    L2NormRows(usize),
    ConcatFeatures(Vec<usize>),
    GatherRows { x: usize, idx: Vec<usize> },
    ScatterAddRows { x: usize, idx: Vec<usize> },
    SumAll(usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Recording context for one forward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, if `v` needed one and was reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

fn first_bad_row(a: &Array2<f64>) -> Option<usize> {
    for (r, row) in a.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Some(r);
        }
    }
    None
}

fn check_finite(op: &'static str, a: &Array2<f64>) -> Result<(), TapeError> {
    match first_bad_row(a) {
        Some(row) => Err(TapeError::NonFinite { op, row }),
        None => Ok(()),
    }
}

/// Output shape of a broadcast binary op: each axis must match or be 1.
fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape, TapeError> {
    let rows = match (a.0, b.0) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        _ => return Err(TapeError::ShapeMismatch { op, lhs: a, rhs: b }),
    };
    let cols = match (a.1, b.1) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        _ => return Err(TapeError::ShapeMismatch { op, lhs: a, rhs: b }),
    };
    Ok((rows, cols))
}

fn broadcast_get(a: &Array2<f64>, i: usize, j: usize) -> f64 {
    let (r, c) = a.dim();
    a[[if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j }]]
}

fn broadcast_zip(
    op: &'static str,
    a: &Array2<f64>,
    b: &Array2<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array2<f64>, TapeError> {
    let (rows, cols) = broadcast_shape(op, a.dim(), b.dim())?;
    Ok(Array2::from_shape_fn((rows, cols), |(i, j)| {
        f(broadcast_get(a, i, j), broadcast_get(b, i, j))
    }))
}

/// Sums `g` down to `shape` over any axis that was broadcast up.
fn reduce_to(g: &Array2<f64>, shape: Shape) -> Array2<f64> {
    let mut out = Array2::zeros(shape);
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let ti = if shape.0 == 1 { 0 } else { i };
            let tj = if shape.1 == 1 { 0 } else { j };
            out[[ti, tj]] += g[[i, j]];
        }
    }
    out
}

/// Accumulation order for scatter: by target row, then source position.
fn scatter_order(idx: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..idx.len()).collect();
    order.sort_by_key(|&k| (idx[k], k));
    order
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Result<Var, TapeError> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TapeError::TapeConsumed);
        }
        inner.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            id: inner.nodes.len() - 1,
        })
    }

    fn unary<F>(&self, op: &'static str, a: Var, f: F) -> Result<Var, TapeError>
    where
        F: FnOnce(&Array2<f64>) -> Result<(Array2<f64>, Op), TapeError>,
    {
        let (value, rec, needs) = {
            let inner = self.inner.borrow();
            if inner.consumed {
                return Err(TapeError::TapeConsumed);
            }
            let node = &inner.nodes[a.id];
            let (value, rec) = f(&node.value)?;
            (value, rec, node.needs_grad)
        };
        check_finite(op, &value)?;
        self.push(value, rec, needs)
    }

    fn binary<F>(&self, op: &'static str, a: Var, b: Var, f: F) -> Result<Var, TapeError>
    where
        F: FnOnce(&Array2<f64>, &Array2<f64>) -> Result<(Array2<f64>, Op), TapeError>,
    {
        let (value, rec, needs) = {
            let inner = self.inner.borrow();
            if inner.consumed {
                return Err(TapeError::TapeConsumed);
            }
            let na = &inner.nodes[a.id];
            let nb = &inner.nodes[b.id];
            let (value, rec) = f(&na.value, &nb.value)?;
            (value, rec, na.needs_grad || nb.needs_grad)
        };
        check_finite(op, &value)?;
        self.push(value, rec, needs)
    }

    /// Records an untracked value (no gradient).
    pub fn constant(&self, value: Array2<f64>) -> Result<Var, TapeError> {
        if value.is_empty() {
            return Err(TapeError::Empty { op: "constant" });
        }
        check_finite("constant", &value)?;
        self.push(value, Op::Constant, false)
    }

    /// Records a 1×1 untracked scalar.
    pub fn constant_scalar(&self, v: f64) -> Result<Var, TapeError> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Records a trainable value (gradient accumulated by `backward`).
    pub fn leaf(&self, value: Array2<f64>) -> Result<Var, TapeError> {
        if value.is_empty() {
            return Err(TapeError::Empty { op: "leaf" });
        }
        check_finite("leaf", &value)?;
        self.push(value, Op::Leaf, true)
    }

    /// Copy of the value held by `v`.
    pub fn value(&self, v: Var) -> Array2<f64> {
        self.inner.borrow().nodes[v.id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.inner.borrow().nodes[v.id].value.dim()
    }

    /// Elementwise sum with broadcasting (axes match or are 1).
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("add", a, b, |x, y| {
            Ok((
                broadcast_zip("add", x, y, |p, q| p + q)?,
                Op::Add(a.id, b.id),
            ))
        })
    }

    /// Elementwise difference with broadcasting.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("sub", a, b, |x, y| {
            Ok((
                broadcast_zip("sub", x, y, |p, q| p - q)?,
                Op::Sub(a.id, b.id),
            ))
        })
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("mul", a, b, |x, y| {
            Ok((
                broadcast_zip("mul", x, y, |p, q| p * q)?,
                Op::Mul(a.id, b.id),
            ))
        })
    }

    /// Elementwise quotient with broadcasting; zero anywhere in the divisor
    /// is an error.
    pub fn div(&self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.binary("div", a, b, |x, y| {
            if y.iter().any(|v| *v == 0.0) {
                return Err(TapeError::DivisionByZero);
            }
            Ok((
                broadcast_zip("div", x, y, |p, q| p / q)?,
                Op::Div(a.id, b.id),
            ))
        })
    }

    /// Product with an untracked scalar constant.
    pub fn scalar_mul(&self, a: Var, k: f64) -> Result<Var, TapeError> {
        self.unary("scalar_mul", a, |x| {
            Ok((x.mapv(|v| v * k), Op::ScalarMul(a.id, k)))
        })
    }

    /// Row-wise linear map `x · wᵀ` (`x`: rows×in, `w`: out×in → rows×out).
    pub fn linear(&self, w: Var, x: Var) -> Result<Var, TapeError> {
        self.binary("linear", w, x, |wv, xv| {
            if wv.ncols() != xv.ncols() {
                return Err(TapeError::ShapeMismatch {
                    op: "linear",
                    lhs: wv.dim(),
                    rhs: xv.dim(),
                });
            }
            Ok((xv.dot(&wv.t()), Op::Linear { w: w.id, x: x.id }))
        })
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&self, a: Var) -> Result<Var, TapeError> {
        self.unary("tanh", a, |x| Ok((x.mapv(f64::tanh), Op::Tanh(a.id))))
    }

    /// Euclidean norm of each row (rows×k → rows×1). Zero rows get norm 0
    /// and a zero adjoint (the subgradient at the kink).
    pub fn l2_norm_rows(&self, a: Var) -> Result<Var, TapeError> {
        self.unary("l2_norm_rows", a, |x| {
            let mut out = Array2::zeros((x.nrows(), 1));
            for (r, row) in x.rows().into_iter().enumerate() {
                out[[r, 0]] = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            Ok((out, Op::L2NormRows(a.id)))
        })
    }

    /// Column-wise concatenation of equal-row tensors. A single part is
    /// returned unchanged.
    pub fn concat_features(&self, parts: &[Var]) -> Result<Var, TapeError> {
        let Some((&first, rest)) = parts.split_first() else {
            return Err(TapeError::Empty {
                op: "concat_features",
            });
        };
        if rest.is_empty() {
            return Ok(first);
        }
        let (value, needs) = {
            let inner = self.inner.borrow();
            if inner.consumed {
                return Err(TapeError::TapeConsumed);
            }
            let rows = inner.nodes[first.id].value.nrows();
            let mut cols = 0;
            for p in parts {
                let v = &inner.nodes[p.id].value;
                if v.nrows() != rows {
                    return Err(TapeError::ShapeMismatch {
                        op: "concat_features",
                        lhs: (rows, cols),
                        rhs: v.dim(),
                    });
                }
                cols += v.ncols();
            }
            let mut out = Array2::zeros((rows, cols));
            let mut offset = 0;
            for p in parts {
                let v = &inner.nodes[p.id].value;
                out.slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                    .assign(v);
                offset += v.ncols();
            }
            let needs = parts.iter().any(|p| inner.nodes[p.id].needs_grad);
            (out, needs)
        };
        check_finite("concat_features", &value)?;
        self.push(
            value,
            Op::ConcatFeatures(parts.iter().map(|p| p.id).collect()),
            needs,
        )
    }

    /// Row lookup: output row `k` is input row `idx[k]`.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var, TapeError> {
        self.unary("gather_rows", a, |x| {
            let mut out = Array2::zeros((idx.len(), x.ncols()));
            for (k, &i) in idx.iter().enumerate() {
                if i >= x.nrows() {
                    return Err(TapeError::IndexOutOfBounds {
                        op: "gather_rows",
                        index: i,
                        rows: x.nrows(),
                    });
                }
                out.row_mut(k).assign(&x.row(i));
            }
            Ok((
                out,
                Op::GatherRows {
                    x: a.id,
                    idx: idx.to_vec(),
                },
            ))
        })
    }

    /// Row scatter-accumulate: input row `k` is added into output row
    /// `idx[k]` of a fresh `out_rows`-row tensor, in a fixed order.
    pub fn scatter_add_rows(
        &self,
        a: Var,
        idx: &[usize],
        out_rows: usize,
    ) -> Result<Var, TapeError> {
        self.unary("scatter_add_rows", a, |x| {
            if idx.len() != x.nrows() {
                return Err(TapeError::ShapeMismatch {
                    op: "scatter_add_rows",
                    lhs: (idx.len(), 1),
                    rhs: x.dim(),
                });
            }
            let mut out = Array2::zeros((out_rows, x.ncols()));
            for k in scatter_order(idx) {
                let target = idx[k];
                if target >= out_rows {
                    return Err(TapeError::IndexOutOfBounds {
                        op: "scatter_add_rows",
                        index: target,
                        rows: out_rows,
                    });
                }
                let src = x.row(k);
                let mut dst = out.row_mut(target);
                dst += &src;
            }
            Ok((
                out,
                Op::ScatterAddRows {
                    x: a.id,
                    idx: idx.to_vec(),
                },
            ))
        })
    }

    /// Sum of every entry, as a 1×1 scalar.
    pub fn sum_all(&self, a: Var) -> Result<Var, TapeError> {
        self.unary("sum_all", a, |x| {
            Ok((Array2::from_elem((1, 1), x.sum()), Op::SumAll(a.id)))
        })
    }

    /// Runs the reverse pass from a scalar `loss`, consuming the tape.
    ///
    /// Visits each node at most once, in reverse construction order, and
    /// skips nodes unreachable from the loss. A second call (or any further
    /// op) fails with [`TapeError::TapeConsumed`].
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TapeError::TapeConsumed);
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let shape = nodes[loss.id].value.dim();
        if shape != (1, 1) {
            return Err(TapeError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Array2::ones((1, 1)));

        let add_into = |slot: &mut Option<Array2<f64>>, g: Array2<f64>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };

        for id in (0..nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g); // keep for the caller
                }
                Op::Add(a, b) => {
                    if nodes[*a].needs_grad {
                        add_into(&mut grads[*a], reduce_to(&g, nodes[*a].value.dim()));
                    }
                    if nodes[*b].needs_grad {
                        add_into(&mut grads[*b], reduce_to(&g, nodes[*b].value.dim()));
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].needs_grad {
                        add_into(&mut grads[*a], reduce_to(&g, nodes[*a].value.dim()));
                    }
                    if nodes[*b].needs_grad {
                        add_into(
                            &mut grads[*b],
                            reduce_to(&g.mapv(|v| -v), nodes[*b].value.dim()),
                        );
                    }
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].needs_grad {
                        let full = Array2::from_shape_fn(g.dim(), |(i, j)| {
                            g[[i, j]] * broadcast_get(bv, i, j)
                        });
                        add_into(&mut grads[*a], reduce_to(&full, av.dim()));
                    }
                    if nodes[*b].needs_grad {
                        let full = Array2::from_shape_fn(g.dim(), |(i, j)| {
                            g[[i, j]] * broadcast_get(av, i, j)
                        });
                        add_into(&mut grads[*b], reduce_to(&full, bv.dim()));
                    }
                }
                Op::Div(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].needs_grad {
                        let full = Array2::from_shape_fn(g.dim(), |(i, j)| {
                            g[[i, j]] / broadcast_get(bv, i, j)
                        });
                        add_into(&mut grads[*a], reduce_to(&full, av.dim()));
                    }
                    if nodes[*b].needs_grad {
                        let full = Array2::from_shape_fn(g.dim(), |(i, j)| {
                            let q = broadcast_get(bv, i, j);
                            -g[[i, j]] * broadcast_get(av, i, j) / (q * q)
                        });
                        add_into(&mut grads[*b], reduce_to(&full, bv.dim()));
                    }
                }
                Op::ScalarMul(a, k) => {
                    if nodes[*a].needs_grad {
                        add_into(&mut grads[*a], g.mapv(|v| v * k));
                    }
                }
                Op::Linear { w, x } => {
                    let wv = &nodes[*w].value;
                    let xv = &nodes[*x].value;
                    if nodes[*x].needs_grad {
                        add_into(&mut grads[*x], g.dot(wv));
                    }
                    if nodes[*w].needs_grad {
                        add_into(&mut grads[*w], g.t().dot(xv));
                    }
                }
                Op::Tanh(a) => {
                    if nodes[*a].needs_grad {
                        let y = &node.value;
                        let da = Array2::from_shape_fn(g.dim(), |(i, j)| {
                            g[[i, j]] * (1.0 - y[[i, j]] * y[[i, j]])
                        });
                        add_into(&mut grads[*a], da);
                    }
                }
                Op::L2NormRows(a) => {
                    if nodes[*a].needs_grad {
                        let x = &nodes[*a].value;
                        let y = &node.value;
                        let mut da = Array2::zeros(x.dim());
                        for i in 0..x.nrows() {
                            let n = y[[i, 0]];
                            if n > 0.0 {
                                let gi = g[[i, 0]];
                                for j in 0..x.ncols() {
                                    da[[i, j]] = gi * x[[i, j]] / n;
                                }
                            }
                        }
                        add_into(&mut grads[*a], da);
                    }
                }
                Op::ConcatFeatures(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        if nodes[p].needs_grad {
                            let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                            add_into(&mut grads[p], slice);
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { x, idx } => {
                    if nodes[*x].needs_grad {
                        let mut da = Array2::zeros(nodes[*x].value.dim());
                        for k in scatter_order(idx) {
                            let mut dst = da.row_mut(idx[k]);
                            dst += &g.row(k);
                        }
                        add_into(&mut grads[*x], da);
                    }
                }
                Op::ScatterAddRows { x, idx } => {
                    if nodes[*x].needs_grad {
                        let mut da = Array2::zeros(nodes[*x].value.dim());
                        for (k, &i) in idx.iter().enumerate() {
                            da.row_mut(k).assign(&g.row(i));
                        }
                        add_into(&mut grads[*x], da);
                    }
                }
                Op::SumAll(a) => {
                    if nodes[*a].needs_grad {
                        let da = Array2::from_elem(nodes[*a].value.dim(), g[[0, 0]]);
                        add_into(&mut grads[*a], da);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Errors from optimizer application.
#[derive(Debug, Error)]
pub enum OptimError {
    #[error("expected {expected} parameters, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("parameter {index}: shape {got:?} does not match optimizer state {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Shape,
        got: Shape,
    },
}

/// Adam with bias correction, tracking first and second moments per
/// parameter tensor. Fully deterministic: state depends only on the
/// sequence of gradients.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Shape]) -> Adam {
        Adam {
            cfg,
            step: 0,
            moments: shapes
                .iter()
                .map(|&s| (Array2::zeros(s), Array2::zeros(s)))
                .collect(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Applies one update. Parameters without a gradient this step (`None`)
    /// are treated as having zero gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Option<&Array2<f64>>],
    ) -> Result<(), OptimError> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(OptimError::CountMismatch {
                expected: self.moments.len(),
                got: params.len().max(grads.len()),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, ((p, g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.moments)
            .enumerate()
        {
            if let Some(g) = g {
                if g.dim() != p.dim() {
                    return Err(OptimError::ShapeMismatch {
                        index: i,
                        expected: p.dim(),
                        got: g.dim(),
                    });
                }
            }
            if m.dim() != p.dim() {
                return Err(OptimError::ShapeMismatch {
                    index: i,
                    expected: m.dim(),
                    got: p.dim(),
                });
            }
            let gbuf = match g {
                Some(g) => (*g).clone(),
                None => Array2::zeros(p.dim()),
            };
            ndarray::Zip::from(&mut **p)
                .and(m)
                .and(v)
                .and(&gbuf)
                .for_each(|pe, me, ve, &ge| {
                    *me = beta1 * *me + (1.0 - beta1) * ge;
                    *ve = beta2 * *ve + (1.0 - beta2) * ge * ge;
                    let mhat = *me / bc1;
                    let vhat = *ve / bc2;
                    *pe -= lr * mhat / (vhat.sqrt() + epsilon);
                });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Result of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across probes.
    pub max_rel_err: f64,
    pub probes: usize,
    /// Parameter tensor and entry of the worst probe.
    pub worst: (usize, (usize, usize)),
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences at `n_probes` randomly chosen parameter entries.
///
/// Relative error uses `max(|analytic|, |numeric|, floor)` in the
/// denominator so vanishing gradients do not produce spurious ratios.
pub fn grad_check<F>(
    f: F,
    params: &[Array2<f64>],
    n_probes: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&Tape, &[Var]) -> Result<Var, TapeError>,
{
    let eval = |ps: &[Array2<f64>]| -> Result<f64, TapeError> {
        let tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<_, _>>()?;
        let loss = f(&tape, &vars)?;
        let v = tape.value(loss);
        if v.dim() != (1, 1) {
            return Err(TapeError::NonScalarLoss(v.dim()));
        }
        Ok(v[[0, 0]])
    };

    // One reverse pass for the analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<_, _>>()?;
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Array2<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(p.dim()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        probes: n_probes,
        worst: (0, (0, 0)),
    };
    let mut work = params.to_vec();
    for _ in 0..n_probes {
        let p = rng.gen_range(0..params.len());
        let (rows, cols) = params[p].dim();
        let i = rng.gen_range(0..rows);
        let j = rng.gen_range(0..cols);
        let orig = work[p][[i, j]];
        work[p][[i, j]] = orig + step;
        let up = eval(&work)?;
        work[p][[i, j]] = orig - step;
        let down = eval(&work)?;
        work[p][[i, j]] = orig;
        let numeric = (up - down) / (2.0 * step);
        let exact = analytic[p][[i, j]];
        let denom = exact
            .abs()
            .max(numeric.abs())
            .max(crate::tolerances::GRADCHECK_FLOOR);
        let rel = (exact - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (p, (i, j));
        }
    }
    Ok(report)
}

/// Runs the gradient checker over every registered op, each wrapped in a
/// randomized composite loss that keeps its adjoint non-degenerate.
/// Returns `(op name, report)` pairs.
pub fn op_gradcheck_suite(
    n_probes: usize,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheckReport)>, TapeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_arr = |rows: usize, cols: usize| -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    };

    let mut results = Vec::new();
    let step = crate::tolerances::GRADCHECK_STEP;

    // Each case: params plus a closure building a scalar loss around the op.
    // A fixed random weighting (recorded as a constant) keeps adjoints
    // informative over the whole output.
    macro_rules! case {
        ($name:literal, $params:expr, $weight:expr, $body:expr) => {{
            let params: Vec<Array2<f64>> = $params;
            let weight: Array2<f64> = $weight;
            let body = $body;
            let f = |tape: &Tape, vars: &[Var]| -> Result<Var, TapeError> {
                let w = tape.constant(weight.clone())?;
                let out = body(tape, vars)?;
                tape.sum_all(tape.mul(out, w)?)
            };
            let report = grad_check(f, &params, n_probes, step, seed ^ 0x5eed)?;
            results.push(($name, report));
        }};
    }

    case!(
        "add",
        vec![rand_arr(3, 4), rand_arr(1, 4)],
        rand_arr(3, 4),
        |t: &Tape, v: &[Var]| t.add(v[0], v[1])
    );
    case!(
        "sub",
        vec![rand_arr(3, 4), rand_arr(3, 1)],
        rand_arr(3, 4),
        |t: &Tape, v: &[Var]| t.sub(v[0], v[1])
    );
    case!(
        "mul",
        vec![rand_arr(3, 1), rand_arr(1, 4)],
        rand_arr(3, 4),
        |t: &Tape, v: &[Var]| t.mul(v[0], v[1])
    );
    {
        // div: keep the divisor away from zero.
        let mut denom = rand_arr(1, 1);
        denom[[0, 0]] = denom[[0, 0]].abs() + 0.5;
        case!(
            "div",
            vec![rand_arr(3, 4), denom],
            rand_arr(3, 4),
            |t: &Tape, v: &[Var]| t.div(v[0], v[1])
        );
    }
    case!(
        "scalar_mul",
        vec![rand_arr(3, 4)],
        rand_arr(3, 4),
        |t: &Tape, v: &[Var]| t.scalar_mul(v[0], -1.75)
    );
    case!(
        "linear",
        vec![rand_arr(2, 4), rand_arr(3, 4)],
        rand_arr(3, 2),
        |t: &Tape, v: &[Var]| t.linear(v[0], v[1])
    );
    case!(
        "tanh",
        vec![rand_arr(3, 4)],
        rand_arr(3, 4),
        |t: &Tape, v: &[Var]| t.tanh(v[0])
    );
    {
        // l2_norm_rows: keep rows away from the kink at zero.
        let mut x = rand_arr(4, 3);
        for v in x.iter_mut() {
            *v += 2.0 * v.signum();
        }
        case!(
            "l2_norm_rows",
            vec![x],
            rand_arr(4, 1),
            |t: &Tape, v: &[Var]| t.l2_norm_rows(v[0])
        );
    }
    case!(
        "concat_features",
        vec![rand_arr(3, 2), rand_arr(3, 3)],
        rand_arr(3, 5),
        |t: &Tape, v: &[Var]| t.concat_features(&[v[0], v[1]])
    );
    case!(
        "gather_rows",
        vec![rand_arr(3, 4)],
        rand_arr(5, 4),
        |t: &Tape, v: &[Var]| t.gather_rows(v[0], &[2, 0, 1, 0, 2])
    );
    case!(
        "scatter_add_rows",
        vec![rand_arr(4, 3)],
        rand_arr(3, 3),
        |t: &Tape, v: &[Var]| t.scatter_add_rows(v[0], &[1, 0, 1, 2], 3)
    );
    case!(
        "sum_all",
        vec![rand_arr(3, 4)],
        Array2::from_elem((1, 1), 1.0),
        |t: &Tape, v: &[Var]| t.sum_all(v[0])
    );
    Ok(results)
}
