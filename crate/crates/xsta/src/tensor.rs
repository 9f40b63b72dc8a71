//! Dense tensors with reverse-mode automatic differentiation on a tape.
//!
//! Every op records a node on the owning [`Tape`] together with a VJP
//! (vector-Jacobian product) closure. `backward` replays the tape in
//! reverse and accumulates gradients for leaves created via
//! [`Tape::param`]. Gradients accumulate across backward calls until the
//! tape is dropped or `clear_grads` is called.
//!
//! All values are f64. Any op producing NaN/Inf returns an error.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Arguments handed to a VJP closure during the backward sweep.
pub struct VjpCtx<'a> {
    nodes: &'a [Node],
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a [f64],
}

impl<'a> VjpCtx<'a> {
    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }
}

type Vjp = Box<dyn Fn(&VjpCtx) -> Vec<(NodeId, Vec<f64>)>>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    vjp: Option<Vjp>,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// Persistent gradient buffers for `requires_grad` leaves.
    grads: HashMap<NodeId, Vec<f64>>,
    rng: ChaCha8Rng,
    seed: u64,
    /// Values produced by every `detach` call, in call order.
    detach_log: Vec<Vec<f64>>,
    /// When set, `detach` returns these recorded values instead of its
    /// input, holding stop-gradient branches at a reference point. This
    /// makes finite differences of the loss agree with the analytic
    /// gradient, which by construction ignores detached paths.
    detach_replay: Option<Vec<Vec<f64>>>,
    detach_cursor: usize,
}

/// Records op nodes in execution order; owner of all tensor storage.
#[derive(Clone)]
pub struct Tape(Rc<RefCell<TapeInner>>);

#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: NodeId,
    shape: Vec<usize>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape)
            .field("data", &self.data())
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            grads: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            detach_log: Vec::new(),
            detach_replay: None,
            detach_cursor: 0,
        })))
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detach_log(&self) -> Vec<Vec<f64>> {
        self.0.borrow().detach_log.clone()
    }

    /// Like `new`, but each `detach` call returns the next value from
    /// `log` instead of its input. Used by gradient checking to freeze
    /// stop-gradient branches at the point where the analytic gradient
    /// was taken; entries whose length does not match fall through to
    /// the live value.
    pub fn new_replaying_detaches(seed: u64, log: Vec<Vec<f64>>) -> Self {
        let tape = Tape::new(seed);
        tape.0.borrow_mut().detach_replay = Some(log);
        tape
    }

    pub fn seed(&self) -> u64 {
        self.0.borrow().seed
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, vjp: Option<Vjp>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape: shape.clone(),
            data,
            requires_grad,
            vjp,
        });
        Tensor {
            tape: self.clone(),
            id,
            shape,
        }
    }

    fn push_checked(
        &self,
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        vjp: Option<Vjp>,
    ) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(self.push(data, shape, false, vjp))
    }

    /// A constant leaf: participates in the forward pass, never receives gradient.
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "constant: shape/data mismatch");
        self.push(data, shape, false, None)
    }

    /// A trainable leaf: `backward` populates its gradient buffer.
    pub fn param(&self, data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "param: shape/data mismatch");
        self.push(data, shape, true, None)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], vec![1])
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        self.constant(vec![0.0; n], shape)
    }

    pub fn ones(&self, shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        self.constant(vec![1.0; n], shape)
    }

    /// Draws a dropout keep-mask from the tape RNG.
    fn dropout_mask(&self, n: usize, rate: f64) -> Vec<bool> {
        let mut inner = self.0.borrow_mut();
        (0..n).map(|_| inner.rng.gen::<f64>() >= rate).collect()
    }

    pub fn clear_grads(&self) {
        self.0.borrow_mut().grads.clear();
    }

    /// Vertically stack 2-D tensors with equal column counts.
    pub fn concat_rows(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: empty input"));
        }
        let cols = parts[0].dim(1)?;
        let mut data = Vec::new();
        let mut rows = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            if !self.same_tape(&p.tape) {
                return Err(Error::invalid("concat_rows: tensors from different tapes"));
            }
            let (r, c) = p.dims2("concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            spans.push((p.id, rows, r));
            rows += r;
            data.extend_from_slice(&p.data());
        }
        let spans_c = spans.clone();
        self.push_checked(
            "concat_rows",
            data,
            vec![rows, cols],
            Some(Box::new(move |ctx| {
                spans_c
                    .iter()
                    .map(|&(id, row0, r)| {
                        (id, ctx.grad[row0 * cols..(row0 + r) * cols].to_vec())
                    })
                    .collect()
            })),
        )
    }

    /// Horizontally stack 2-D tensors with equal row counts.
    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: empty input"));
        }
        let rows = parts[0].dim(0)?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            if !self.same_tape(&p.tape) {
                return Err(Error::invalid("concat_cols: tensors from different tapes"));
            }
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            widths.push((p.id, total, c));
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        for p in parts {
            let (_, c) = p.dims2("concat_cols")?;
            let col0 = widths.iter().find(|w| w.0 == p.id).unwrap().1;
            let pd = p.data();
            for i in 0..rows {
                data[i * total + col0..i * total + col0 + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
        }
        let widths_c = widths.clone();
        self.push_checked(
            "concat_cols",
            data,
            vec![rows, total],
            Some(Box::new(move |ctx| {
                widths_c
                    .iter()
                    .map(|&(id, col0, c)| {
                        let mut g = vec![0.0; rows * c];
                        for i in 0..rows {
                            g[i * c..(i + 1) * c]
                                .copy_from_slice(&ctx.grad[i * total + col0..i * total + col0 + c]);
                        }
                        (id, g)
                    })
                    .collect()
            })),
        )
    }
}

/// Expand a per-row mask to element granularity for a `[rows, cols]` tensor.
/// `true` marks rows to fill/exclude.
pub fn expand_row_mask(exclude_row: &[bool], cols: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(exclude_row.len() * cols);
    for &m in exclude_row {
        out.extend(std::iter::repeat(m).take(cols));
    }
    out
}

/// Mean over the rows of `x` where `mask` is true -> `[cols]`.
pub fn masked_mean_rows(x: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() != 2 || mask.len() != shape[0] {
        return Err(Error::invalid(format!(
            "masked_mean_rows: shape {:?} vs mask len {}",
            shape,
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::FullyMasked {
            op: "masked_mean_rows",
        });
    }
    let exclude: Vec<bool> = mask.iter().map(|&m| !m).collect();
    x.masked_fill(&expand_row_mask(&exclude, shape[1]), 0.0)?
        .sum_axis(0)?
        .scale(1.0 / count as f64)
}

// Row-major matmul kernels used by forward and backward paths.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let ao = i * k;
        let oo = i * p;
        for l in 0..k {
            let av = a[ao + l];
            if av != 0.0 {
                let bo = l * p;
                for j in 0..p {
                    out[oo + j] += av * b[bo + j];
                }
            }
        }
    }
    out
}

/// a[m,k] * b[p,k]^T -> [m,p]
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let ao = i * k;
        for j in 0..p {
            let bo = j * k;
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[ao + l] * b[bo + l];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

/// a[k,m]^T * b[k,p] -> [m,p]
fn mm_tn(a: &[f64], b: &[f64], k: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for l in 0..k {
        let ao = l * m;
        let bo = l * p;
        for i in 0..m {
            let av = a[ao + i];
            if av != 0.0 {
                let oo = i * p;
                for j in 0..p {
                    out[oo + j] += av * b[bo + j];
                }
            }
        }
    }
    out
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    fn dim(&self, i: usize) -> Result<usize> {
        self.shape
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("tensor has no dim {i}: shape {:?}", self.shape)))
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.0.borrow().nodes[self.id].data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.0.borrow();
        assert_eq!(inner.nodes[self.id].data.len(), 1, "item() on non-scalar");
        inner.nodes[self.id].data[0]
    }

    /// Accumulated gradient of a `param` leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.0.borrow().grads.get(&self.id).cloned()
    }

    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        let x = self.data();
        let y: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let id = self.id;
        self.tape.push_checked(
            op,
            y,
            self.shape.clone(),
            Some(Box::new(move |ctx| {
                let x = ctx.data(id);
                let g: Vec<f64> = ctx
                    .grad
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &xv)| g * df(xv, 0.0))
                    .collect();
                vec![(id, g)]
            })),
        )
    }

    fn binary_same_shape(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        vjp: impl Fn(&[f64], &[f64], &[f64]) -> (Vec<f64>, Vec<f64>) + 'static,
    ) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::invalid(format!("{op}: tensors from different tapes")));
        }
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let a = self.data();
        let b = other.data();
        let y: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &z)| f(x, z)).collect();
        let (ida, idb) = (self.id, other.id);
        self.tape.push_checked(
            op,
            y,
            self.shape.clone(),
            Some(Box::new(move |ctx| {
                let (ga, gb) = vjp(ctx.grad, ctx.data(ida), ctx.data(idb));
                vec![(ida, ga), (idb, gb)]
            })),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "add", |a, b| a + b, |g, _, _| {
            (g.to_vec(), g.to_vec())
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "sub", |a, b| a - b, |g, _, _| {
            (g.to_vec(), g.iter().map(|v| -v).collect())
        })
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "mul", |a, b| a * b, |g, a, b| {
            (
                g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect(),
                g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect(),
            )
        })
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary_same_shape(other, "div", |a, b| a / b, |g, a, b| {
            (
                g.iter().zip(b.iter()).map(|(&g, &b)| g / b).collect(),
                g.iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&g, (&a, &b))| -g * a / (b * b))
                    .collect(),
            )
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary("sqrt", |x| x.sqrt(), |x, _| 0.5 / x.sqrt())
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary("log", |x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary("exp", |x| x.exp(), |x, _| x.exp())
    }

    pub fn recip(&self) -> Result<Tensor> {
        self.unary("recip", |x| 1.0 / x, |x, _| -1.0 / (x * x))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximation GELU; the backward pass differentiates the same
    /// approximation so finite differences agree.
    pub fn gelu(&self) -> Result<Tensor> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        self.unary(
            "gelu",
            |x| {
                let u = C * (x + A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            },
            |x, _| {
                let u = C * (x + A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    /// Pass-through gradient strictly inside (lo, hi), zero outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Result<Tensor> {
        self.unary(
            "clamp_min",
            move |x| x.max(lo),
            move |x, _| if x > lo { 1.0 } else { 0.0 },
        )
    }

    /// Identity forward; contributes zero gradient upstream.
    pub fn detach(&self) -> Tensor {
        let data = {
            let mut inner = self.tape.0.borrow_mut();
            match &inner.detach_replay {
                Some(log) => {
                    let recorded = log
                        .get(inner.detach_cursor)
                        .filter(|v| v.len() == numel(&self.shape))
                        .cloned();
                    inner.detach_cursor += 1;
                    recorded
                }
                None => None,
            }
        };
        let data = match data {
            Some(d) => d,
            None => {
                let d = self.data();
                let mut inner = self.tape.0.borrow_mut();
                if inner.detach_replay.is_none() {
                    inner.detach_log.push(d.clone());
                }
                d
            }
        };
        self.tape.push(data, self.shape.clone(), false, None)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if numel(&shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        let id = self.id;
        let n = self.numel();
        let _ = n;
        self.tape.push_checked(
            "reshape",
            self.data(),
            shape,
            Some(Box::new(move |ctx| vec![(id, ctx.grad.to_vec())])),
        )
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::invalid("matmul: tensors from different tapes"));
        }
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let y = mm_nn(&self.data(), &other.data(), m, k, p);
        let (ida, idb) = (self.id, other.id);
        self.tape.push_checked(
            "matmul",
            y,
            vec![m, p],
            Some(Box::new(move |ctx| {
                let a = ctx.data(ida);
                let b = ctx.data(idb);
                let da = mm_nt(ctx.grad, b, m, p, k); // g[m,p] * b^T -> [m,k]
                let db = mm_tn(a, ctx.grad, m, k, p); // a^T * g -> [k,p]
                vec![(ida, da), (idb, db)]
            })),
        )
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let x = self.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[j * m + i] = x[i * n + j];
            }
        }
        let id = self.id;
        self.tape.push_checked(
            "transpose",
            y,
            vec![n, m],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        g[i * n + j] = ctx.grad[j * m + i];
                    }
                }
                vec![(id, g)]
            })),
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f64 = self.data().iter().sum();
        let id = self.id;
        let n = self.numel();
        self.tape.push_checked(
            "sum_all",
            vec![s],
            vec![1],
            Some(Box::new(move |ctx| vec![(id, vec![ctx.grad[0]; n])])),
        )
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    /// Sum of a 2-D tensor along `axis` (0 -> per-column, 1 -> per-row).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("sum_axis")?;
        let x = self.data();
        let id = self.id;
        match axis {
            0 => {
                let mut y = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        y[j] += x[i * n + j];
                    }
                }
                self.tape.push_checked(
                    "sum_axis0",
                    y,
                    vec![n],
                    Some(Box::new(move |ctx| {
                        let mut g = vec![0.0; m * n];
                        for i in 0..m {
                            g[i * n..(i + 1) * n].copy_from_slice(ctx.grad);
                        }
                        vec![(id, g)]
                    })),
                )
            }
            1 => {
                let mut y = vec![0.0; m];
                for i in 0..m {
                    y[i] = x[i * n..(i + 1) * n].iter().sum();
                }
                self.tape.push_checked(
                    "sum_axis1",
                    y,
                    vec![m],
                    Some(Box::new(move |ctx| {
                        let mut g = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                g[i * n + j] = ctx.grad[i];
                            }
                        }
                        vec![(id, g)]
                    })),
                )
            }
            _ => Err(Error::invalid("sum_axis: axis must be 0 or 1")),
        }
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("mean_axis")?;
        let d = if axis == 0 { m } else { n } as f64;
        self.sum_axis(axis)?.scale(1.0 / d)
    }

    /// Replace entries where `mask[i]` is true with `value`.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::invalid(format!(
                "masked_fill: mask len {} vs numel {}",
                mask.len(),
                self.numel()
            )));
        }
        let x = self.data();
        let y: Vec<f64> = x
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let id = self.id;
        let mask_c = mask.to_vec();
        self.tape.push_checked(
            "masked_fill",
            y,
            self.shape.clone(),
            Some(Box::new(move |ctx| {
                let g: Vec<f64> = ctx
                    .grad
                    .iter()
                    .zip(mask_c.iter())
                    .map(|(&g, &m)| if m { 0.0 } else { g })
                    .collect();
                vec![(id, g)]
            })),
        )
    }

    /// Numerically-stabilized row softmax of a 2-D tensor. `valid[j]` marks
    /// the columns that participate; masked columns come out exactly 0.
    pub fn softmax_rows(&self, valid: Option<&[bool]>) -> Result<Tensor> {
        let (m, n) = self.dims2("softmax_rows")?;
        if let Some(v) = valid {
            if v.len() != n {
                return Err(Error::invalid(format!(
                    "softmax_rows: mask len {} vs cols {n}",
                    v.len()
                )));
            }
            if !v.iter().any(|&b| b) {
                return Err(Error::FullyMasked { op: "softmax_rows" });
            }
        }
        let valid_v: Vec<bool> = match valid {
            Some(v) => v.to_vec(),
            None => vec![true; n],
        };
        let x = self.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if valid_v[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            let mut s = 0.0;
            for j in 0..n {
                if valid_v[j] {
                    let e = (row[j] - mx).exp();
                    y[i * n + j] = e;
                    s += e;
                }
            }
            for j in 0..n {
                y[i * n + j] /= s;
            }
        }
        let id = self.id;
        let out = self.tape.push_checked(
            "softmax_rows",
            y,
            vec![m, n],
            None,
        )?;
        let out_id = out.id;
        // VJP needs the output values; install after the node exists.
        self.tape.0.borrow_mut().nodes[out_id].vjp = Some(Box::new(move |ctx| {
            let y = ctx.data(out_id);
            let mut g = vec![0.0; m * n];
            for i in 0..m {
                let mut dot = 0.0;
                for j in 0..n {
                    dot += ctx.grad[i * n + j] * y[i * n + j];
                }
                for j in 0..n {
                    g[i * n + j] = y[i * n + j] * (ctx.grad[i * n + j] - dot);
                }
            }
            vec![(id, g)]
        }));
        Ok(out)
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if r1 > m || r0 > r1 {
            return Err(Error::invalid(format!("slice_rows: [{r0},{r1}) out of {m}")));
        }
        let x = self.data();
        let y = x[r0 * n..r1 * n].to_vec();
        let id = self.id;
        self.tape.push_checked(
            "slice_rows",
            y,
            vec![r1 - r0, n],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; m * n];
                g[r0 * n..r1 * n].copy_from_slice(ctx.grad);
                vec![(id, g)]
            })),
        )
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if c1 > n || c0 > c1 {
            return Err(Error::invalid(format!("slice_cols: [{c0},{c1}) out of {n}")));
        }
        let w = c1 - c0;
        let x = self.data();
        let mut y = vec![0.0; m * w];
        for i in 0..m {
            y[i * w..(i + 1) * w].copy_from_slice(&x[i * n + c0..i * n + c1]);
        }
        let id = self.id;
        self.tape.push_checked(
            "slice_cols",
            y,
            vec![m, w],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    g[i * n + c0..i * n + c1].copy_from_slice(&ctx.grad[i * w..(i + 1) * w]);
                }
                vec![(id, g)]
            })),
        )
    }

    /// `[m,n] + [n]` row-broadcast add.
    pub fn add_bcast_row(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_bcast_row")?;
        if v.shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bcast_row",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let x = self.data();
        let b = v.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = x[i * n + j] + b[j];
            }
        }
        let (ida, idb) = (self.id, v.id);
        self.tape.push_checked(
            "add_bcast_row",
            y,
            vec![m, n],
            Some(Box::new(move |ctx| {
                let mut gv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gv[j] += ctx.grad[i * n + j];
                    }
                }
                vec![(ida, ctx.grad.to_vec()), (idb, gv)]
            })),
        )
    }

    /// `[m,n] * [n]` row-broadcast multiply.
    pub fn mul_bcast_row(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("mul_bcast_row")?;
        if v.shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "mul_bcast_row",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let x = self.data();
        let b = v.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = x[i * n + j] * b[j];
            }
        }
        let (ida, idb) = (self.id, v.id);
        self.tape.push_checked(
            "mul_bcast_row",
            y,
            vec![m, n],
            Some(Box::new(move |ctx| {
                let x = ctx.data(ida);
                let b = ctx.data(idb);
                let mut gx = vec![0.0; m * n];
                let mut gv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = ctx.grad[i * n + j] * b[j];
                        gv[j] += ctx.grad[i * n + j] * x[i * n + j];
                    }
                }
                vec![(ida, gx), (idb, gv)]
            })),
        )
    }

    /// `[m,n] + [m]` column-broadcast add.
    pub fn add_bcast_col(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("add_bcast_col")?;
        if v.shape != [m] {
            return Err(Error::ShapeMismatch {
                op: "add_bcast_col",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let x = self.data();
        let b = v.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = x[i * n + j] + b[i];
            }
        }
        let (ida, idb) = (self.id, v.id);
        self.tape.push_checked(
            "add_bcast_col",
            y,
            vec![m, n],
            Some(Box::new(move |ctx| {
                let mut gv = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        gv[i] += ctx.grad[i * n + j];
                    }
                }
                vec![(ida, ctx.grad.to_vec()), (idb, gv)]
            })),
        )
    }

    /// `[m,n] * [m]` column-broadcast multiply.
    pub fn mul_bcast_col(&self, v: &Tensor) -> Result<Tensor> {
        let (m, n) = self.dims2("mul_bcast_col")?;
        if v.shape != [m] {
            return Err(Error::ShapeMismatch {
                op: "mul_bcast_col",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let x = self.data();
        let b = v.data();
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                y[i * n + j] = x[i * n + j] * b[i];
            }
        }
        let (ida, idb) = (self.id, v.id);
        self.tape.push_checked(
            "mul_bcast_col",
            y,
            vec![m, n],
            Some(Box::new(move |ctx| {
                let x = ctx.data(ida);
                let b = ctx.data(idb);
                let mut gx = vec![0.0; m * n];
                let mut gv = vec![0.0; m];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = ctx.grad[i * n + j] * b[i];
                        gv[i] += ctx.grad[i * n + j] * x[i * n + j];
                    }
                }
                vec![(ida, gx), (idb, gv)]
            })),
        )
    }

    /// Multiply by a single-element tensor (differentiable in both).
    pub fn scale_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_t",
                lhs: self.shape.clone(),
                rhs: s.shape.clone(),
            });
        }
        let sv = s.item();
        let y: Vec<f64> = self.data().iter().map(|&x| sv * x).collect();
        let (ida, idb) = (self.id, s.id);
        self.tape.push_checked(
            "scale_t",
            y,
            self.shape.clone(),
            Some(Box::new(move |ctx| {
                let x = ctx.data(ida);
                let sv = ctx.data(idb)[0];
                let gx: Vec<f64> = ctx.grad.iter().map(|&g| g * sv).collect();
                let gs: f64 = ctx.grad.iter().zip(x.iter()).map(|(&g, &x)| g * x).sum();
                vec![(ida, gx), (idb, vec![gs])]
            })),
        )
    }

    /// Select rows of an embedding-style table by id; gradient scatter-adds.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (v, n) = self.dims2("gather_rows")?;
        for &i in ids {
            if i >= v {
                return Err(Error::invalid(format!("gather_rows: id {i} >= {v}")));
            }
        }
        let x = self.data();
        let m = ids.len();
        let mut y = vec![0.0; m * n];
        for (r, &i) in ids.iter().enumerate() {
            y[r * n..(r + 1) * n].copy_from_slice(&x[i * n..(i + 1) * n]);
        }
        let id = self.id;
        let ids_c = ids.to_vec();
        self.tape.push_checked(
            "gather_rows",
            y,
            vec![m, n],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; v * n];
                for (r, &i) in ids_c.iter().enumerate() {
                    for j in 0..n {
                        g[i * n + j] += ctx.grad[r * n + j];
                    }
                }
                vec![(id, g)]
            })),
        )
    }

    /// Inverted-dropout with a keep-mask drawn from the tape RNG.
    pub fn dropout(&self, rate: f64, train: bool) -> Result<Tensor> {
        if !train || rate <= 0.0 {
            return Ok(self.clone());
        }
        if rate >= 1.0 {
            return Err(Error::invalid("dropout: rate must be < 1"));
        }
        let keep = 1.0 - rate;
        let mask = self.tape.dropout_mask(self.numel(), rate);
        let x = self.data();
        let y: Vec<f64> = x
            .iter()
            .zip(mask.iter())
            .map(|(&v, &k)| if k { v / keep } else { 0.0 })
            .collect();
        let id = self.id;
        self.tape.push_checked(
            "dropout",
            y,
            self.shape.clone(),
            Some(Box::new(move |ctx| {
                let g: Vec<f64> = ctx
                    .grad
                    .iter()
                    .zip(mask.iter())
                    .map(|(&g, &k)| if k { g / keep } else { 0.0 })
                    .collect();
                vec![(id, g)]
            })),
        )
    }

    /// Reverse sweep from a scalar loss. Populates gradient buffers of all
    /// reachable `param` leaves; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape
            )));
        }
        let mut inner = self.tape.0.borrow_mut();
        let TapeInner { nodes, grads, .. } = &mut *inner;
        let top = self.id;
        let mut local: Vec<Option<Vec<f64>>> = Vec::with_capacity(top + 1);
        local.resize_with(top + 1, || None);
        local[top] = Some(vec![1.0]);
        for i in (0..=top).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                let buf = grads.entry(i).or_insert_with(|| vec![0.0; node.data.len()]);
                for (b, &gv) in buf.iter_mut().zip(g.iter()) {
                    *b += gv;
                }
            }
            if let Some(vjp) = &node.vjp {
                let ctx = VjpCtx {
                    nodes,
                    grad: &g,
                };
                for (pid, contrib) in vjp(&ctx) {
                    debug_assert!(pid < i, "tape not topologically ordered");
                    match &mut local[pid] {
                        Some(acc) => {
                            for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                                *a += c;
                            }
                        }
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Ok(())
    }
}
