use std::cell::RefCell;
use std::sync::Arc;

use super::kernels::{self, BnSaved, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

pub(crate) type Id = Option<usize>;

/// One recorded operation. Input references are `None` for untracked
/// operands (constants), which receive no gradient.
pub(crate) enum Op {
    Leaf,
    Add { a: Id, b: Id },
    Sub { a: Id, b: Id },
    Mul { a: Id, b: Id, av: Arc<Tensor>, bv: Arc<Tensor> },
    Scale { a: Id, s: f64 },
    Relu { a: Id, y: Arc<Tensor> },
    Sum { a: Id },
    /// `x` viewed as `[groups, rows, n]`, `r` as `[groups, n]` (or `[n]` when `shared`).
    AddRows { x: Id, r: Id, groups: usize, rows: usize, n: usize, shared: bool },
    /// `x[rows, n] ⊙ c[rows]` broadcast along columns.
    MulCol { x: Id, c: Id, xv: Arc<Tensor>, cv: Arc<Tensor>, rows: usize, n: usize },
    MatMul { a: Id, b: Id, av: Arc<Tensor>, bv: Arc<Tensor>, batch: usize, m: usize, k: usize, n: usize },
    Transpose { a: Id, batch: usize, m: usize, n: usize },
    Reshape { a: Id },
    Softmax { a: Id, y: Arc<Tensor>, outer: usize, len: usize, inner: usize },
    Conv2d { x: Id, w: Id, b: Id, xv: Arc<Tensor>, wv: Arc<Tensor>, geom: ConvGeom, n: usize },
    BatchNorm { x: Id, gamma: Id, beta: Id, gv: Arc<Tensor>, saved: BnSaved, n: usize, c: usize, hw: usize, batch_stats: bool },
    AvgPool { x: Id, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    Resize { x: Id, planes: usize, h: usize, w: usize, oh: usize, ow: usize },
    /// Channel concatenation of `[n, c_i, hw]` parts.
    Concat { parts: Vec<(Id, usize)>, n: usize, hw: usize },
    Linear { x: Id, w: Id, b: Id, xv: Arc<Tensor>, wv: Arc<Tensor>, rows: usize, din: usize, dout: usize },
    Ln { a: Id, av: Arc<Tensor>, floor: f64 },
    MulConst { a: Id, c: Arc<Tensor> },
    Select { a: Id, index: usize, item: usize },
    Stack { parts: Vec<Id>, item: usize },
    Gather { a: Id, index: Arc<Vec<usize>> },
}

struct Node {
    numel: usize,
    op: Op,
}

/// Records operations for one forward pass and replays them backward.
///
/// A tape is single-threaded (`RefCell` inside). A tape built with
/// [`Tape::no_grad`] records nothing, so intermediate values are freed as
/// soon as their [`Var`] handles drop.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let value = Arc::new(value);
        let node = self.push(value.numel(), Op::Leaf);
        Var { tape: self, value, node }
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Arc::new(value),
            node: None,
        }
    }

    fn push(&self, numel: usize, op: Op) -> Id {
        if !self.recording {
            return None;
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { numel, op });
        Some(nodes.len() - 1)
    }

    /// Wraps an operation result. The node is recorded only when at least one
    /// input is tracked.
    pub(crate) fn record(&self, op_name: &'static str, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let node = if tracked && self.recording { self.push(value.numel(), op()) } else { None };
        Ok(Var {
            tape: self,
            value: Arc::new(value),
            node,
        })
    }

    /// Reverse sweep from a scalar loss. Each tracked leaf receives
    /// `∂loss/∂leaf`; leaves the loss does not depend on get no entry.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !loss.value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let Some(root) = loss.node else {
            return Err(Error::Usage("loss does not depend on any tracked leaf".into()));
        };
        let nodes = self.nodes.borrow();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.numel).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            propagate(&node.op, &g, &mut grads, &sizes);
        }

        Ok(Gradients { grads })
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], sizes: &[usize], id: usize) -> &'g mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; sizes[id]])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], sizes: &[usize], id: Id, f: impl FnOnce(&mut [f64])) {
    if let Some(id) = id {
        f(slot(grads, sizes, id));
    }
}

fn propagate(op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>], sizes: &[usize]) {
    match op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            for id in [*a, *b] {
                accumulate(grads, sizes, id, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
        }
        Op::Sub { a, b } => {
            accumulate(grads, sizes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(grads, sizes, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul { a, b, av, bv } => {
            accumulate(grads, sizes, *a, |d| {
                for ((d, g), b) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * b;
                }
            });
            accumulate(grads, sizes, *b, |d| {
                for ((d, g), a) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * a;
                }
            });
        }
        Op::Scale { a, s } => {
            accumulate(grads, sizes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
        }
        Op::Relu { a, y } => {
            accumulate(grads, sizes, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.data()) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            });
        }
        Op::Sum { a } => {
            accumulate(grads, sizes, *a, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::AddRows { x, r, groups, rows, n, shared } => {
            accumulate(grads, sizes, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            accumulate(grads, sizes, *r, |d| {
                for grp in 0..*groups {
                    let dst = if *shared { 0 } else { grp * n };
                    for row in 0..*rows {
                        let src = &g[(grp * rows + row) * n..(grp * rows + row + 1) * n];
                        for (dv, gv) in d[dst..dst + n].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
            });
        }
        Op::MulCol { x, c, xv, cv, rows, n } => {
            accumulate(grads, sizes, *x, |d| {
                for r in 0..*rows {
                    let s = cv.data()[r];
                    for j in 0..*n {
                        d[r * n + j] += s * g[r * n + j];
                    }
                }
            });
            accumulate(grads, sizes, *c, |d| {
                for r in 0..*rows {
                    let row = &xv.data()[r * n..(r + 1) * n];
                    d[r] += row.iter().zip(&g[r * n..(r + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        }
        Op::MatMul { a, b, av, bv, batch, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            accumulate(grads, sizes, *a, |d| {
                for s in 0..*batch {
                    kernels::gemm_nt(m, n, k, &g[s * m * n..], &bv.data()[s * k * n..], &mut d[s * m * k..]);
                }
            });
            accumulate(grads, sizes, *b, |d| {
                for s in 0..*batch {
                    kernels::gemm_tn(k, m, n, &av.data()[s * m * k..], &g[s * m * n..], &mut d[s * k * n..]);
                }
            });
        }
        Op::Transpose { a, batch, m, n } => {
            // forward mapped [m, n] -> [n, m]; g is [n, m]
            accumulate(grads, sizes, *a, |d| {
                for s in 0..*batch {
                    let off = s * m * n;
                    for i in 0..*m {
                        for j in 0..*n {
                            d[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            });
        }
        Op::Reshape { a } => {
            accumulate(grads, sizes, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Softmax { a, y, outer, len, inner } => {
            accumulate(grads, sizes, *a, |d| kernels::softmax_backward(*outer, *len, *inner, y.data(), g, d));
        }
        Op::Conv2d { x, w, b, xv, wv, geom, n } => {
            // Take buffers out so the kernel can borrow all three at once.
            let mut take = |id: Id| -> Option<Vec<f64>> { id.map(|id| grads[id].take().unwrap_or_else(|| vec![0.0; sizes[id]])) };
            let mut dx = take(*x);
            let mut dw = take(*w);
            let mut db = take(*b);
            kernels::conv2d_backward(
                geom,
                *n,
                xv.data(),
                wv.data(),
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (id, buf) in [(*x, dx), (*w, dw), (*b, db)] {
                if let (Some(id), Some(buf)) = (id, buf) {
                    grads[id] = Some(buf);
                }
            }
        }
        Op::BatchNorm { x, gamma, beta, gv, saved, n, c, hw, batch_stats } => {
            let mut take = |id: Id| -> Option<Vec<f64>> { id.map(|id| grads[id].take().unwrap_or_else(|| vec![0.0; sizes[id]])) };
            let mut dx = take(*x);
            let mut dg = take(*gamma);
            let mut db = take(*beta);
            kernels::batchnorm_backward(
                *n,
                *c,
                *hw,
                saved,
                gv.data(),
                g,
                *batch_stats,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (id, buf) in [(*x, dx), (*gamma, dg), (*beta, db)] {
                if let (Some(id), Some(buf)) = (id, buf) {
                    grads[id] = Some(buf);
                }
            }
        }
        Op::AvgPool { x, planes, h, w, oh, ow } => {
            accumulate(grads, sizes, *x, |d| kernels::adaptive_avg_pool_backward(*planes, *h, *w, *oh, *ow, g, d));
        }
        Op::Resize { x, planes, h, w, oh, ow } => {
            accumulate(grads, sizes, *x, |d| kernels::resize_bilinear_backward(*planes, *h, *w, *oh, *ow, g, d));
        }
        Op::Concat { parts, n, hw } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, ch) in parts {
                accumulate(grads, sizes, id, |d| {
                    for s in 0..*n {
                        let src = &g[(s * total + offset) * hw..(s * total + offset + ch) * hw];
                        let dst = &mut d[s * ch * hw..(s + 1) * ch * hw];
                        dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
                offset += ch;
            }
        }
        Op::Linear { x, w, b, xv, wv, rows, din, dout } => {
            let (rows, din, dout) = (*rows, *din, *dout);
            accumulate(grads, sizes, *x, |d| kernels::gemm_nn(rows, dout, din, g, wv.data(), d));
            accumulate(grads, sizes, *w, |d| kernels::gemm_tn(dout, rows, din, g, xv.data(), d));
            accumulate(grads, sizes, *b, |d| {
                for r in 0..rows {
                    d.iter_mut().zip(&g[r * dout..(r + 1) * dout]).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Ln { a, av, floor } => {
            accumulate(grads, sizes, *a, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av.data()) {
                    if *x > *floor {
                        *d += g / x;
                    }
                }
            });
        }
        Op::MulConst { a, c } => {
            accumulate(grads, sizes, *a, |d| {
                for ((d, g), c) in d.iter_mut().zip(g).zip(c.data()) {
                    *d += g * c;
                }
            });
        }
        Op::Select { a, index, item } => {
            accumulate(grads, sizes, *a, |d| {
                d[index * item..(index + 1) * item].iter_mut().zip(g).for_each(|(d, g)| *d += g);
            });
        }
        Op::Stack { parts, item } => {
            for (i, &id) in parts.iter().enumerate() {
                accumulate(grads, sizes, id, |d| {
                    d.iter_mut().zip(&g[i * item..(i + 1) * item]).for_each(|(d, g)| *d += g);
                });
            }
        }
        Op::Gather { a, index } => {
            accumulate(grads, sizes, *a, |d| {
                for (&src, &gv) in index.iter().zip(g) {
                    d[src] += gv;
                }
            });
        }
    }
}

/// Handle to a value produced on a [`Tape`].
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) value: Arc<Tensor>,
    pub(crate) node: Id,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Whether gradients flow back through this value.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.value.is_scalar(), "item() on shape {:?}", self.value.shape());
        self.value.data()[0]
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

/// Result of a backward pass, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tracked leaf, if the loss depends on it.
    pub fn wrt(&self, var: &Var<'_>) -> Option<Tensor> {
        let id = var.node?;
        let data = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(var.shape().to_vec(), data.clone()).expect("gradient shape matches leaf"))
    }

    /// Gradient data for a leaf, or zeros when the loss does not depend on it.
    pub fn wrt_or_zero(&self, var: &Var<'_>) -> Tensor {
        self.wrt(var).unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}
