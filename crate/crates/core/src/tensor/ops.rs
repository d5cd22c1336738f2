//! Differentiable operations on [`Var`].

use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::tape::{Op, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Batch statistics observed by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Splits `[.., m, n]` into (batch, m, n) for rank 2 or 3.
fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [m, n] => Ok((1, m, n)),
        [b, m, n] => Ok((b, m, n)),
        _ => Err(Error::shape(op, shape, &[0, 0])),
    }
}

fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, shape, &[0, 0]));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

impl<'t> Var<'t> {
    fn check_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        same_shape("add", self, other)?;
        let out = zip_map(&self.value, &other.value, |a, b| a + b);
        let (a, b) = (self.node, other.node);
        self.tape.record("add", out, a.is_some() || b.is_some(), || Op::Add { a, b })
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        same_shape("sub", self, other)?;
        let out = zip_map(&self.value, &other.value, |a, b| a - b);
        let (a, b) = (self.node, other.node);
        self.tape.record("sub", out, a.is_some() || b.is_some(), || Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        same_shape("mul", self, other)?;
        let out = zip_map(&self.value, &other.value, |a, b| a * b);
        let (a, b) = (self.node, other.node);
        let (av, bv) = (self.value.clone(), other.value.clone());
        self.tape.record("mul", out, a.is_some() || b.is_some(), || Op::Mul { a, b, av, bv })
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>> {
        let out = self.value.map(|v| v * s);
        let a = self.node;
        self.tape.record("scale", out, a.is_some(), || Op::Scale { a, s })
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        let out = Arc::new(self.value.map(|v| v.max(0.0)));
        let a = self.node;
        let y = out.clone();
        self.tape
            .record("relu", (*out).clone(), a.is_some(), || Op::Relu { a, y })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Result<Var<'t>> {
        let out = Tensor::scalar(self.value.sum());
        let a = self.node;
        self.tape.record("sum", out, a.is_some(), || Op::Sum { a })
    }

    /// Adds a row vector to every row of a matrix (or every row of every
    /// matrix in a batch). `row` holds either `n` values shared by all
    /// matrices, or one `n`-row per batch entry.
    pub fn add_rows(&self, row: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(row);
        let (groups, rows, n) = matrix_dims("add_rows", self.shape())?;
        let shared = match row.value.numel() {
            len if len == n => true,
            len if len == groups * n => false,
            _ => return Err(Error::shape("add_rows", self.shape(), row.shape())),
        };
        let r = row.value.data();
        let mut data = self.value.data().to_vec();
        for g in 0..groups {
            let src = if shared { &r[..n] } else { &r[g * n..(g + 1) * n] };
            for i in 0..rows {
                let off = (g * rows + i) * n;
                data[off..off + n].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let out = Tensor::new(self.shape().to_vec(), data)?;
        let (x, r) = (self.node, row.node);
        self.tape.record("add_rows", out, x.is_some() || r.is_some(), || Op::AddRows {
            x,
            r,
            groups,
            rows,
            n,
            shared,
        })
    }

    /// Scales row `i` of an `[m, n]` matrix by `col[i]`. For a batch
    /// `[b, m, n]`, `col` holds `b·m` entries, one per row of every matrix.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(col);
        let (batch, m, n) = matrix_dims("mul_col", self.shape())?;
        let rows = batch * m;
        if col.value.numel() != rows {
            return Err(Error::shape("mul_col", self.shape(), col.shape()));
        }
        let c = col.value.data();
        let data = self
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * c[i / n])
            .collect();
        let out = Tensor::new(self.shape().to_vec(), data)?;
        let (x, cn) = (self.node, col.node);
        let (xv, cv) = (self.value.clone(), col.value.clone());
        self.tape.record("mul_col", out, x.is_some() || cn.is_some(), || Op::MulCol {
            x,
            c: cn,
            xv,
            cv,
            rows,
            n,
        })
    }

    /// Matrix product of `[m, k]·[k, n]`, or the batched `[b, m, k]·[b, k, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        let (ba, m, k) = matrix_dims("matmul", self.shape())?;
        let (bb, k2, n) = matrix_dims("matmul", other.shape())?;
        if k != k2 || ba != bb || self.value.ndim() != other.value.ndim() {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut data = vec![0.0; ba * m * n];
        for s in 0..ba {
            kernels::gemm_nn(
                m,
                k,
                n,
                &self.value.data()[s * m * k..],
                &other.value.data()[s * k * n..],
                &mut data[s * m * n..(s + 1) * m * n],
            );
        }
        let shape = if self.value.ndim() == 2 { vec![m, n] } else { vec![ba, m, n] };
        let out = Tensor::new(shape, data)?;
        let (a, b) = (self.node, other.node);
        let (av, bv) = (self.value.clone(), other.value.clone());
        self.tape.record("matmul", out, a.is_some() || b.is_some(), || Op::MatMul {
            a,
            b,
            av,
            bv,
            batch: ba,
            m,
            k,
            n,
        })
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let (batch, m, n) = matrix_dims("transpose", self.shape())?;
        let src = self.value.data();
        let mut data = vec![0.0; src.len()];
        for s in 0..batch {
            let off = s * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let out = Tensor::new(shape, data)?;
        let a = self.node;
        self.tape
            .record("transpose", out, a.is_some(), || Op::Transpose { a, batch, m, n })
    }

    /// Reinterprets the data under a new shape; row-major order is preserved.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = (*self.value).clone().reshape(shape)?;
        let a = self.node;
        self.tape.record("reshape", out, a.is_some(), || Op::Reshape { a })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Input(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let y = Arc::new(Tensor::new(
            shape.to_vec(),
            kernels::softmax_forward(outer, len, inner, self.value.data()),
        )?);
        let a = self.node;
        let saved = y.clone();
        self.tape.record("softmax", (*y).clone(), a.is_some(), || Op::Softmax {
            a,
            y: saved,
            outer,
            len,
            inner,
        })
    }

    /// 2-D cross-correlation over `[n, c_in, h, w]` (or `[c_in, h, w]`) with a
    /// `[c_out, c_in, kh, kw]` kernel. Output size per axis is
    /// `floor((in + 2·pad − k) / stride) + 1`.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var<'t>> {
        self.check_tape(weight);
        let (n, c_in, h, w) = self.value.nchw("conv2d")?;
        let [c_out, wc, kh, kw] = *weight.shape() else {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        };
        if wc != c_in {
            return Err(Error::shape("conv2d", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.value.numel() != c_out {
                return Err(Error::shape("conv2d bias", weight.shape(), b.shape()));
            }
        }
        let (oh, ow) = match (
            kernels::conv_out_dim(h, kh, stride.0, padding.0),
            kernels::conv_out_dim(w, kw, stride.1, padding.1),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d kernel {kh}x{kw} stride {stride:?} padding {padding:?} does not fit input {h}x{w}"
                )))
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh,
            ow,
        };
        let data = kernels::conv2d_forward(
            &geom,
            n,
            self.value.data(),
            weight.value.data(),
            bias.map(|b| b.value.data()),
        );
        let shape = if self.value.ndim() == 3 { vec![c_out, oh, ow] } else { vec![n, c_out, oh, ow] };
        let out = Tensor::new(shape, data)?;
        let (x, wn, b) = (self.node, weight.node, bias.and_then(|b| b.node));
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        self.tape.record(
            "conv2d",
            out,
            x.is_some() || wn.is_some() || b.is_some(),
            || Op::Conv2d {
                x,
                w: wn,
                b,
                xv,
                wv,
                geom,
                n,
            },
        )
    }

    /// Per-channel normalization of `[n, c, h, w]`. With `running = None`
    /// batch statistics are used (and returned); otherwise the supplied
    /// `(mean, var)` are treated as constants.
    pub fn batchnorm(
        &self,
        gamma: &Var<'t>,
        beta: &Var<'t>,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var<'t>, BnStats)> {
        let (n, c, h, w) = self.value.nchw("batchnorm")?;
        if gamma.value.numel() != c || beta.value.numel() != c {
            return Err(Error::shape("batchnorm", self.shape(), gamma.shape()));
        }
        let hw = h * w;
        let (y, saved) = kernels::batchnorm_forward(
            n,
            c,
            hw,
            self.value.data(),
            gamma.value.data(),
            beta.value.data(),
            eps,
            running,
        );
        let stats = BnStats {
            mean: saved.mean.clone(),
            var: saved.var.clone(),
        };
        let out = Tensor::new(self.shape().to_vec(), y)?;
        let (x, g, b) = (self.node, gamma.node, beta.node);
        let gv = gamma.value.clone();
        let batch_stats = running.is_none();
        let var = self.tape.record(
            "batchnorm",
            out,
            x.is_some() || g.is_some() || b.is_some(),
            || Op::BatchNorm {
                x,
                gamma: g,
                beta: b,
                gv,
                saved,
                n,
                c,
                hw,
                batch_stats,
            },
        )?;
        Ok((var, stats))
    }

    /// Average pooling of the last two axes onto an `oh × ow` grid.
    /// Windows are `[floor(i·in/out), ceil((i+1)·in/out))`.
    pub fn adaptive_avg_pool2d(&self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let (planes, h, w) = spatial_dims("adaptive_avg_pool2d", self.shape())?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::Config(format!("cannot pool {h}x{w} onto {oh}x{ow}")));
        }
        let data = kernels::adaptive_avg_pool_forward(planes, h, w, oh, ow, self.value.data());
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(shape, data)?;
        let x = self.node;
        self.tape.record("avg_pool2d", out, x.is_some(), || Op::AvgPool {
            x,
            planes,
            h,
            w,
            oh,
            ow,
        })
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool2d(&self, k: usize) -> Result<Var<'t>> {
        let (_, h, w) = spatial_dims("avg_pool2d", self.shape())?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Config(format!("avg_pool2d window {k} does not tile {h}x{w}")));
        }
        self.adaptive_avg_pool2d(h / k, w / k)
    }

    /// Bilinear resize of the last two axes (half-pixel convention, see
    /// [`kernels::bilinear_taps`]).
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let (planes, h, w) = spatial_dims("resize_bilinear", self.shape())?;
        if oh == 0 || ow == 0 {
            return Err(Error::Config("resize target must be non-empty".into()));
        }
        let data = kernels::resize_bilinear_forward(planes, h, w, oh, ow, self.value.data());
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(shape, data)?;
        let x = self.node;
        self.tape.record("resize_bilinear", out, x.is_some(), || Op::Resize {
            x,
            planes,
            h,
            w,
            oh,
            ow,
        })
    }

    pub fn upsample_bilinear(&self, factor: usize) -> Result<Var<'t>> {
        if factor < 1 {
            return Err(Error::Config("upsample factor must be at least 1".into()));
        }
        let (_, h, w) = spatial_dims("upsample_bilinear", self.shape())?;
        self.resize_bilinear(h * factor, w * factor)
    }

    /// Concatenates image-like tensors along the channel axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let rank = first.value.ndim();
        let (n, _, h, w) = first.value.nchw("concat")?;
        let mut channels = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_tape(p);
            let (pn, pc, ph, pw) = p.value.nchw("concat")?;
            if pn != n || ph != h || pw != w || p.value.ndim() != rank {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (p, &c) in parts.iter().zip(&channels) {
                data.extend_from_slice(&p.value.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let shape = if rank == 3 { vec![total, h, w] } else { vec![n, total, h, w] };
        let out = Tensor::new(shape, data)?;
        let ids: Vec<_> = parts.iter().zip(&channels).map(|(p, &c)| (p.node, c)).collect();
        let tracked = ids.iter().any(|(id, _)| id.is_some());
        first
            .tape
            .record("concat", out, tracked, || Op::Concat { parts: ids, n, hw })
    }

    /// Affine map `x·Wᵀ + b` along the last axis. `weight` is `[d_out, d_in]`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.check_tape(weight);
        let [dout, din] = *weight.shape() else {
            return Err(Error::shape("linear", self.shape(), weight.shape()));
        };
        let last = *self.shape().last().expect("non-empty shape");
        if last != din {
            return Err(Error::shape("linear", self.shape(), weight.shape()));
        }
        if let Some(b) = bias {
            if b.value.numel() != dout {
                return Err(Error::shape("linear bias", weight.shape(), b.shape()));
            }
        }
        let rows = self.value.numel() / din;
        let mut data = vec![0.0; rows * dout];
        if let Some(b) = bias {
            for r in 0..rows {
                data[r * dout..(r + 1) * dout].copy_from_slice(b.value.data());
            }
        }
        kernels::gemm_nt(rows, din, dout, self.value.data(), weight.value.data(), &mut data);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        let (x, w, b) = (self.node, weight.node, bias.and_then(|b| b.node));
        let (xv, wv) = (self.value.clone(), weight.value.clone());
        self.tape.record(
            "linear",
            out,
            x.is_some() || w.is_some() || b.is_some(),
            || Op::Linear {
                x,
                w,
                b,
                xv,
                wv,
                rows,
                din,
                dout,
            },
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, floor: f64) -> Result<Var<'t>> {
        let out = self.value.map(|v| v.max(floor).ln());
        let a = self.node;
        let av = self.value.clone();
        self.tape
            .record("ln", out, a.is_some(), || Op::Ln { a, av, floor })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor) -> Result<Var<'t>> {
        if c.shape() != self.shape() {
            return Err(Error::shape("mul_const", self.shape(), c.shape()));
        }
        let out = zip_map(&self.value, c, |a, b| a * b);
        let a = self.node;
        let c = Arc::new(c.clone());
        self.tape
            .record("mul_const", out, a.is_some(), || Op::MulConst { a, c })
    }

    /// Inverted dropout: in training, each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1−p)`, so inference
    /// is the identity.
    pub fn dropout(&self, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(self.shape().to_vec(), |_| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        });
        self.mul_const(&mask)
    }

    /// Item `index` along the leading axis.
    pub fn select(&self, index: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::Input(format!("select({index}) on shape {shape:?}")));
        }
        let item: usize = shape[1..].iter().product();
        let out = Tensor::new(
            shape[1..].to_vec(),
            self.value.data()[index * item..(index + 1) * item].to_vec(),
        )?;
        let a = self.node;
        self.tape
            .record("select", out, a.is_some(), || Op::Select { a, index, item })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("stack of zero tensors".into()))?;
        let item = first.value.numel();
        let mut data = Vec::with_capacity(item * parts.len());
        for p in parts {
            first.check_tape(p);
            same_shape("stack", first, p)?;
            data.extend_from_slice(p.value.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let out = Tensor::new(shape, data)?;
        let ids: Vec<_> = parts.iter().map(|p| p.node).collect();
        let tracked = ids.iter().any(Option::is_some);
        first
            .tape
            .record("stack", out, tracked, || Op::Stack { parts: ids, item })
    }

    /// `out[i] = self[index[i]]` reshaped to `shape`. Used for fixed
    /// rearrangements such as tiling patch rows into a map.
    pub fn gather(&self, shape: impl Into<Vec<usize>>, index: Arc<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let n = self.value.numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Input(format!("gather index {bad} out of range for {n} elements")));
        }
        let src = self.value.data();
        let out = Tensor::new(shape, index.iter().map(|&i| src[i]).collect())?;
        let a = self.node;
        self.tape
            .record("gather", out, a.is_some(), || Op::Gather { a, index })
    }
}
