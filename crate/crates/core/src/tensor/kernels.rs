//! Slice-level numeric kernels shared by the tape's forward and backward rules.
//!
//! Everything here works on flat row-major buffers with explicit dimensions;
//! shape validation happens one level up in the `Var` operations.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · bᵀ` where `b` is stored as `[n×k]`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m×n] += aᵀ · b[k×n]` where `a` is stored as `[k×m]`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Output extent of a strided, padded window sweep, or `None` if the kernel
/// does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-D cross-correlation. `x` is `[n, c_in, h, w]`, `weight` is
/// `[c_out, c_in, kh, kw]`; returns `[n, c_out, oh, ow]`.
pub fn conv2d_forward(g: &ConvGeom, n: usize, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let mut out = vec![0.0; n * out_sz];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.col_rows() * g.col_cols()] };
    for s in 0..n {
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        let os = &mut out[s * out_sz..(s + 1) * out_sz];
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                os[o * g.oh * g.ow..(o + 1) * g.oh * g.ow].fill(bv);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        gemm_nn(g.c_out, g.col_rows(), g.col_cols(), weight, src, os);
    }
    out
}

/// Accumulates conv gradients. Any of `dx`, `dw`, `db` may be skipped.
pub fn conv2d_backward(
    g: &ConvGeom,
    n: usize,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.oh * g.ow;
    let pix = g.oh * g.ow;
    let pointwise = g.is_pointwise();
    let mut col = vec![0.0; if pointwise { 0 } else { g.col_rows() * g.col_cols() }];
    let mut dcol = vec![0.0; if dx.is_some() && !pointwise { g.col_rows() * g.col_cols() } else { 0 }];
    for s in 0..n {
        let ds = &dout[s * out_sz..(s + 1) * out_sz];
        if let Some(db) = db.as_deref_mut() {
            for o in 0..g.c_out {
                db[o] += ds[o * pix..(o + 1) * pix].iter().sum::<f64>();
            }
        }
        let xs = &x[s * in_sz..(s + 1) * in_sz];
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[f64] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            gemm_nt(g.c_out, pix, g.col_rows(), ds, src, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
            if pointwise {
                gemm_tn(g.col_rows(), g.c_out, pix, weight, ds, dxs);
            } else {
                dcol.fill(0.0);
                gemm_tn(g.col_rows(), g.c_out, pix, weight, ds, &mut dcol);
                col2im(g, &dcol, dxs);
            }
        }
    }
}

/// Numerically stable softmax over the middle axis of an
/// `[outer, len, inner]` view.
pub fn softmax_forward(outer: usize, len: usize, inner: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[idx(k)] - max).exp();
                y[idx(k)] = e;
                total += e;
            }
            for k in 0..len {
                y[idx(k)] /= total;
            }
        }
    }
    y
}

pub fn softmax_backward(outer: usize, len: usize, inner: usize, y: &[f64], dy: &[f64], dx: &mut [f64]) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| y[idx(k)] * dy[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] += y[idx(k)] * (dy[idx(k)] - dot);
            }
        }
    }
}

/// Per-axis interpolation taps for bilinear resizing with the half-pixel
/// (align-corners-false) convention: `src = (dst + 0.5) · in/out − 0.5`,
/// clamped to `[0, in − 1]`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == input - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn resize_bilinear_forward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[f64]) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
                let bottom = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
                dst[oy * ow + ox] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[f64], dx: &mut [f64]) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for p in 0..planes {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                d[y0 * w + x1] += (1.0 - fy) * fx * v;
                d[y1 * w + x0] += fy * (1.0 - fx) * v;
                d[y1 * w + x1] += fy * fx * v;
            }
        }
    }
}

/// Window `[start, end)` of output cell `o` when pooling `input` cells onto
/// `output` cells. Windows tile the input exactly when `output` divides it.
pub fn pool_window(input: usize, output: usize, o: usize) -> (usize, usize) {
    let start = o * input / output;
    let end = ((o + 1) * input).div_ceil(output);
    (start, end)
}

pub fn adaptive_avg_pool_forward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = pool_window(h, oh, oy);
            for ox in 0..ow {
                let (x0, x1) = pool_window(w, ow, ox);
                let mut acc = 0.0;
                for y in y0..y1 {
                    acc += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                }
                out[(p * oh + oy) * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(planes: usize, h: usize, w: usize, oh: usize, ow: usize, dy: &[f64], dx: &mut [f64]) {
    for p in 0..planes {
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = pool_window(h, oh, oy);
            for ox in 0..ow {
                let (x0, x1) = pool_window(w, ow, ox);
                let g = dy[(p * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for v in &mut d[y * w + x0..y * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
}

/// Saved state of a batch-normalization forward pass.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Normalizes `[n, c, hw]` per channel with either batch statistics
/// (`stats = None`) or the supplied `(mean, var)`.
pub fn batchnorm_forward(
    n: usize,
    c: usize,
    hw: usize,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    stats: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, BnSaved) {
    let count = (n * hw) as f64;
    let (mean, var) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            (mean, var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (y, BnSaved { xhat, inv_std, mean, var })
}

/// Gradients of batch normalization. `batch_stats` selects whether the
/// statistics were functions of `x` (training) or constants (inference).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    n: usize,
    c: usize,
    hw: usize,
    saved: &BnSaved,
    gamma: &[f64],
    dy: &[f64],
    batch_stats: bool,
    dx: Option<&mut [f64]>,
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) {
    let count = (n * hw) as f64;
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xhat = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * saved.xhat[i];
            }
        }
    }
    if let Some(dg) = dgamma {
        for ch in 0..c {
            dg[ch] += sum_dy_xhat[ch];
        }
    }
    if let Some(dbt) = dbeta {
        for ch in 0..c {
            dbt[ch] += sum_dy[ch];
        }
    }
    if let Some(dx) = dx {
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let scale = gamma[ch] * saved.inv_std[ch];
                for i in off..off + hw {
                    dx[i] += if batch_stats {
                        scale * (dy[i] - sum_dy[ch] / count - saved.xhat[i] * sum_dy_xhat[ch] / count)
                    } else {
                        scale * dy[i]
                    };
                }
            }
        }
    }
}
