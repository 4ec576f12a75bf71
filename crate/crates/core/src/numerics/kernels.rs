//! Forward and adjoint kernels on raw buffers. The tape composes these; they
//! never allocate tape nodes themselves.

use super::real::matmul;
use super::Real;

/// Spatial geometry of a 2-D convolution over a `c x h x w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Geometry of a convolution; `None` when the padded input is smaller
    /// than the kernel.
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(ConvGeom { c, h, w, k, stride, pad, ho, wo })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col<S: Real>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    let l = g.col_cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(S::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { S::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the input grid,
/// accumulating into `x`.
pub(crate) fn col2im<S: Real>(cols: &[S], g: &ConvGeom, x: &mut [S]) {
    let l = g.col_cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W * im2col(x[n]) + bias` for each of `batch` samples.
/// `weight` is `c_out x (c_in k k)`.
pub(crate) fn conv2d_forward<S: Real>(
    x: &[S],
    weight: &[S],
    bias: Option<&[S]>,
    batch: usize,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<S> {
    let (rows, l) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![S::ZERO; batch * c_out * l];
    let mut cols = vec![S::ZERO; rows * l];
    for n in 0..batch {
        im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
        let y = &mut out[n * c_out * l..(n + 1) * c_out * l];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(l).enumerate() {
                chunk.fill(b[co]);
            }
        }
        matmul(weight, false, &cols, false, y, c_out, rows, l, bias.is_some());
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is accumulated into the
/// provided buffer when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Real>(
    x: &[S],
    weight: &[S],
    grad_out: &[S],
    batch: usize,
    c_out: usize,
    g: &ConvGeom,
    mut grad_x: Option<&mut [S]>,
    mut grad_w: Option<&mut [S]>,
    mut grad_b: Option<&mut [S]>,
) {
    let (rows, l) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let mut cols = vec![S::ZERO; rows * l];
    for n in 0..batch {
        let gy = &grad_out[n * c_out * l..(n + 1) * c_out * l];
        if let Some(gb) = grad_b.as_deref_mut() {
            for (co, chunk) in gy.chunks(l).enumerate() {
                gb[co] += chunk.iter().copied().sum::<S>();
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(&x[n * in_len..(n + 1) * in_len], g, &mut cols);
            matmul(gy, false, &cols, true, gw, c_out, l, rows, true);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            matmul(weight, true, gy, false, &mut cols, rows, c_out, l, false);
            col2im(&cols, g, &mut gx[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Transposed convolution. `g` describes the *adjoint* convolution mapping
/// the output grid (`g.c = c_out`, `g.h x g.w`) onto the input grid
/// (`g.ho x g.wo`). `weight` is `c_in x (c_out k k)`.
pub(crate) fn conv_transpose2d_forward<S: Real>(
    x: &[S],
    weight: &[S],
    bias: Option<&[S]>,
    batch: usize,
    c_in: usize,
    g: &ConvGeom,
) -> Vec<S> {
    let (rows, l) = (g.col_rows(), g.col_cols());
    let out_len = g.c * g.h * g.w;
    let mut out = vec![S::ZERO; batch * out_len];
    let mut cols = vec![S::ZERO; rows * l];
    for n in 0..batch {
        let xin = &x[n * c_in * l..(n + 1) * c_in * l];
        matmul(weight, true, xin, false, &mut cols, rows, c_in, l, false);
        let y = &mut out[n * out_len..(n + 1) * out_len];
        col2im(&cols, g, y);
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(g.h * g.w).enumerate() {
                for v in chunk {
                    *v += b[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<S: Real>(
    x: &[S],
    weight: &[S],
    grad_out: &[S],
    batch: usize,
    c_in: usize,
    g: &ConvGeom,
    mut grad_x: Option<&mut [S]>,
    mut grad_w: Option<&mut [S]>,
    mut grad_b: Option<&mut [S]>,
) {
    let (rows, l) = (g.col_rows(), g.col_cols());
    let out_len = g.c * g.h * g.w;
    let mut cols = vec![S::ZERO; rows * l];
    for n in 0..batch {
        let gy = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gb) = grad_b.as_deref_mut() {
            for (co, chunk) in gy.chunks(g.h * g.w).enumerate() {
                gb[co] += chunk.iter().copied().sum::<S>();
            }
        }
        if grad_x.is_none() && grad_w.is_none() {
            continue;
        }
        im2col(gy, g, &mut cols);
        if let Some(gx) = grad_x.as_deref_mut() {
            let gxn = &mut gx[n * c_in * l..(n + 1) * c_in * l];
            matmul(weight, false, &cols, false, gxn, c_in, rows, l, true);
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            let xin = &x[n * c_in * l..(n + 1) * c_in * l];
            matmul(xin, false, &cols, true, gw, c_in, l, rows, true);
        }
    }
}

/// 2x2 mean pooling over the trailing two axes of `planes` stacked `h x w`
/// planes. Odd extents replicate the last row/column.
pub(crate) fn avg_pool2_forward<S: Real>(x: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = S::from_f64(0.25);
    let mut out = vec![S::ZERO; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..wo {
                let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
                dst[oy * wo + ox] = (src[y0 * w + x0] + src[y0 * w + x1] + src[y1 * w + x0]
                    + src[y1 * w + x1])
                    * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<S: Real>(
    grad_out: &[S],
    planes: usize,
    h: usize,
    w: usize,
    grad_x: &mut [S],
) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = S::from_f64(0.25);
    for p in 0..planes {
        let gy = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        let gx = &mut grad_x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1) = (2 * oy, (2 * oy + 1).min(h - 1));
            for ox in 0..wo {
                let (x0, x1) = (2 * ox, (2 * ox + 1).min(w - 1));
                let g = gy[oy * wo + ox] * quarter;
                gx[y0 * w + x0] += g;
                gx[y0 * w + x1] += g;
                gx[y1 * w + x0] += g;
                gx[y1 * w + x1] += g;
            }
        }
    }
}

pub(crate) fn upsample2_forward<S: Real>(x: &[S], planes: usize, h: usize, w: usize) -> Vec<S> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![S::ZERO; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, o) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *o = row[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<S: Real>(
    grad_out: &[S],
    planes: usize,
    h: usize,
    w: usize,
    grad_x: &mut [S],
) {
    let (ho, wo) = (2 * h, 2 * w);
    for p in 0..planes {
        let gy = &grad_out[p * ho * wo..(p + 1) * ho * wo];
        let gx = &mut grad_x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                gx[(oy / 2) * w + ox / 2] += gy[oy * wo + ox];
            }
        }
    }
}

/// Per-(sample, group) statistics saved by the group-norm forward pass.
#[derive(Clone, Debug)]
pub(crate) struct GroupStats<S> {
    pub mean: Vec<S>,
    pub rstd: Vec<S>,
}

/// Group normalization of `batch` samples of `c x spatial` values.
#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_forward<S: Real>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    batch: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    eps: f64,
) -> (Vec<S>, GroupStats<S>) {
    let cg = c / groups;
    let m = (cg * spatial) as f64;
    let mut out = vec![S::ZERO; x.len()];
    let mut stats = GroupStats { mean: Vec::with_capacity(batch * groups), rstd: Vec::new() };
    for n in 0..batch {
        for gi in 0..groups {
            let start = (n * c + gi * cg) * spatial;
            let block = &x[start..start + cg * spatial];
            // two-pass in f64 for stability
            let mean = block.iter().map(|v| v.to_f64()).sum::<f64>() / m;
            let var = block.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / m;
            let rstd = 1.0 / (var + eps).sqrt();
            let (mean_s, rstd_s) = (S::from_f64(mean), S::from_f64(rstd));
            for ch in 0..cg {
                let cidx = gi * cg + ch;
                let (ga, be) = (gamma[cidx], beta[cidx]);
                let off = start + ch * spatial;
                for i in off..off + spatial {
                    out[i] = (x[i] - mean_s) * rstd_s * ga + be;
                }
            }
            stats.mean.push(mean_s);
            stats.rstd.push(rstd_s);
        }
    }
    (out, stats)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<S: Real>(
    x: &[S],
    gamma: &[S],
    grad_out: &[S],
    stats: &GroupStats<S>,
    batch: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    mut grad_x: Option<&mut [S]>,
    mut grad_gamma: Option<&mut [S]>,
    mut grad_beta: Option<&mut [S]>,
) {
    let cg = c / groups;
    let inv_m = S::from_f64(1.0 / (cg * spatial) as f64);
    for n in 0..batch {
        for gi in 0..groups {
            let si = n * groups + gi;
            let (mean, rstd) = (stats.mean[si], stats.rstd[si]);
            let start = (n * c + gi * cg) * spatial;
            let mut sum_gxhat = S::ZERO;
            let mut sum_gxhat_xhat = S::ZERO;
            for ch in 0..cg {
                let cidx = gi * cg + ch;
                let off = start + ch * spatial;
                let mut g_gamma = S::ZERO;
                let mut g_beta = S::ZERO;
                for i in off..off + spatial {
                    let xhat = (x[i] - mean) * rstd;
                    let g = grad_out[i];
                    g_gamma += g * xhat;
                    g_beta += g;
                    let gxhat = g * gamma[cidx];
                    sum_gxhat += gxhat;
                    sum_gxhat_xhat += gxhat * xhat;
                }
                if let Some(gg) = grad_gamma.as_deref_mut() {
                    gg[cidx] += g_gamma;
                }
                if let Some(gb) = grad_beta.as_deref_mut() {
                    gb[cidx] += g_beta;
                }
            }
            if let Some(gx) = grad_x.as_deref_mut() {
                let mean_g = sum_gxhat * inv_m;
                let mean_gx = sum_gxhat_xhat * inv_m;
                for ch in 0..cg {
                    let cidx = gi * cg + ch;
                    let off = start + ch * spatial;
                    for i in off..off + spatial {
                        let xhat = (x[i] - mean) * rstd;
                        let gxhat = grad_out[i] * gamma[cidx];
                        gx[i] += rstd * (gxhat - mean_g - xhat * mean_gx);
                    }
                }
            }
        }
    }
}

/// Softmax along the middle axis of an `outer x n x inner` view.
pub(crate) fn softmax_forward<S: Real>(x: &[S], outer: usize, n: usize, inner: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut max = x[idx(0)];
            for j in 1..n {
                max = max.max(x[idx(j)]);
            }
            let mut total = S::ZERO;
            for j in 0..n {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<S: Real>(
    y: &[S],
    grad_out: &[S],
    outer: usize,
    n: usize,
    inner: usize,
    grad_x: &mut [S],
) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let dot: S = (0..n).map(|j| grad_out[idx(j)] * y[idx(j)]).sum();
            for j in 0..n {
                grad_x[idx(j)] += y[idx(j)] * (grad_out[idx(j)] - dot);
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast
/// source element in `in_shape`.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides(in_shape);
    // stride of the source along each output axis; zero where broadcast
    let mut eff = vec![0usize; rank];
    for i in 0..rank {
        if i + in_shape.len() >= rank {
            let j = i + in_shape.len() - rank;
            if in_shape[j] != 1 {
                eff[i] = in_strides[j];
            }
        }
    }
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// For every flat index of `shape`, the flat index in the reduced tensor
/// obtained by collapsing `axes` (mask).
pub(crate) fn reduce_map(shape: &[usize], reduced: &[bool]) -> (Vec<usize>, usize) {
    let kept: Vec<usize> = shape
        .iter()
        .zip(reduced)
        .map(|(&n, &r)| if r { 1 } else { n })
        .collect();
    let out_len = kept.iter().product();
    (broadcast_map(shape, &kept), out_len)
}

/// Source flat index for every destination flat index of a permutation:
/// `out.shape[i] = in.shape[perm[i]]`.
pub(crate) fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = in_shape.iter().product();
    let rank = perm.len();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..numel {
        map.push(src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}
