//! Reverse-mode differentiation by operation recording.
//!
//! Every primitive appends one node holding its output value and enough
//! bookkeeping to run its adjoint. `backward` walks the nodes in reverse and
//! never mutates the tape, so it may be replayed any number of times.

use super::kernels::{self, ConvGeom, GroupStats};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Sqrt,
    Sigmoid,
    Silu,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L2Norm,
}

/// Denominators smaller than this are rejected by `div`.
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    Affine { x: Var, scale: S },
    Clamp { x: Var, lo: S, hi: S },
    Reduce { kind: ReduceKind, x: Var, reduced: Vec<bool> },
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    AvgPool2(Var),
    Upsample2(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats<S> },
}

#[derive(Debug)]
struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of executed primitives. Single owner; build one per
/// forward pass.
#[derive(Debug, Default)]
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or `None` if `v` did not influence the loss.
    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Splits a rank-3 `[C,H,W]` or rank-4 `[N,C,H,W]` shape.
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, format!("expected [C,H,W] or [N,C,H,W], got {shape:?}"))),
    }
}

fn planes_of(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 axes, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn with_hw(shape: &[usize], h: usize, w: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    let r = s.len();
    s[r - 2] = h;
    s[r - 1] = w;
    s
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -----------------------------------------------------

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if kind == UnaryKind::Sqrt {
            if let Some(i) = xv.data().iter().position(|&v| v < S::ZERO) {
                return Err(Error::Domain {
                    op: "sqrt",
                    index: i,
                    detail: format!("negative input {}", xv.data()[i]),
                });
            }
        }
        let out = xv.map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Sqrt => v.sqrt(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Silu => v * sigmoid(v),
            UnaryKind::Abs => v.abs(),
            UnaryKind::Square => v * v,
        });
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, x)
    }
    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    /// Elementwise binary op with trailing-axis broadcasting; e.g. an
    /// `[H,W]` map against a `[3,H,W]` image.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = kernels::broadcast_shape(av.shape(), bv.shape()).ok_or_else(|| {
            Error::shape(
                "binary",
                format!("{kind:?}: shapes {:?} and {:?} do not broadcast", av.shape(), bv.shape()),
            )
        })?;
        let f = |x: S, y: S| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        if kind == BinaryKind::Div {
            let guard = S::from_f64(DIV_GUARD);
            if let Some(i) = bv.data().iter().position(|v| v.abs() < guard) {
                return Err(Error::Domain {
                    op: "div",
                    index: i,
                    detail: format!("denominator {} below guard {DIV_GUARD:e}", bv.data()[i]),
                });
            }
        }
        let data: Vec<S> = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = kernels::broadcast_map(&out_shape, av.shape());
            let mb = kernels::broadcast_map(&out_shape, bv.shape());
            ma.iter().zip(&mb).map(|(&i, &j)| f(av.data()[i], bv.data()[j])).collect()
        };
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// `x * scale + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (sc, sh) = (S::from_f64(scale), S::from_f64(shift));
        let out = self.value(x).map(|v| v * sc + sh);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Affine { x, scale: sc }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, 1.0, s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `s - x`.
    pub fn rsub_scalar(&mut self, s: f64, x: Var) -> Var {
        self.affine(x, -1.0, s)
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input lies in
    /// the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (S::from_f64(lo), S::from_f64(hi));
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    // ---- reductions --------------------------------------------------------

    /// Reduce over `axes`. With `keepdim` the reduced axes stay as extent 1.
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank || reduced[a] {
                return Err(Error::shape(
                    "reduce",
                    format!("invalid axis {a} for shape {:?}", xv.shape()),
                ));
            }
            reduced[a] = true;
        }
        let (map, out_len) = kernels::reduce_map(xv.shape(), &reduced);
        let mut acc = vec![S::ZERO; out_len];
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (&v, &o) in xv.data().iter().zip(&map) {
                    acc[o] += v;
                }
            }
            ReduceKind::L2Norm => {
                for (&v, &o) in xv.data().iter().zip(&map) {
                    acc[o] += v * v;
                }
            }
        }
        match kind {
            ReduceKind::Sum => {}
            ReduceKind::Mean => {
                let count = S::from_f64((xv.numel() / out_len.max(1)) as f64);
                acc.iter_mut().for_each(|v| *v /= count);
            }
            ReduceKind::L2Norm => acc.iter_mut().for_each(|v| *v = v.sqrt()),
        }
        let shape: Vec<usize> = xv
            .shape()
            .iter()
            .zip(&reduced)
            .filter_map(|(&n, &r)| match (r, keepdim) {
                (false, _) => Some(n),
                (true, true) => Some(1),
                (true, false) => None,
            })
            .collect();
        let out = Tensor::new(shape, acc)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reduce { kind, x, reduced }, rg))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceKind::Sum, x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(ReduceKind::Mean, x, &axes, false)
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {:?}", xv.shape())));
        }
        let (outer, n, inner) = Tensor::<S>::split_at_axis(xv.shape(), axis);
        let data = kernels::softmax_forward(xv.data(), outer, n, inner);
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    // ---- layout --------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let map = kernels::permute_map(xv.shape(), perm);
        let data = map.iter().map(|&i| xv.data()[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| xv.shape()[p]).collect();
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?);
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} for rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == rank
                && s.iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {:?} along axis {axis}", first.shape()),
                ));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = Tensor::<S>::split_at_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() || start + len > xv.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {:?}", start + len, xv.shape()),
            ));
        }
        let (outer, n, inner) = Tensor::<S>::split_at_axis(xv.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    // ---- linear algebra ------------------------------------------------------

    /// `[M,K] x [K,N]` or batched `[B,M,K] x [B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n, vec![*b1, *m, *n]),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![S::ZERO; batch * m * n];
        for p in 0..batch {
            super::real::matmul(
                &ad[p * m * k..(p + 1) * m * k],
                false,
                &bd[p * k * n..(p + 1) * k * n],
                false,
                &mut data[p * m * n..(p + 1) * m * n],
                m,
                k,
                n,
                false,
            );
        }
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::shape(
                    op,
                    format!("bias shape {:?}, expected [{channels}]", self.shape(b)),
                ));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation. `w` is `[C_out, C_in, k, k]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, wd) = image_dims("conv2d", &xs)?;
        let ws = self.shape(w).to_vec();
        let [c_out, c_in, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d", format!("weight must be [C_out,C_in,k,k], got {ws:?}")));
        };
        if k != k2 {
            return Err(Error::shape("conv2d", format!("non-square kernel {k}x{k2}")));
        }
        if c_in != c {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c} do not match weight C_in {c_in}"),
            ));
        }
        self.check_bias("conv2d", b, c_out)?;
        let geom = ConvGeom::new(c, h, wd, k, stride, padding).ok_or_else(|| {
            Error::shape("conv2d", format!("padded input {h}x{wd} (+{padding}) smaller than kernel {k}"))
        })?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            batch,
            c_out,
            &geom,
        );
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 3] = c_out;
        let out = Tensor::new(with_hw(&shape, geom.ho, geom.wo), data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    /// Transposed convolution, the adjoint of [`conv2d`](Self::conv2d) with
    /// the same weight. `w` is `[C_in, C_out, k, k]` where `C_in` is the
    /// channel count of `x`; output extent is `(H-1)*stride - 2*padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, wd) = image_dims("conv_transpose2d", &xs)?;
        let ws = self.shape(w).to_vec();
        let [c_in, c_out, k, k2] = ws[..] else {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight must be [C_in,C_out,k,k], got {ws:?}"),
            ));
        };
        if k != k2 {
            return Err(Error::shape("conv_transpose2d", format!("non-square kernel {k}x{k2}")));
        }
        if c_in != c {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input channels {c} do not match weight C_in {c_in}"),
            ));
        }
        if stride == 0 || (h - 1) * stride + k < 2 * padding + 1 || (wd - 1) * stride + k < 2 * padding + 1 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("stride {stride}/padding {padding} leave no output for {h}x{wd}, k={k}"),
            ));
        }
        self.check_bias("conv_transpose2d", b, c_out)?;
        let (ho, wo) = ((h - 1) * stride + k - 2 * padding, (wd - 1) * stride + k - 2 * padding);
        let geom = ConvGeom::new(c_out, ho, wo, k, stride, padding)
            .filter(|g| g.ho == h && g.wo == wd)
            .ok_or_else(|| Error::shape("conv_transpose2d", "inconsistent geometry"))?;
        let data = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            batch,
            c_in,
            &geom,
        );
        let mut shape = xs.clone();
        let r = shape.len();
        shape[r - 3] = c_out;
        let out = Tensor::new(with_hw(&shape, ho, wo), data)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom, batch }, rg))
    }

    // ---- resampling ------------------------------------------------------

    /// 2x2 mean pooling over the last two axes. Odd extents replicate the
    /// last row/column before pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (planes, h, w) = planes_of("avg_pool2", &xs)?;
        if h == 0 || w == 0 {
            return Err(Error::shape("avg_pool2", "empty spatial extent"));
        }
        let data = kernels::avg_pool2_forward(self.value(x).data(), planes, h, w);
        let out = Tensor::new(with_hw(&xs, h.div_ceil(2), w.div_ceil(2)), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour 2x upsampling over the last two axes.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (planes, h, w) = planes_of("upsample_nearest2", &xs)?;
        let data = kernels::upsample2_forward(self.value(x).data(), planes, h, w);
        let out = Tensor::new(with_hw(&xs, 2 * h, 2 * w), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Upsample2(x), rg))
    }

    /// Group normalization over `[C,H,W]` or `[N,C,H,W]`, with per-channel
    /// affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c, h, w) = image_dims("group_norm", &xs)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{c} channels not divisible into {groups} groups"),
            ));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    "group_norm",
                    format!("{name} shape {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        let (data, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            batch,
            c,
            h * w,
            groups,
            eps,
        );
        let out = Tensor::new(xs, data)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, rg))
    }

    // ---- reverse pass --------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf created
    /// with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::ONE]);
        }
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.node_backward(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        // Accumulate into the gradient slot of `v` if it needs one.
        let mut with_slot = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::ZERO; target.value.numel()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xd = val(*x).data();
                with_slot(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        let d = match kind {
                            UnaryKind::Neg => -S::ONE,
                            UnaryKind::Exp => y[i],
                            UnaryKind::Sqrt => {
                                if y[i] > S::ZERO {
                                    S::from_f64(0.5) / y[i]
                                } else {
                                    S::ZERO
                                }
                            }
                            UnaryKind::Sigmoid => y[i] * (S::ONE - y[i]),
                            UnaryKind::Silu => {
                                let s = sigmoid(xd[i]);
                                s + xd[i] * s * (S::ONE - s)
                            }
                            UnaryKind::Abs => sign(xd[i]),
                            UnaryKind::Square => S::from_f64(2.0) * xd[i],
                        };
                        gx[i] += g[i] * d;
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let out_shape = node.value.shape();
                let (av, bv) = (val(*a), val(*b));
                let same = av.shape() == out_shape && bv.shape() == out_shape;
                let (ma, mb) = if same {
                    (None, None)
                } else {
                    (
                        Some(kernels::broadcast_map(out_shape, av.shape())),
                        Some(kernels::broadcast_map(out_shape, bv.shape())),
                    )
                };
                let ia = |o: usize| ma.as_ref().map_or(o, |m| m[o]);
                let ib = |o: usize| mb.as_ref().map_or(o, |m| m[o]);
                let (ad, bd) = (av.data(), bv.data());
                with_slot(*a, &mut |ga| {
                    for o in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[o],
                            BinaryKind::Mul => g[o] * bd[ib(o)],
                            BinaryKind::Div => g[o] / bd[ib(o)],
                        };
                        ga[ia(o)] += d;
                    }
                });
                with_slot(*b, &mut |gb| {
                    for o in 0..g.len() {
                        let d = match kind {
                            BinaryKind::Add => g[o],
                            BinaryKind::Sub => -g[o],
                            BinaryKind::Mul => g[o] * ad[ia(o)],
                            BinaryKind::Div => {
                                let den = bd[ib(o)];
                                -g[o] * ad[ia(o)] / (den * den)
                            }
                        };
                        gb[ib(o)] += d;
                    }
                });
            }
            Op::Affine { x, scale } => with_slot(*x, &mut |gx| {
                for (gx, &g) in gx.iter_mut().zip(g) {
                    *gx += g * *scale;
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x).data();
                with_slot(*x, &mut |gx| {
                    for i in 0..gx.len() {
                        if xd[i] >= *lo && xd[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Reduce { kind, x, reduced } => {
                let xv = val(*x);
                let (map, out_len) = kernels::reduce_map(xv.shape(), reduced);
                let xd = xv.data();
                with_slot(*x, &mut |gx| match kind {
                    ReduceKind::Sum => {
                        for i in 0..gx.len() {
                            gx[i] += g[map[i]];
                        }
                    }
                    ReduceKind::Mean => {
                        let count = S::from_f64((xd.len() / out_len.max(1)) as f64);
                        for i in 0..gx.len() {
                            gx[i] += g[map[i]] / count;
                        }
                    }
                    ReduceKind::L2Norm => {
                        // subgradient 0 at the origin
                        for i in 0..gx.len() {
                            let norm = y[map[i]];
                            if norm > S::ZERO {
                                gx[i] += g[map[i]] * xd[i] / norm;
                            }
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = Tensor::<S>::split_at_axis(node.value.shape(), *axis);
                with_slot(*x, &mut |gx| kernels::softmax_backward(y, g, outer, n, inner, gx));
            }
            Op::Reshape(x) => with_slot(*x, &mut |gx| {
                for (gx, &g) in gx.iter_mut().zip(g) {
                    *gx += g;
                }
            }),
            Op::Permute { x, perm } => {
                let map = kernels::permute_map(val(*x).shape(), perm);
                with_slot(*x, &mut |gx| {
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += g[o];
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = Tensor::<S>::split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    with_slot(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, &s) in gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = Tensor::<S>::split_at_axis(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                with_slot(*x, &mut |gx| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (batch, m, k) = match *sa {
                    [m, k] => (1, m, k),
                    [bt, m, k] => (bt, m, k),
                    _ => unreachable!("validated in forward"),
                };
                let n = sb[sb.len() - 1];
                let (ad, bd) = (val(*a).data(), val(*b).data());
                with_slot(*a, &mut |ga| {
                    for p in 0..batch {
                        super::real::matmul(
                            &g[p * m * n..(p + 1) * m * n],
                            false,
                            &bd[p * k * n..(p + 1) * k * n],
                            true,
                            &mut ga[p * m * k..(p + 1) * m * k],
                            m,
                            n,
                            k,
                            true,
                        );
                    }
                });
                with_slot(*b, &mut |gb| {
                    for p in 0..batch {
                        super::real::matmul(
                            &ad[p * m * k..(p + 1) * m * k],
                            true,
                            &g[p * m * n..(p + 1) * m * n],
                            false,
                            &mut gb[p * k * n..(p + 1) * k * n],
                            k,
                            m,
                            n,
                            true,
                        );
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let c_out = val(*w).shape()[0];
                with_slot(*x, &mut |gx| {
                    kernels::conv2d_backward(xd, wd, g, *batch, c_out, geom, Some(gx), None, None)
                });
                with_slot(*w, &mut |gw| {
                    kernels::conv2d_backward(xd, wd, g, *batch, c_out, geom, None, Some(gw), None)
                });
                if let Some(b) = b {
                    with_slot(*b, &mut |gb| {
                        kernels::conv2d_backward(xd, wd, g, *batch, c_out, geom, None, None, Some(gb))
                    });
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, batch } => {
                let (xd, wd) = (val(*x).data(), val(*w).data());
                let c_in = val(*w).shape()[0];
                with_slot(*x, &mut |gx| {
                    kernels::conv_transpose2d_backward(xd, wd, g, *batch, c_in, geom, Some(gx), None, None)
                });
                with_slot(*w, &mut |gw| {
                    kernels::conv_transpose2d_backward(xd, wd, g, *batch, c_in, geom, None, Some(gw), None)
                });
                if let Some(b) = b {
                    with_slot(*b, &mut |gb| {
                        kernels::conv_transpose2d_backward(xd, wd, g, *batch, c_in, geom, None, None, Some(gb))
                    });
                }
            }
            Op::AvgPool2(x) => {
                let (planes, h, w) = planes_of("avg_pool2", val(*x).shape()).expect("validated");
                with_slot(*x, &mut |gx| kernels::avg_pool2_backward(g, planes, h, w, gx));
            }
            Op::Upsample2(x) => {
                let (planes, h, w) = planes_of("upsample_nearest2", val(*x).shape()).expect("validated");
                with_slot(*x, &mut |gx| kernels::upsample2_backward(g, planes, h, w, gx));
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let (batch, c, h, w) = image_dims("group_norm", val(*x).shape()).expect("validated");
                let (xd, gd) = (val(*x).data(), val(*gamma).data());
                let gn = |gx: Option<&mut [S]>, gg: Option<&mut [S]>, gb: Option<&mut [S]>| {
                    kernels::group_norm_backward(xd, gd, g, stats, batch, c, h * w, *groups, gx, gg, gb)
                };
                with_slot(*x, &mut |s| gn(Some(s), None, None));
                with_slot(*gamma, &mut |s| gn(None, Some(s), None));
                with_slot(*beta, &mut |s| gn(None, None, Some(s)));
            }
        }
    }
}

#[inline]
fn sigmoid<S: Real>(v: S) -> S {
    if v >= S::ZERO {
        S::ONE / (S::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::ONE + e)
    }
}

#[inline]
fn sign<S: Real>(v: S) -> S {
    if v > S::ZERO {
        S::ONE
    } else if v < S::ZERO {
        -S::ONE
    } else {
        S::ZERO
    }
}
