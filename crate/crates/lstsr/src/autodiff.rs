//! Reverse-mode automatic differentiation on dense NCHW tensors.
//!
//! The engine is a tape: every operation appends a node holding its computed
//! value, and [`Graph::backward`] sweeps the tape in reverse creation order,
//! accumulating gradients into each node's slot. Fan-out therefore sums
//! naturally, and each node is visited exactly once.
//!
//! Convolution has two forward paths, a direct loop nest and im2col + GEMM.
//! The GEMM accumulates every output element over k in the same sequential
//! order as the direct loops, so the two paths agree bit for bit in either
//! precision; tests pin that. Training runs in f32, gradient checks in f64,
//! via the [`Elem`] scalar abstraction.

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar element type for tensors: f32 for training, f64 for verification.
pub trait Elem:
    Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense 4D tensor in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Elem> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::ShapeMismatch(format!("empty shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], v: T) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_f64_slice(shape: [usize; 4], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn as_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, ch, hh, ww] = self.shape;
        self.data[((n * ch + c) * hh + h) * ww + w]
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which convolution forward path to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvImpl {
    Direct,
    Im2col,
}

/// Running statistics for one batch-normalization layer. Population (1/m)
/// variance throughout; `new` initializes to the identity transform
/// (mean 0, variance 1).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Elem> BnState<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::from_f64(momentum),
            eps: T::from_f64(eps),
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        stride: usize,
    },
    BatchNorm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Relu,
    Add,
    ConcatChannels,
    SliceChannels {
        from: usize,
        to: usize,
    },
    Sum,
    MseLoss,
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Sum of `f` over a slice using 32 independent accumulator lanes folded
/// in a fixed order at the end. Reproducible run to run, unlike a parallel
/// reduction, and an order of magnitude faster than a single serial chain.
fn lane_sum_map<T: Elem>(xs: &[T], f: impl Fn(T) -> T) -> T {
    const LB: usize = 32;
    let mut lanes = [T::zero(); LB];
    let mut it = xs.chunks_exact(LB);
    for ck in &mut it {
        for l in 0..LB {
            lanes[l] += f(ck[l]);
        }
    }
    for &v in it.remainder() {
        lanes[0] += f(v);
    }
    let mut s = T::zero();
    for &v in &lanes {
        s += v;
    }
    s
}

fn lane_sum<T: Elem>(xs: &[T]) -> T {
    lane_sum_map(xs, |v| v)
}

/// As [`lane_sum_map`] but over `f` of zipped pairs.
fn lane_sum2<T: Elem>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> T {
    const LB: usize = 32;
    let mut lanes = [T::zero(); LB];
    let mut ia = a.chunks_exact(LB);
    let mut ib = b.chunks_exact(LB);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        for l in 0..LB {
            lanes[l] += f(ca[l], cb[l]);
        }
    }
    for (&x, &y) in ia.remainder().iter().zip(ib.remainder()) {
        lanes[0] += f(x, y);
    }
    let mut s = T::zero();
    for &v in &lanes {
        s += v;
    }
    s
}

/// `c (m x n) += a (m x k) * b (k x n)`, with every `c[i][j]` accumulated
/// over k in increasing order (the axpy form), matching the direct
/// convolution loop nest element for element. Work runs over 4x32 register
/// tiles inside a column block so the strip of `b` it reads stays cache
/// resident; the blocking changes only the schedule, not any sum order.
fn gemm_axpy<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const JB: usize = 32;
    let mut j = 0;
    while j < n {
        let jb = JB.min(n - j);
        let mut i = 0;
        if jb == JB {
            while i + 4 <= m {
                let mut c0 = [T::zero(); JB];
                let mut c1 = [T::zero(); JB];
                let mut c2 = [T::zero(); JB];
                let mut c3 = [T::zero(); JB];
                c0.copy_from_slice(&c[i * n + j..i * n + j + JB]);
                c1.copy_from_slice(&c[(i + 1) * n + j..(i + 1) * n + j + JB]);
                c2.copy_from_slice(&c[(i + 2) * n + j..(i + 2) * n + j + JB]);
                c3.copy_from_slice(&c[(i + 3) * n + j..(i + 3) * n + j + JB]);
                for kk in 0..k {
                    let cb = &b[kk * n + j..kk * n + j + JB];
                    let w0 = a[i * k + kk];
                    let w1 = a[(i + 1) * k + kk];
                    let w2 = a[(i + 2) * k + kk];
                    let w3 = a[(i + 3) * k + kk];
                    for l in 0..JB {
                        c0[l] += w0 * cb[l];
                    }
                    for l in 0..JB {
                        c1[l] += w1 * cb[l];
                    }
                    for l in 0..JB {
                        c2[l] += w2 * cb[l];
                    }
                    for l in 0..JB {
                        c3[l] += w3 * cb[l];
                    }
                }
                c[i * n + j..i * n + j + JB].copy_from_slice(&c0);
                c[(i + 1) * n + j..(i + 1) * n + j + JB].copy_from_slice(&c1);
                c[(i + 2) * n + j..(i + 2) * n + j + JB].copy_from_slice(&c2);
                c[(i + 3) * n + j..(i + 3) * n + j + JB].copy_from_slice(&c3);
                i += 4;
            }
        }
        while i < m {
            let a_row = &a[i * k..(i + 1) * k];
            let c_row = &mut c[i * n + j..i * n + j + jb];
            for (kk, &aik) in a_row.iter().enumerate() {
                let b_chunk = &b[kk * n + j..kk * n + j + jb];
                for (cv, &bv) in c_row.iter_mut().zip(b_chunk) {
                    *cv += aik * bv;
                }
            }
            i += 1;
        }
        j += jb;
    }
}

/// `c (m x k) += a (m x n) * b^T (n x k)` where b is stored (k x n).
/// Dot products accumulate across 32 independent lanes, four rows of `a`
/// against one row of `b` at a time so each `b` load is reused, and the
/// lanes collapse in a fixed order at the end for reproducibility.
fn gemm_abt<T: Elem>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    const LB: usize = 32;
    const RB: usize = 8;
    let chunks = n / LB;
    let mut i = 0;
    while i + RB <= m {
        let ar: [&[T]; RB] = std::array::from_fn(|r| &a[(i + r) * n..(i + r + 1) * n]);
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut c0 = [T::zero(); LB];
            let mut c1 = [T::zero(); LB];
            let mut c2 = [T::zero(); LB];
            let mut c3 = [T::zero(); LB];
            let mut c4 = [T::zero(); LB];
            let mut c5 = [T::zero(); LB];
            let mut c6 = [T::zero(); LB];
            let mut c7 = [T::zero(); LB];
            for ch in 0..chunks {
                let o = ch * LB;
                let cb = &b_row[o..o + LB];
                let p0 = &ar[0][o..o + LB];
                let p1 = &ar[1][o..o + LB];
                let p2 = &ar[2][o..o + LB];
                let p3 = &ar[3][o..o + LB];
                let p4 = &ar[4][o..o + LB];
                let p5 = &ar[5][o..o + LB];
                let p6 = &ar[6][o..o + LB];
                let p7 = &ar[7][o..o + LB];
                for l in 0..LB {
                    c0[l] += p0[l] * cb[l];
                }
                for l in 0..LB {
                    c1[l] += p1[l] * cb[l];
                }
                for l in 0..LB {
                    c2[l] += p2[l] * cb[l];
                }
                for l in 0..LB {
                    c3[l] += p3[l] * cb[l];
                }
                for l in 0..LB {
                    c4[l] += p4[l] * cb[l];
                }
                for l in 0..LB {
                    c5[l] += p5[l] * cb[l];
                }
                for l in 0..LB {
                    c6[l] += p6[l] * cb[l];
                }
                for l in 0..LB {
                    c7[l] += p7[l] * cb[l];
                }
            }
            for j in chunks * LB..n {
                c0[0] += ar[0][j] * b_row[j];
                c1[0] += ar[1][j] * b_row[j];
                c2[0] += ar[2][j] * b_row[j];
                c3[0] += ar[3][j] * b_row[j];
                c4[0] += ar[4][j] * b_row[j];
                c5[0] += ar[5][j] * b_row[j];
                c6[0] += ar[6][j] * b_row[j];
                c7[0] += ar[7][j] * b_row[j];
            }
            let mut ss = [T::zero(); RB];
            for l in 0..LB {
                ss[0] += c0[l];
                ss[1] += c1[l];
                ss[2] += c2[l];
                ss[3] += c3[l];
                ss[4] += c4[l];
                ss[5] += c5[l];
                ss[6] += c6[l];
                ss[7] += c7[l];
            }
            for (r, &s) in ss.iter().enumerate() {
                c[(i + r) * k + kk] += s;
            }
        }
        i += RB;
    }
    while i < m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = [T::zero(); LB];
            let mut ita = a_row.chunks_exact(LB);
            let mut itb = b_row.chunks_exact(LB);
            for (ca, cb) in (&mut ita).zip(&mut itb) {
                for l in 0..LB {
                    acc[l] += ca[l] * cb[l];
                }
            }
            for (&av, &bv) in ita.remainder().iter().zip(itb.remainder()) {
                acc[0] += av * bv;
            }
            let mut s = T::zero();
            for &v in &acc {
                s += v;
            }
            c[i * k + kk] += s;
        }
        i += 1;
    }
}

/// `c (k x n) += a^T (k x m) * b (m x n)` where a is stored (m x k).
/// Column blocks of `b` stay cache resident while the full reduction over
/// m runs for four rows of `c` at a time, so `c` is written exactly once.
fn gemm_atb<T: Elem>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const JB: usize = 32;
    let mut j = 0;
    while j < n {
        let jb = JB.min(n - j);
        let mut kk = 0;
        if jb == JB {
            while kk + 4 <= k {
                let mut c0 = [T::zero(); JB];
                let mut c1 = [T::zero(); JB];
                let mut c2 = [T::zero(); JB];
                let mut c3 = [T::zero(); JB];
                c0.copy_from_slice(&c[kk * n + j..kk * n + j + JB]);
                c1.copy_from_slice(&c[(kk + 1) * n + j..(kk + 1) * n + j + JB]);
                c2.copy_from_slice(&c[(kk + 2) * n + j..(kk + 2) * n + j + JB]);
                c3.copy_from_slice(&c[(kk + 3) * n + j..(kk + 3) * n + j + JB]);
                for i in 0..m {
                    let cb = &b[i * n + j..i * n + j + JB];
                    let w0 = a[i * k + kk];
                    let w1 = a[i * k + kk + 1];
                    let w2 = a[i * k + kk + 2];
                    let w3 = a[i * k + kk + 3];
                    for l in 0..JB {
                        c0[l] += w0 * cb[l];
                    }
                    for l in 0..JB {
                        c1[l] += w1 * cb[l];
                    }
                    for l in 0..JB {
                        c2[l] += w2 * cb[l];
                    }
                    for l in 0..JB {
                        c3[l] += w3 * cb[l];
                    }
                }
                c[kk * n + j..kk * n + j + JB].copy_from_slice(&c0);
                c[(kk + 1) * n + j..(kk + 1) * n + j + JB].copy_from_slice(&c1);
                c[(kk + 2) * n + j..(kk + 2) * n + j + JB].copy_from_slice(&c2);
                c[(kk + 3) * n + j..(kk + 3) * n + j + JB].copy_from_slice(&c3);
                kk += 4;
            }
        }
        while kk < k {
            let c_row = &mut c[kk * n + j..kk * n + j + jb];
            for i in 0..m {
                let aik = a[i * k + kk];
                let b_chunk = &b[i * n + j..i * n + j + jb];
                for (cv, &bv) in c_row.iter_mut().zip(b_chunk) {
                    *cv += aik * bv;
                }
            }
            kk += 1;
        }
        j += jb;
    }
}

/// Transposed convolution when the kernel tiles the stride exactly
/// (`kh == kw == stride`): every output pixel receives exactly one tap, so
/// the op splits into kh*kw independent 1x1 convolutions, one per kernel
/// offset, each a small matrix product scattered to its output phase.
#[allow(clippy::too_many_arguments)]
fn convt_aligned_forward<T: Elem>(
    x: &[T],
    wv: &[T],
    bv: &[T],
    ic: usize,
    oc: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let oh = h * kh;
    let ow = w * kw;
    let mut wt = vec![T::zero(); oc * ic];
    let mut tmp = vec![T::zero(); oc * hw];
    for ky in 0..kh {
        for kx in 0..kw {
            let off = ky * kw + kx;
            for c in 0..oc {
                for cin in 0..ic {
                    wt[c * ic + cin] = wv[(cin * oc + c) * kh * kw + off];
                }
            }
            for c in 0..oc {
                tmp[c * hw..(c + 1) * hw].fill(bv[c]);
            }
            gemm_axpy(oc, ic, hw, &wt, x, &mut tmp);
            for c in 0..oc {
                for y in 0..h {
                    let trow = &tmp[c * hw + y * w..c * hw + (y + 1) * w];
                    let obase = (c * oh + y * kh + ky) * ow + kx;
                    for (x0, &v) in trow.iter().enumerate() {
                        out[obase + x0 * kw] = v;
                    }
                }
            }
        }
    }
}

/// Gather the output phase `dy[c, y*kh + ky, x*kw + kx]` into a contiguous
/// (oc x h*w) buffer. Inverse of the scatter in [`convt_aligned_forward`].
#[allow(clippy::too_many_arguments)]
fn convt_aligned_gather<T: Elem>(
    dy: &[T],
    oc: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ky: usize,
    kx: usize,
    out: &mut [T],
) {
    let hw = h * w;
    let oh = h * kh;
    let ow = w * kw;
    for c in 0..oc {
        for y in 0..h {
            let dbase = (c * oh + y * kh + ky) * ow + kx;
            let orow = &mut out[c * hw + y * w..c * hw + (y + 1) * w];
            for (x0, ov) in orow.iter_mut().enumerate() {
                *ov = dy[dbase + x0 * kw];
            }
        }
    }
}

fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Output positions `lo..hi` along one axis whose tap `o*stride + k - pad`
/// lands inside `0..len`.
fn tap_range(out_len: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride).min(out_len)
    } else {
        0
    };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Fill the im2col buffer for one sample: row `(ic*KH + ky)*KW + kx`,
/// column `oy*OW + ox`. Out-of-bounds taps are zero. Valid spans are
/// copied whole; every element of `col` is written.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Elem>(
    x: &[T],
    ic: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let cols = oh * ow;
    for c in 0..ic {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let out = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = tap_range(ow, w, stride, kx, pad);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let orow = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        orow.fill(T::zero());
                        continue;
                    }
                    let xrow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    orow[..lo].fill(T::zero());
                    orow[hi..].fill(T::zero());
                    let x0 = lo * stride + kx - pad;
                    if stride == 1 {
                        orow[lo..hi].copy_from_slice(&xrow[x0..x0 + (hi - lo)]);
                    } else {
                        for (d, ov) in orow[lo..hi].iter_mut().enumerate() {
                            *ov = xrow[x0 + d * stride];
                        }
                    }
                }
            }
        }
    }
}

pub struct Graph<T: Elem> {
    nodes: Vec<Node<T>>,
    conv_impl: ConvImpl,
}

impl<T: Elem> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self::with_conv_impl(ConvImpl::Im2col)
    }

    pub fn with_conv_impl(conv_impl: ConvImpl) -> Self {
        Self {
            nodes: Vec::new(),
            conv_impl,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. `needs_grad` marks it as a differentiation
    /// target (weights, biases); constants (batch data) pass `false`.
    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(Op::Leaf, vec![], value, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Extract a scalar node's value.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected scalar, got {:?}",
                t.shape()
            )));
        }
        Ok(t.data()[0].as_f64())
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// 2D convolution: `x (N,IC,H,W)`, `w (OC,IC,KH,KW)`, `b (1,OC,1,1)`,
    /// zero padding `pad`, output `(N,OC,OH,OW)` with
    /// `OH = (H + 2 pad - KH) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let [n, ic, h, wd] = self.value(x).shape();
        let [oc, wic, kh, kw] = self.value(w).shape();
        let bs = self.value(b).shape();
        if wic != ic {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: input has {ic} channels, kernel expects {wic}"
            )));
        }
        if bs != [1, oc, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias shape {bs:?}, expected [1, {oc}, 1, 1]"
            )));
        }
        let oh = conv_out_len(h, kh, stride, pad)?;
        let ow = conv_out_len(wd, kw, stride, pad)?;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros([n, oc, oh, ow]);
        let sample = ic * h * wd;
        let osample = oc * oh * ow;
        let cols = oh * ow;
        let kdim = ic * kh * kw;
        let conv_impl = self.conv_impl;
        out.data_mut()
            .par_chunks_mut(osample)
            .zip(xv.par_chunks(sample))
            .for_each_init(Vec::new, |col, (out_s, x_s)| match conv_impl {
                ConvImpl::Im2col => {
                    col.resize(kdim * cols, T::zero());
                    im2col(x_s, ic, h, wd, kh, kw, stride, pad, oh, ow, col);
                    for c in 0..oc {
                        out_s[c * cols..(c + 1) * cols].fill(bv[c]);
                    }
                    gemm_axpy(oc, kdim, cols, wv, col, out_s);
                }
                ConvImpl::Direct => {
                    for c in 0..oc {
                        let w_oc = &wv[c * kdim..(c + 1) * kdim];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bv[c];
                                for cin in 0..ic {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            acc += w_oc[(cin * kh + ky) * kw + kx]
                                                * x_s[(cin * h + iy as usize) * wd + ix as usize];
                                        }
                                    }
                                }
                                out_s[(c * oh + oy) * ow + ox] = acc;
                            }
                        }
                    }
                }
            });
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(Op::Conv2d { stride, pad }, vec![x, w, b], out, needs))
    }

    /// Transposed 2D convolution: `x (N,IC,H,W)`, `w (IC,OC,KH,KW)`,
    /// `b (1,OC,1,1)`, no padding, output `(N,OC,(H-1)s+KH,(W-1)s+KW)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let [n, ic, h, wd] = self.value(x).shape();
        let [wic, oc, kh, kw] = self.value(w).shape();
        let bs = self.value(b).shape();
        if wic != ic {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d: input has {ic} channels, kernel expects {wic}"
            )));
        }
        if bs != [1, oc, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d: bias shape {bs:?}, expected [1, {oc}, 1, 1]"
            )));
        }
        let oh = (h - 1) * stride + kh;
        let ow = (wd - 1) * stride + kw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros([n, oc, oh, ow]);
        let sample = ic * h * wd;
        let osample = oc * oh * ow;
        out.data_mut()
            .par_chunks_mut(osample)
            .zip(xv.par_chunks(sample))
            .for_each(|(out_s, x_s)| {
                if kh == stride && kw == stride {
                    convt_aligned_forward(x_s, wv, bv, ic, oc, h, wd, kh, kw, out_s);
                    return;
                }
                for c in 0..oc {
                    out_s[c * oh * ow..(c + 1) * oh * ow].fill(bv[c]);
                }
                for cin in 0..ic {
                    for y in 0..h {
                        for x0 in 0..wd {
                            let v = x_s[(cin * h + y) * wd + x0];
                            for c in 0..oc {
                                let w_base = (cin * oc + c) * kh * kw;
                                for ky in 0..kh {
                                    let oy = y * stride + ky;
                                    for kx in 0..kw {
                                        out_s[(c * oh + oy) * ow + x0 * stride + kx] +=
                                            v * wv[w_base + ky * kw + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(Op::ConvTranspose2d { stride }, vec![x, w, b], out, needs))
    }

    /// Batch normalization over (N,H,W) per channel. In training mode the
    /// batch's biased statistics normalize the input and update `state`'s
    /// running statistics with its momentum; in eval mode the running
    /// statistics are used and `state` is untouched.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        training: bool,
    ) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if self.value(gamma).shape() != [1, c, 1, 1] || self.value(beta).shape() != [1, c, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d: gamma/beta must be [1, {c}, 1, 1]"
            )));
        }
        if state.running_mean.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d: state has {} channels, input {c}",
                state.running_mean.len()
            )));
        }
        let m = (n * h * w) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let plane = h * w;
        let mut xhat = Tensor::zeros([n, c, h, w]);
        let mut out = Tensor::zeros([n, c, h, w]);
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let (mean, var) = if training {
                let mut sum = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    sum += lane_sum(&xv[base..base + plane]);
                }
                let mean = sum / T::from_f64(m);
                let mut var = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * plane;
                    var += lane_sum_map(&xv[base..base + plane], |v| {
                        let d = v - mean;
                        d * d
                    });
                }
                let var = var / T::from_f64(m);
                let mom = state.momentum;
                state.running_mean[ch] = (T::one() - mom) * state.running_mean[ch] + mom * mean;
                state.running_var[ch] = (T::one() - mom) * state.running_var[ch] + mom * var;
                (mean, var)
            } else {
                (state.running_mean[ch], state.running_var[ch])
            };
            let istd = T::one() / (var + state.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (gv[ch], bv[ch]);
            for s in 0..n {
                let base = (s * c + ch) * plane;
                let xs = &xv[base..base + plane];
                let hseg = &mut xhat.data_mut()[base..base + plane];
                let oseg = &mut out.data_mut()[base..base + plane];
                for ((hv, ov), &xval) in hseg.iter_mut().zip(oseg.iter_mut()).zip(xs) {
                    let v = (xval - mean) * istd;
                    *hv = v;
                    *ov = g * v + b;
                }
            }
        }
        let needs = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                xhat,
                inv_std,
                training,
            },
            vec![x, gamma, beta],
            out,
            needs,
        ))
    }

    /// Elementwise max(0, x). The subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape();
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let needs = self.any_grad(&[x]);
        self.push(Op::Relu, vec![x], Tensor { shape, data }, needs)
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("add: {sa:?} vs {sb:?}")));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add, vec![a, b], Tensor { shape: sa, data }, needs))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).shape();
        let [nb, cb, hb, wb] = self.value(b).shape();
        if na != nb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch(format!(
                "concat_channels: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = ha * wa;
        let mut out = Tensor::zeros([na, ca + cb, ha, wa]);
        for s in 0..na {
            let dst = &mut out.data_mut()[s * (ca + cb) * plane..(s + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(
                &self.nodes[a.0].value.data()[s * ca * plane..(s + 1) * ca * plane],
            );
            dst[ca * plane..].copy_from_slice(
                &self.nodes[b.0].value.data()[s * cb * plane..(s + 1) * cb * plane],
            );
        }
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(Op::ConcatChannels, vec![a, b], out, needs))
    }

    /// Copy channels `from..to`.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).shape();
        if from >= to || to > c {
            return Err(Error::InvalidArgument(format!(
                "slice_channels: range {from}..{to} invalid for {c} channels"
            )));
        }
        let plane = h * w;
        let sub = to - from;
        let mut out = Tensor::zeros([n, sub, h, w]);
        for s in 0..n {
            let src = &self.nodes[x.0].value.data()[(s * c + from) * plane..(s * c + to) * plane];
            out.data_mut()[s * sub * plane..(s + 1) * sub * plane].copy_from_slice(src);
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(Op::SliceChannels { from, to }, vec![x], out, needs))
    }

    /// Sum all elements to a scalar (shape [1,1,1,1]).
    pub fn sum(&mut self, x: Var) -> Var {
        let acc = lane_sum(self.value(x).data());
        let needs = self.any_grad(&[x]);
        self.push(
            Op::Sum,
            vec![x],
            Tensor {
                shape: [1, 1, 1, 1],
                data: vec![acc],
            },
            needs,
        )
    }

    /// Mean squared error between two same-shaped tensors, as a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.value(pred).shape(), self.value(target).shape());
        if sp != st {
            return Err(Error::ShapeMismatch(format!("mse_loss: {sp:?} vs {st:?}")));
        }
        let acc = lane_sum2(
            self.value(pred).data(),
            self.value(target).data(),
            |p, t| {
                let d = p - t;
                d * d
            },
        );
        let loss = acc / T::from_f64(self.value(pred).numel() as f64);
        let needs = self.any_grad(&[pred, target]);
        Ok(self.push(
            Op::MseLoss,
            vec![pred, target],
            Tensor {
                shape: [1, 1, 1, 1],
                data: vec![loss],
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Returns the gradient table and the
    /// number of nodes visited (each reachable node exactly once).
    pub fn backward(&self, loss: Var) -> Result<(Grads<T>, usize)> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch(
                "backward requires a scalar loss".into(),
            ));
        }
        let mut slots: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::full([1, 1, 1, 1], T::one()));
        let mut visited = 0usize;
        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = slots[i].take() else {
                continue;
            };
            visited += 1;
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    slots[i] = Some(grad);
                }
                Op::Relu => {
                    let x = node.inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor::zeros(self.value(x).shape());
                        for ((d, &g), &xv) in dx
                            .data_mut()
                            .iter_mut()
                            .zip(grad.data())
                            .zip(self.value(x).data())
                        {
                            if xv > T::zero() {
                                *d = g;
                            }
                        }
                        accumulate(&mut slots[x.0], dx);
                    }
                }
                Op::Add => {
                    for &inp in &node.inputs {
                        if self.nodes[inp.0].needs_grad {
                            accumulate(&mut slots[inp.0], grad.clone());
                        }
                    }
                }
                Op::Sum => {
                    let x = node.inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let g = grad.data()[0];
                        accumulate(&mut slots[x.0], Tensor::full(self.value(x).shape(), g));
                    }
                }
                Op::MseLoss => {
                    let (p, t) = (node.inputs[0], node.inputs[1]);
                    let scale = grad.data()[0] * T::from_f64(2.0 / self.value(p).numel() as f64);
                    if self.nodes[p.0].needs_grad {
                        let mut dp = Tensor::zeros(self.value(p).shape());
                        for ((d, &pv), &tv) in dp
                            .data_mut()
                            .iter_mut()
                            .zip(self.value(p).data())
                            .zip(self.value(t).data())
                        {
                            *d = scale * (pv - tv);
                        }
                        accumulate(&mut slots[p.0], dp);
                    }
                    if self.nodes[t.0].needs_grad {
                        let mut dt = Tensor::zeros(self.value(t).shape());
                        for ((d, &pv), &tv) in dt
                            .data_mut()
                            .iter_mut()
                            .zip(self.value(p).data())
                            .zip(self.value(t).data())
                        {
                            *d = -scale * (pv - tv);
                        }
                        accumulate(&mut slots[t.0], dt);
                    }
                }
                Op::ConcatChannels => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let [n, ca, h, w] = self.value(a).shape();
                    let cb = self.value(b).shape()[1];
                    let plane = h * w;
                    if self.nodes[a.0].needs_grad {
                        let mut da = Tensor::zeros(self.value(a).shape());
                        for s in 0..n {
                            da.data_mut()[s * ca * plane..(s + 1) * ca * plane].copy_from_slice(
                                &grad.data()
                                    [s * (ca + cb) * plane..s * (ca + cb) * plane + ca * plane],
                            );
                        }
                        accumulate(&mut slots[a.0], da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = Tensor::zeros(self.value(b).shape());
                        for s in 0..n {
                            db.data_mut()[s * cb * plane..(s + 1) * cb * plane].copy_from_slice(
                                &grad.data()[s * (ca + cb) * plane + ca * plane
                                    ..(s + 1) * (ca + cb) * plane],
                            );
                        }
                        accumulate(&mut slots[b.0], db);
                    }
                }
                Op::SliceChannels { from, to } => {
                    let x = node.inputs[0];
                    if self.nodes[x.0].needs_grad {
                        let [n, c, h, w] = self.value(x).shape();
                        let plane = h * w;
                        let sub = to - from;
                        let mut dx = Tensor::zeros([n, c, h, w]);
                        for s in 0..n {
                            dx.data_mut()[(s * c + from) * plane..(s * c + to) * plane]
                                .copy_from_slice(
                                    &grad.data()[s * sub * plane..(s + 1) * sub * plane],
                                );
                        }
                        accumulate(&mut slots[x.0], dx);
                    }
                }
                Op::BatchNorm {
                    xhat,
                    inv_std,
                    training,
                } => {
                    let (x, gamma, beta) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    let [n, c, h, w] = self.value(x).shape();
                    let plane = h * w;
                    let m = (n * plane) as f64;
                    let gv = self.value(gamma).data();
                    let mut sum_dy = vec![T::zero(); c];
                    let mut sum_dy_xhat = vec![T::zero(); c];
                    for ch in 0..c {
                        for s in 0..n {
                            let base = (s * c + ch) * plane;
                            let gseg = &grad.data()[base..base + plane];
                            sum_dy[ch] += lane_sum(gseg);
                            sum_dy_xhat[ch] +=
                                lane_sum2(gseg, &xhat.data()[base..base + plane], |g, xh| g * xh);
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = Tensor::zeros([n, c, h, w]);
                        for ch in 0..c {
                            let gs = gv[ch] * inv_std[ch];
                            if *training {
                                let inv_m = T::from_f64(1.0 / m);
                                let mf = T::from_f64(m);
                                for s in 0..n {
                                    let base = (s * c + ch) * plane;
                                    let gseg = &grad.data()[base..base + plane];
                                    let hseg = &xhat.data()[base..base + plane];
                                    let dseg = &mut dx.data_mut()[base..base + plane];
                                    for ((d, &g), &xh) in dseg.iter_mut().zip(gseg).zip(hseg) {
                                        *d = gs
                                            * inv_m
                                            * (mf * g - sum_dy[ch] - xh * sum_dy_xhat[ch]);
                                    }
                                }
                            } else {
                                for s in 0..n {
                                    let base = (s * c + ch) * plane;
                                    let gseg = &grad.data()[base..base + plane];
                                    let dseg = &mut dx.data_mut()[base..base + plane];
                                    for (d, &g) in dseg.iter_mut().zip(gseg) {
                                        *d = gs * g;
                                    }
                                }
                            }
                        }
                        accumulate(&mut slots[x.0], dx);
                    }
                    if self.nodes[gamma.0].needs_grad {
                        accumulate(
                            &mut slots[gamma.0],
                            Tensor {
                                shape: [1, c, 1, 1],
                                data: sum_dy_xhat,
                            },
                        );
                    }
                    if self.nodes[beta.0].needs_grad {
                        accumulate(
                            &mut slots[beta.0],
                            Tensor {
                                shape: [1, c, 1, 1],
                                data: sum_dy,
                            },
                        );
                    }
                }
                Op::Conv2d { stride, pad } => {
                    let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    self.conv2d_backward(x, w, b, *stride, *pad, &grad, &mut slots);
                }
                Op::ConvTranspose2d { stride } => {
                    let (x, w, b) = (node.inputs[0], node.inputs[1], node.inputs[2]);
                    self.conv_transpose2d_backward(x, w, b, *stride, &grad, &mut slots);
                }
            }
        }
        Ok((Grads { slots }, visited))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        dy: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
    ) {
        let [n, ic, h, wd] = self.value(x).shape();
        let [oc, _, kh, kw] = self.value(w).shape();
        let [_, _, oh, ow] = dy.shape();
        let plane = oh * ow;
        let kdim = ic * kh * kw;
        let xv = self.value(x).data();
        let wv = self.value(w).data();

        if self.nodes[b.0].needs_grad {
            let mut db = Tensor::zeros([1, oc, 1, 1]);
            for s in 0..n {
                for c in 0..oc {
                    let base = (s * oc + c) * plane;
                    db.data_mut()[c] += lane_sum(&dy.data()[base..base + plane]);
                }
            }
            accumulate(&mut slots[b.0], db);
        }

        let want_dw = self.nodes[w.0].needs_grad;
        let want_dx = self.nodes[x.0].needs_grad;
        if !want_dw && !want_dx {
            return;
        }

        // Per-sample partials computed independently, then reduced in sample
        // order so the result is identical for any worker count.
        let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map_init(
                || (Vec::new(), Vec::new()),
                |(col, colg), s| {
                    let x_s = &xv[s * ic * h * wd..(s + 1) * ic * h * wd];
                    let dy_s = &dy.data()[s * oc * plane..(s + 1) * oc * plane];
                    col.resize(kdim * plane, T::zero());
                    im2col(x_s, ic, h, wd, kh, kw, stride, pad, oh, ow, col);
                    let dw_s = want_dw.then(|| {
                        let mut dw = vec![T::zero(); oc * kdim];
                        gemm_abt(oc, plane, kdim, dy_s, col, &mut dw);
                        dw
                    });
                    let dx_s = want_dx.then(|| {
                        colg.clear();
                        colg.resize(kdim * plane, T::zero());
                        gemm_atb(oc, kdim, plane, wv, dy_s, colg);
                        let mut dx = vec![T::zero(); ic * h * wd];
                        for c in 0..ic {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let row = (c * kh + ky) * kw + kx;
                                    let rowg = &colg[row * plane..(row + 1) * plane];
                                    let (lo, hi) = tap_range(ow, wd, stride, kx, pad);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let x0 = lo * stride + kx - pad;
                                    for oy in 0..oh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let grow = &rowg[oy * ow + lo..oy * ow + hi];
                                        let xrow = &mut dx[(c * h + iy as usize) * wd
                                            ..(c * h + iy as usize + 1) * wd];
                                        if stride == 1 {
                                            for (xv, &gv) in
                                                xrow[x0..x0 + (hi - lo)].iter_mut().zip(grow)
                                            {
                                                *xv += gv;
                                            }
                                        } else {
                                            for (d, &gv) in grow.iter().enumerate() {
                                                xrow[x0 + d * stride] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dx
                    });
                    (dw_s, dx_s)
                },
            )
            .collect();

        if want_dw {
            let mut dw = Tensor::zeros(self.value(w).shape());
            for (dw_s, _) in &partials {
                for (acc, &p) in dw.data_mut().iter_mut().zip(dw_s.as_ref().unwrap()) {
                    *acc += p;
                }
            }
            accumulate(&mut slots[w.0], dw);
        }
        if want_dx {
            let mut dx = Tensor::zeros([n, ic, h, wd]);
            for (s, (_, dx_s)) in partials.iter().enumerate() {
                dx.data_mut()[s * ic * h * wd..(s + 1) * ic * h * wd]
                    .copy_from_slice(dx_s.as_ref().unwrap());
            }
            accumulate(&mut slots[x.0], dx);
        }
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dy: &Tensor<T>,
        slots: &mut [Option<Tensor<T>>],
    ) {
        let [n, ic, h, wd] = self.value(x).shape();
        let [_, oc, kh, kw] = self.value(w).shape();
        let [_, _, oh, ow] = dy.shape();
        let xv = self.value(x).data();
        let wv = self.value(w).data();

        if self.nodes[b.0].needs_grad {
            let mut db = Tensor::zeros([1, oc, 1, 1]);
            for s in 0..n {
                for c in 0..oc {
                    let base = (s * oc + c) * oh * ow;
                    db.data_mut()[c] += lane_sum(&dy.data()[base..base + oh * ow]);
                }
            }
            accumulate(&mut slots[b.0], db);
        }
        let aligned = kh == stride && kw == stride;
        if self.nodes[x.0].needs_grad {
            let mut dx = Tensor::zeros([n, ic, h, wd]);
            if aligned {
                let mut wt = vec![T::zero(); ic * oc];
                let mut sub = vec![T::zero(); oc * h * wd];
                for s in 0..n {
                    let dy_s = &dy.data()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
                    let dx_s = &mut dx.data_mut()[s * ic * h * wd..(s + 1) * ic * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let off = ky * kw + kx;
                            for cin in 0..ic {
                                for c in 0..oc {
                                    wt[cin * oc + c] = wv[(cin * oc + c) * kh * kw + off];
                                }
                            }
                            convt_aligned_gather(dy_s, oc, h, wd, kh, kw, ky, kx, &mut sub);
                            gemm_axpy(ic, oc, h * wd, &wt, &sub, dx_s);
                        }
                    }
                }
            } else {
                for s in 0..n {
                    let dy_s = &dy.data()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
                    for cin in 0..ic {
                        for y in 0..h {
                            for x0 in 0..wd {
                                let mut acc = T::zero();
                                for c in 0..oc {
                                    let w_base = (cin * oc + c) * kh * kw;
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            acc += wv[w_base + ky * kw + kx]
                                                * dy_s[(c * oh + y * stride + ky) * ow
                                                    + x0 * stride
                                                    + kx];
                                        }
                                    }
                                }
                                dx.data_mut()[((s * ic + cin) * h + y) * wd + x0] = acc;
                            }
                        }
                    }
                }
            }
            accumulate(&mut slots[x.0], dx);
        }
        if self.nodes[w.0].needs_grad {
            let mut dw = Tensor::zeros(self.value(w).shape());
            if aligned {
                let mut sub = vec![T::zero(); oc * h * wd];
                let mut dwsub = vec![T::zero(); ic * oc];
                for s in 0..n {
                    let dy_s = &dy.data()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
                    let x_s = &xv[s * ic * h * wd..(s + 1) * ic * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let off = ky * kw + kx;
                            convt_aligned_gather(dy_s, oc, h, wd, kh, kw, ky, kx, &mut sub);
                            dwsub.fill(T::zero());
                            gemm_abt(ic, h * wd, oc, x_s, &sub, &mut dwsub);
                            for cin in 0..ic {
                                for c in 0..oc {
                                    dw.data_mut()[(cin * oc + c) * kh * kw + off] +=
                                        dwsub[cin * oc + c];
                                }
                            }
                        }
                    }
                }
            } else {
                for s in 0..n {
                    let dy_s = &dy.data()[s * oc * oh * ow..(s + 1) * oc * oh * ow];
                    for cin in 0..ic {
                        for c in 0..oc {
                            let w_base = (cin * oc + c) * kh * kw;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut acc = T::zero();
                                    for y in 0..h {
                                        for x0 in 0..wd {
                                            acc += xv[((s * ic + cin) * h + y) * wd + x0]
                                                * dy_s[(c * oh + y * stride + ky) * ow
                                                    + x0 * stride
                                                    + kx];
                                        }
                                    }
                                    dw.data_mut()[w_base + ky * kw + kx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            accumulate(&mut slots[w.0], dw);
        }
    }
}

fn accumulate<T: Elem>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Adam optimizer with bias correction. Learning rate is public so schedules
/// can adjust it between steps.
pub struct Adam<T> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    state: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Elem> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: Vec::new(),
        }
    }

    /// One update over parallel slices of parameters and their gradients.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "Adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                .collect();
        }
        if self.state.len() != params.len() {
            return Err(Error::InvalidArgument(
                "Adam: parameter count changed between steps".into(),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ib1, ib2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let (c1, c2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.state.iter_mut()) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "Adam: parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + ib1 * gv;
                *vv = b2 * *vv + ib2 * gv * gv;
                let mhat = *mv * c1;
                let vhat = *vv * c2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Result of a finite-difference gradient verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Verify analytic gradients against central finite differences in f64.
///
/// `build` must construct the scalar loss from leaves registered in the given
/// order, and must be pure: called repeatedly with perturbed inputs (any
/// internal state such as batch-norm running statistics must be created fresh
/// inside the closure). Checks up to `samples_per_input` coordinates per
/// input, drawn without replacement from a seeded stream. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-8)`, except that coordinates agreeing within
/// 1e-9 absolute count as exact: the central-difference estimator has a
/// rounding floor of roughly `eps * |loss| / h`, and gradients that are
/// mathematically zero (a conv bias ahead of batch norm, cancelled by the
/// mean subtraction) sit below it on both sides.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor<f64>],
    samples_per_input: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (graph, vars, loss) = eval(inputs)?;
    let (grads, _) = graph.backward(loss)?;

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, tensor) in inputs.iter().enumerate() {
        let k = samples_per_input.min(tensor.numel());
        let picks = rand::seq::index::sample(&mut rng, tensor.numel(), k);
        for idx in picks.iter() {
            let analytic = grads.get(vars[ti]).map(|g| g.data()[idx]).unwrap_or(0.0);
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[idx] += h;
            let (gp, _, lp) = eval(&plus)?;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[idx] -= h;
            let (gm, _, lm) = eval(&minus)?;
            let numeric = (gp.scalar(lp)? - gm.scalar(lm)?) / (2.0 * h);
            let diff = (analytic - numeric).abs();
            let rel = if diff <= 1e-9 {
                0.0
            } else {
                diff / analytic.abs().max(numeric.abs()).max(1e-8)
            };
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}
