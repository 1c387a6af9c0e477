//! Forward and backward kernels for the layer primitives. These work on
//! plain tensors; [`crate::autodiff`] wires them into the tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::{matmul, matmul_strided, Real};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

const LANES: usize = 8;

/// Elements per im2col tile in the forward convolution.
const COL_TILE: usize = 1 << 16;

/// Sum with independent partial accumulators so the loop vectorises.
#[inline]
pub(crate) fn sum_lanes<T: Real>(v: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = v.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail.iter().copied().sum::<T>()
}

#[inline]
pub(crate) fn dot_lanes<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `Σ v` and `Σ (v - m)²` accumulated in f64.
fn moments_f64<T: Real>(v: &[T], m: f64) -> (f64, f64) {
    let mut s = [0.0f64; LANES];
    let mut q = [0.0f64; LANES];
    let chunks = v.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let x = c[l].as_f64();
            s[l] += x;
            let d = x - m;
            q[l] += d * d;
        }
    }
    let (mut ts, mut tq) = (s.iter().sum::<f64>(), q.iter().sum::<f64>());
    for &x in tail {
        let x = x.as_f64();
        ts += x;
        tq += (x - m) * (x - m);
    }
    (ts, tq)
}
pub const BN_MOMENTUM: f64 = 0.1;

/// Geometry of a 2-D convolution. Depthwise is `groups == in == out`,
/// pointwise is a `(1,1)` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: (1, 1),
            padding: (k / 2, k / 2),
            dilation: (1, 1),
            groups: 1,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    /// Shape-preserving 3×3 depthwise conv with the given dilation.
    pub fn depthwise(channels: usize, dilation: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (dilation, dilation),
            dilation: (dilation, dilation),
            groups: channels,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.groups > 0
            && self.kernel.0 > 0
            && self.kernel.1 > 0
            && self.stride.0 > 0
            && self.stride.1 > 0
            && self.dilation.0 > 0
            && self.dilation.1 > 0;
        if !ok {
            return Err(Error::Geometry { op: "conv2d", detail: format!("degenerate spec {self:?}") });
        }
        if !self.in_channels.is_multiple_of(self.groups) {
            return Err(Error::Divisibility { op: "conv2d", channels: self.in_channels, parts: self.groups });
        }
        if !self.out_channels.is_multiple_of(self.groups) {
            return Err(Error::Divisibility { op: "conv2d", channels: self.out_channels, parts: self.groups });
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels / self.groups, self.kernel.0, self.kernel.1)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    fn is_plain_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }

    /// Number of weights (+ bias when requested).
    pub fn param_count(&self, bias: bool) -> usize {
        self.weight_shape().len() + if bias { self.out_channels } else { 0 }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let dim = |size: usize, k: usize, s: usize, p: usize, d: usize| -> Option<usize> {
            let num = size as isize + 2 * p as isize - (d * (k - 1)) as isize - 1;
            if num < 0 {
                None
            } else {
                Some(num as usize / s + 1)
            }
        };
        match (
            dim(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0),
            dim(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1),
        ) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::Geometry {
                op: "conv2d",
                detail: format!("input {h}x{w} too small for kernel {:?} dilation {:?}", self.kernel, self.dilation),
            }),
        }
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        self.validate()?;
        if x.c != self.in_channels {
            return Err(Error::Shape {
                op: "conv2d",
                left: x,
                right: Shape::new(x.n, self.in_channels, x.h, x.w),
            });
        }
        let (ho, wo) = self.output_hw(x.h, x.w)?;
        Ok(Shape::new(x.n, self.out_channels, ho, wo))
    }

    /// Multiply-accumulates for one forward pass at the given input shape.
    pub fn macs(&self, x: Shape) -> Result<u64> {
        let out = self.output_shape(x)?;
        Ok(out.len() as u64
            * (self.in_channels / self.groups) as u64
            * (self.kernel.0 * self.kernel.1) as u64)
    }

    fn check(&self, x: Shape, w: Shape, b: Option<Shape>) -> Result<Shape> {
        let out = self.output_shape(x)?;
        if w != self.weight_shape() {
            return Err(Error::Shape { op: "conv2d weight", left: self.weight_shape(), right: w });
        }
        if let Some(b) = b {
            if b != self.bias_shape() {
                return Err(Error::Shape { op: "conv2d bias", left: self.bias_shape(), right: b });
            }
        }
        Ok(out)
    }
}

/// Output positions `o` in `[lo, hi)` with `0 <= o*stride - pad + offset < len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
    let shift = offset as isize - pad as isize;
    let lo = if shift >= 0 { 0 } else { ((-shift) as usize).div_ceil(stride) };
    let last = in_len as isize - 1 - shift;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Unfold one group of channels into a `(cin*kh*kw) x (ho*wo)` matrix.
fn im2col<T: Real>(src: &[T], cin: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, cols: &mut [T]) {
    im2col_rows(src, cin, h, w, spec, (0, ho), wo, cols)
}

/// [`im2col`] restricted to output rows `rows.0..rows.1`; `cols` is
/// `(cin*kh*kw) x ((rows.1-rows.0)*wo)`.
#[allow(clippy::too_many_arguments)]
fn im2col_rows<T: Real>(src: &[T], cin: usize, h: usize, w: usize, spec: &ConvSpec, rows: (usize, usize), wo: usize, cols: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let (r0, r1) = rows;
    let p = (r1 - r0) * wo;
    for ci in 0..cin {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((ci * kh + i) * kw + j) * p..][..p];
                let (lo, hi) = valid_range(r1, h, sh, ph, i * dh);
                let (oh_lo, oh_hi) = (lo.max(r0), hi.max(r0));
                let (ow_lo, ow_hi) = valid_range(wo, w, sw, pw, j * dw);
                row[..(oh_lo - r0) * wo].fill(T::zero());
                row[(oh_hi.max(oh_lo) - r0) * wo..].fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * sh + i * dh - ph;
                    let dst = &mut row[(oh - r0) * wo..(oh - r0 + 1) * wo];
                    dst[..ow_lo].fill(T::zero());
                    dst[ow_hi.max(ow_lo)..].fill(T::zero());
                    let src_row = &plane[ih * w..(ih + 1) * w];
                    if sw == 1 {
                        let iw0 = ow_lo + j * dw - pw;
                        dst[ow_lo..ow_hi].copy_from_slice(&src_row[iw0..iw0 + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            dst[ow] = src_row[ow * sw + j * dw - pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, spec: &ConvSpec, ho: usize, wo: usize, dst: &mut [T]) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let p = ho * wo;
    for ci in 0..cin {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((ci * kh + i) * kw + j) * p..][..p];
                let (oh_lo, oh_hi) = valid_range(ho, h, sh, ph, i * dh);
                let (ow_lo, ow_hi) = valid_range(wo, w, sw, pw, j * dw);
                for oh in oh_lo..oh_hi {
                    let ih = oh * sh + i * dh - ph;
                    let src = &row[oh * wo..(oh + 1) * wo];
                    let out_row = &mut plane[ih * w..(ih + 1) * w];
                    for ow in ow_lo..ow_hi {
                        out_row[ow * sw + j * dw - pw] += src[ow];
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, stride, dilation and groups.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let out_shape = spec.check(xs, weight.shape(), bias.map(|b| b.shape()))?;
    let mut out = Tensor::zeros(out_shape);
    let (ho, wo) = (out_shape.h, out_shape.w);
    if spec.is_depthwise() {
        depthwise_forward(x, spec, weight, &mut out);
    } else {
        let g = spec.groups;
        let cin_g = spec.in_channels / g;
        let cout_g = spec.out_channels / g;
        let k = cin_g * spec.kernel.0 * spec.kernel.1;
        let p = ho * wo;
        let in_plane = xs.plane();
        // Output rows per im2col tile, sized so the tile stays cache resident.
        let tile_rows = (COL_TILE / (k * wo).max(1)).clamp(1, ho);
        let mut cols = if spec.is_plain_pointwise() { Vec::new() } else { vec![T::zero(); k * tile_rows * wo] };
        for n in 0..xs.n {
            for gi in 0..g {
                let src = &x.sample(n)[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane];
                let wg = &weight.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
                let start = (n * spec.out_channels + gi * cout_g) * p;
                let dst = &mut out.data_mut()[start..start + cout_g * p];
                if spec.is_plain_pointwise() {
                    matmul(cout_g, k, p, wg, false, src, false, dst, false);
                    continue;
                }
                let mut r0 = 0;
                while r0 < ho {
                    let r1 = (r0 + tile_rows).min(ho);
                    let q = (r1 - r0) * wo;
                    im2col_rows(src, cin_g, xs.h, xs.w, spec, (r0, r1), wo, &mut cols[..k * q]);
                    matmul_strided(cout_g, k, q, wg, &cols[..k * q], &mut dst[r0 * wo..], p);
                    r0 = r1;
                }
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..out_shape.n {
            for c in 0..out_shape.c {
                let bv = b.data()[c];
                for v in out.plane_mut(n, c) {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

fn depthwise_forward<T: Real>(x: &Tensor<T>, spec: &ConvSpec, weight: &Tensor<T>, out: &mut Tensor<T>) {
    let xs = x.shape();
    let os = out.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let wk = &weight.data()[c * kh * kw..(c + 1) * kh * kw];
            let dst = out.plane_mut(n, c);
            for i in 0..kh {
                let (oh_lo, oh_hi) = valid_range(os.h, xs.h, sh, ph, i * dh);
                for j in 0..kw {
                    let wv = wk[i * kw + j];
                    let (ow_lo, ow_hi) = valid_range(os.w, xs.w, sw, pw, j * dw);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = oh * sh + i * dh - ph;
                        let src_row = &src[ih * xs.w..(ih + 1) * xs.w];
                        let dst_row = &mut dst[oh * os.w..(oh + 1) * os.w];
                        if sw == 1 {
                            let off = ow_lo + j * dw - pw;
                            let len = ow_hi - ow_lo;
                            for (d, &s) in dst_row[ow_lo..ow_hi].iter_mut().zip(&src_row[off..off + len]) {
                                *d += wv * s;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                dst_row[ow] += wv * src_row[ow * sw + j * dw - pw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients w.r.t. input, weight and bias for one conv call.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let xs = x.shape();
    let os = dy.shape();
    let mut dx = need.0.then(|| Tensor::zeros(xs));
    let mut dw = need.1.then(|| Tensor::zeros(weight.shape()));
    let db = need.2.then(|| {
        let mut b = Tensor::zeros(spec.bias_shape());
        for n in 0..os.n {
            for c in 0..os.c {
                b.data_mut()[c] += sum_lanes(dy.plane(n, c));
            }
        }
        b
    });
    if spec.is_depthwise() {
        depthwise_backward(x, spec, weight, dy, dx.as_mut(), dw.as_mut());
    } else if dx.is_some() || dw.is_some() {
        let g = spec.groups;
        let cin_g = spec.in_channels / g;
        let cout_g = spec.out_channels / g;
        let k = cin_g * spec.kernel.0 * spec.kernel.1;
        let p = os.h * os.w;
        let plain = spec.is_plain_pointwise();
        let mut cols = if plain { Vec::new() } else { vec![T::zero(); k * p] };
        let in_plane = xs.plane();
        for n in 0..xs.n {
            for gi in 0..g {
                let src = &x.sample(n)[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane];
                let start = (n * spec.out_channels + gi * cout_g) * p;
                let dyg = &dy.data()[start..start + cout_g * p];
                let wg = &weight.data()[gi * cout_g * k..(gi + 1) * cout_g * k];
                if let Some(dw) = dw.as_mut() {
                    let b: &[T] = if plain {
                        src
                    } else {
                        im2col(src, cin_g, xs.h, xs.w, spec, os.h, os.w, &mut cols);
                        &cols
                    };
                    let dwg = &mut dw.data_mut()[gi * cout_g * k..(gi + 1) * cout_g * k];
                    matmul(cout_g, p, k, dyg, false, b, true, dwg, true);
                }
                if let Some(dx) = dx.as_mut() {
                    let xstart = (n * spec.in_channels + gi * cin_g) * in_plane;
                    let dst = &mut dx.data_mut()[xstart..xstart + cin_g * in_plane];
                    if plain {
                        matmul(k, cout_g, p, wg, true, dyg, false, dst, true);
                    } else {
                        matmul(k, cout_g, p, wg, true, dyg, false, &mut cols, false);
                        col2im(&cols, cin_g, xs.h, xs.w, spec, os.h, os.w, dst);
                    }
                }
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

fn depthwise_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
    mut dw: Option<&mut Tensor<T>>,
) {
    let xs = x.shape();
    let os = dy.shape();
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dwl) = spec.dilation;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let src = x.plane(n, c);
            let g = dy.plane(n, c);
            for i in 0..kh {
                let (oh_lo, oh_hi) = valid_range(os.h, xs.h, sh, ph, i * dh);
                for j in 0..kw {
                    let (ow_lo, ow_hi) = valid_range(os.w, xs.w, sw, pw, j * dwl);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let widx = (c * kh + i) * kw + j;
                    let wv = weight.data()[widx];
                    let mut acc = T::zero();
                    for oh in oh_lo..oh_hi {
                        let ih = oh * sh + i * dh - ph;
                        let grow = &g[oh * os.w..(oh + 1) * os.w];
                        let src_row = &src[ih * xs.w..(ih + 1) * xs.w];
                        if sw == 1 {
                            let off = ow_lo + j * dwl - pw;
                            let len = ow_hi - ow_lo;
                            if dw.is_some() {
                                acc += dot_lanes(&grow[ow_lo..ow_hi], &src_row[off..off + len]);
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                let dst = &mut dx.plane_mut(n, c)[ih * xs.w..(ih + 1) * xs.w];
                                for (d, &gv) in dst[off..off + len].iter_mut().zip(&grow[ow_lo..ow_hi]) {
                                    *d += wv * gv;
                                }
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ow * sw + j * dwl - pw;
                                acc += grow[ow] * src_row[iw];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx.plane_mut(n, c)[ih * xs.w + iw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw.data_mut()[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // Capping the exponent keeps the result >= 1e-30, clear of subnormals.
    T::one() / (T::one() + (-x).min(T::from_f64(SIGMOID_CAP)).exp_fast())
}

const SIGMOID_CAP: f64 = 69.0;

/// Tanh-approximate GELU, evaluated as `x·σ(2u)` with
/// `u = √(2/π)(x + 0.044715x³)` (identical to `½x(1 + tanh u)`).
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c2 = T::from_f64(2.0 * GELU_C);
    let k = T::from_f64(GELU_K);
    x * sigmoid(c2 * (x + k * x * x * x))
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c2 = T::from_f64(2.0 * GELU_C);
    let k = T::from_f64(GELU_K);
    let s = sigmoid(c2 * (x + k * x * x * x));
    s + x * s * (T::one() - s) * c2 * (T::one() + T::from_f64(3.0) * k * x * x)
}

pub fn activation_forward<T: Real>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Gelu => x.map(gelu),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
    }
}

/// `dx` given input `x`, output `y` and upstream `dy`.
pub fn activation_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, dy: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = match kind {
        Activation::Gelu => x.data().iter().zip(dy.data()).map(|(&a, &g)| g * gelu_grad(a)).collect(),
        // σ(-x) instead of 1 - σ(x): no cancellation when σ(x) is near 1.
        Activation::Sigmoid => y.data().iter().zip(x.data()).zip(dy.data()).map(|((&s, &a), &g)| g * s * sigmoid(-a)).collect(),
        Activation::Relu => x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&a, &g)| if a > T::zero() { g } else { T::zero() })
            .collect(),
    };
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Max-subtracted softmax across channels at every pixel.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let src = x.sample(n);
        let base = n * s.c * plane;
        let dst = &mut out.data_mut()[base..base + s.c * plane];
        for p in 0..plane {
            let mut m = src[p];
            for c in 1..s.c {
                m = m.max(src[c * plane + p]);
            }
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (src[c * plane + p] - m).exp();
                dst[c * plane + p] = e;
                total += e;
            }
            let inv = T::one() / total;
            for c in 0..s.c {
                dst[c * plane + p] *= inv;
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let plane = s.plane();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let ys = y.sample(n);
        let gs = dy.sample(n);
        let base = n * s.c * plane;
        let dst = &mut dx.data_mut()[base..base + s.c * plane];
        for p in 0..plane {
            // y_c·Σ_j y_j(g_c - g_j) equals y_c(g_c - Σ_j y_j g_j) since Σ y = 1,
            // but does not cancel when one channel dominates.
            for c in 0..s.c {
                let g = gs[c * plane + p];
                let mut acc = T::zero();
                for j in (0..s.c).filter(|&j| j != c) {
                    acc += ys[j * plane + p] * (g - gs[j * plane + p]);
                }
                dst[c * plane + p] = ys[c * plane + p] * acc;
            }
        }
    }
    dx
}

fn check_even(op: &'static str, s: Shape) -> Result<()> {
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::Geometry { op, detail: format!("spatial size {}x{} is not even", s.h, s.w) });
    }
    Ok(())
}

/// 2×2 stride-2 max pooling; also returns the flat input index chosen for
/// every output (first maximum in row-major window order).
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    check_even("maxpool2", s)?;
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = vec![T::zero(); os.len()];
    let mut arg = vec![0u32; os.len()];
    let (op, ip) = (os.plane(), s.plane());
    for nc in 0..s.n * s.c {
        let base = nc * ip;
        let src = &x.data()[base..base + ip];
        let dst = &mut out[nc * op..(nc + 1) * op];
        let am = &mut arg[nc * op..(nc + 1) * op];
        for oh in 0..os.h {
            let r0 = &src[2 * oh * s.w..(2 * oh + 1) * s.w];
            let r1 = &src[(2 * oh + 1) * s.w..(2 * oh + 2) * s.w];
            for ow in 0..os.w {
                let (a, b, c, d) = (r0[2 * ow], r0[2 * ow + 1], r1[2 * ow], r1[2 * ow + 1]);
                let i0 = 2 * oh * s.w + 2 * ow;
                let (mut best, mut bi) = (a, i0);
                if b > best {
                    best = b;
                    bi = i0 + 1;
                }
                if c > best {
                    best = c;
                    bi = i0 + s.w;
                }
                if d > best {
                    best = d;
                    bi = i0 + s.w + 1;
                }
                dst[oh * os.w + ow] = best;
                am[oh * os.w + ow] = (base + bi) as u32;
            }
        }
    }
    Ok((Tensor::from_vec(os, out)?, arg))
}

pub fn maxpool2_backward<T: Real>(input: Shape, argmax: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

pub fn avgpool2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    check_even("avgpool2", s)?;
    let os = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Vec::with_capacity(os.len());
    for nc in 0..s.n * s.c {
        let src = &x.data()[nc * s.plane()..(nc + 1) * s.plane()];
        for oh in 0..os.h {
            let r0 = &src[2 * oh * s.w..(2 * oh + 1) * s.w];
            let r1 = &src[(2 * oh + 1) * s.w..(2 * oh + 2) * s.w];
            for ow in 0..os.w {
                out.push((r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1]) * quarter);
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn avgpool2_backward<T: Real>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let os = dy.shape();
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(input);
    for nc in 0..os.n * os.c {
        let g = &dy.data()[nc * os.plane()..(nc + 1) * os.plane()];
        let dst = &mut dx.data_mut()[nc * input.plane()..(nc + 1) * input.plane()];
        for oh in 0..os.h {
            for ow in 0..os.w {
                let v = g[oh * os.w + ow] * quarter;
                let i0 = 2 * oh * input.w + 2 * ow;
                dst[i0] += v;
                dst[i0 + 1] += v;
                dst[i0 + input.w] += v;
                dst[i0 + input.w + 1] += v;
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, weight of i1)` for ×2 bilinear upsampling with
/// half-pixel centres, clamped at the borders.
fn upsample_taps(in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * in_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_bilinear2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let os = Shape::new(s.n, s.c, 2 * s.h, 2 * s.w);
    let rows = upsample_taps(s.h);
    let cols: Vec<(usize, usize, T, T)> = upsample_taps(s.w)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::from_f64(1.0 - l), T::from_f64(l)))
        .collect();
    let mut out = Vec::with_capacity(os.len());
    let mut horiz = vec![T::zero(); s.h * os.w];
    for nc in 0..s.n * s.c {
        let src = &x.data()[nc * s.plane()..(nc + 1) * s.plane()];
        for (r, dst) in horiz.chunks_exact_mut(os.w).enumerate() {
            let row = &src[r * s.w..(r + 1) * s.w];
            for (d, &(c0, c1, wa, wb)) in dst.iter_mut().zip(&cols) {
                *d = row[c0] * wa + row[c1] * wb;
            }
        }
        for &(r0, r1, lr) in &rows {
            let (a, b) = (T::from_f64(1.0 - lr), T::from_f64(lr));
            let row0 = &horiz[r0 * os.w..(r0 + 1) * os.w];
            let row1 = &horiz[r1 * os.w..(r1 + 1) * os.w];
            out.extend(row0.iter().zip(row1).map(|(&u, &v)| u * a + v * b));
        }
    }
    Tensor::from_vec(os, out).expect("shape")
}

pub fn upsample_bilinear2_backward<T: Real>(input: Shape, dy: &Tensor<T>) -> Tensor<T> {
    let os = dy.shape();
    let rows = upsample_taps(input.h);
    let cols = upsample_taps(input.w);
    let mut dx = Tensor::zeros(input);
    let mut tmp = vec![T::zero(); input.w];
    for nc in 0..os.n * os.c {
        let g = &dy.data()[nc * os.plane()..(nc + 1) * os.plane()];
        let dst = &mut dx.data_mut()[nc * input.plane()..(nc + 1) * input.plane()];
        for (oh, &(r0, r1, lr)) in rows.iter().enumerate() {
            tmp.fill(T::zero());
            for (ow, &(c0, c1, lc)) in cols.iter().enumerate() {
                let v = g[oh * os.w + ow];
                tmp[c0] += v * T::from_f64(1.0 - lc);
                tmp[c1] += v * T::from_f64(lc);
            }
            let (a, b) = (T::from_f64(1.0 - lr), T::from_f64(lr));
            for (iw, &t) in tmp.iter().enumerate() {
                dst[r0 * input.w + iw] += t * a;
                dst[r1 * input.w + iw] += t * b;
            }
        }
    }
    dx
}

/// Running mean/variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// Exponential moving average with the unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], count: usize) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        let unbias = if count > 1 { T::from_f64(count as f64 / (count - 1) as f64) } else { T::one() };
        for c in 0..self.mean.len() {
            self.mean[c] = keep * self.mean[c] + m * batch_mean[c];
            self.var[c] = keep * self.var[c] + m * batch_var[c] * unbias;
        }
    }
}

/// Result of a batch-norm forward that the backward pass needs.
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<&RunningStats<T>>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let s = x.shape();
    let cs = Shape::new(1, s.c, 1, 1);
    if gamma.shape() != cs {
        return Err(Error::Shape { op: "batchnorm2d gamma", left: cs, right: gamma.shape() });
    }
    if beta.shape() != cs {
        return Err(Error::Shape { op: "batchnorm2d beta", left: cs, right: beta.shape() });
    }
    let count = s.n * s.plane();
    let eps = T::from_f64(BN_EPS);
    let (mean, var) = match running {
        Some(r) => {
            if r.mean.len() != s.c || r.var.len() != s.c {
                return Err(Error::Contract(format!(
                    "running stats have {} channels, input has {}",
                    r.mean.len(),
                    s.c
                )));
            }
            (r.mean.clone(), r.var.clone())
        }
        None => {
            if count == 1 {
                return Err(Error::DegenerateBatch);
            }
            let mut mean = vec![T::zero(); s.c];
            let mut var = vec![T::zero(); s.c];
            let inv = 1.0 / count as f64;
            for c in 0..s.c {
                let acc: f64 = (0..s.n).map(|n| moments_f64(x.plane(n, c), 0.0).0).sum();
                let m = acc * inv;
                let sq: f64 = (0..s.n).map(|n| moments_f64(x.plane(n, c), m).1).sum();
                mean[c] = T::from_f64(m);
                var[c] = T::from_f64(sq * inv);
            }
            (mean, var)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut y = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (m, is) = (mean[c], inv_std[c]);
            let (g, b) = (gamma.data()[c], beta.data()[c]);
            let src = x.plane(n, c);
            let xh = xhat.plane_mut(n, c);
            for (d, &v) in xh.iter_mut().zip(src) {
                *d = (v - m) * is;
            }
            let xh = xhat.plane(n, c);
            for (d, &v) in y.plane_mut(n, c).iter_mut().zip(xh) {
                *d = g * v + b;
            }
        }
    }
    Ok((y, BnSaved { xhat, inv_std, batch_mean: mean, batch_var: var }))
}

/// Forward-only batch norm with running statistics, `y = x·scale + shift`.
pub fn batchnorm_infer<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, running: &RunningStats<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    let cs = Shape::new(1, s.c, 1, 1);
    if gamma.shape() != cs || beta.shape() != cs {
        return Err(Error::Shape { op: "batchnorm2d affine", left: cs, right: gamma.shape() });
    }
    if running.mean.len() != s.c || running.var.len() != s.c {
        return Err(Error::Contract(format!("running stats have {} channels, input has {}", running.mean.len(), s.c)));
    }
    let eps = T::from_f64(BN_EPS);
    let mut out = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for c in 0..s.c {
            let scale = gamma.data()[c] / (running.var[c] + eps).sqrt();
            let shift = beta.data()[c] - running.mean[c] * scale;
            out.extend(x.plane(n, c).iter().map(|&v| v * scale + shift));
        }
    }
    Tensor::from_vec(s, out)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    saved: &BnSaved<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    train: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape();
    let count = T::from_f64((s.n * s.plane()) as f64);
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    for c in 0..s.c {
        let (mut sg, mut sb) = (T::zero(), T::zero());
        for n in 0..s.n {
            for (&g, &xh) in dy.plane(n, c).iter().zip(saved.xhat.plane(n, c)) {
                sb += g;
                sg += g * xh;
            }
        }
        dgamma.data_mut()[c] = sg;
        dbeta.data_mut()[c] = sb;
    }
    let mut dx = Tensor::zeros(s);
    for c in 0..s.c {
        let k = gamma.data()[c] * saved.inv_std[c];
        let (sb, sg) = (dbeta.data()[c], dgamma.data()[c]);
        for n in 0..s.n {
            let g = dy.plane(n, c);
            let xh = saved.xhat.plane(n, c);
            let dst = dx.plane_mut(n, c);
            if train {
                let scale = k / count;
                for i in 0..g.len() {
                    dst[i] = scale * (count * g[i] - sb - xh[i] * sg);
                }
            } else {
                for i in 0..g.len() {
                    dst[i] = k * g[i];
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Channel shuffle: view channels as `(groups, C/groups)`, transpose, flatten.
/// Output channel `o = j*groups + g` takes input channel `g*(C/groups) + j`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::Divisibility { op: "channel_shuffle", channels, parts: groups });
    }
    let per = channels / groups;
    let mut perm = Vec::with_capacity(channels);
    for j in 0..per {
        for g in 0..groups {
            perm.push(g * per + j);
        }
    }
    Ok(perm)
}

/// Gathers channels: output channel `o` is input channel `perm[o]`.
pub fn permute_channels<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let mut data = Vec::with_capacity(s.len());
    for n in 0..s.n {
        for &src in perm {
            data.extend_from_slice(x.plane(n, src));
        }
    }
    Tensor::from_vec(s, data).expect("shape")
}

pub fn unpermute_channels<T: Real>(dy: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = dy.shape();
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for (o, &src) in perm.iter().enumerate() {
            dx.plane_mut(n, src).copy_from_slice(dy.plane(n, o));
        }
    }
    dx
}
