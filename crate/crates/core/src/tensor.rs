//! Dense N,C,H,W tensors and the shape-level operations everything else
//! builds on.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Batch, channels, height, width. Every component is at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    pub const fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// How the right operand of an elementwise op is expanded onto the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    /// Same shape.
    None,
    /// `(N,1,H,W)` spatial mask applied to every channel.
    Spatial,
    /// `(N,C,1,1)` per-channel vector.
    Channel,
    /// `(1,1,1,1)`.
    Scalar,
}

impl Broadcast {
    pub fn resolve(op: &'static str, a: Shape, b: Shape) -> Result<Self> {
        if a == b {
            Ok(Broadcast::None)
        } else if b == Shape::scalar() {
            Ok(Broadcast::Scalar)
        } else if b.c == 1 && b.n == a.n && b.h == a.h && b.w == a.w {
            Ok(Broadcast::Spatial)
        } else if b.h == 1 && b.w == 1 && b.n == a.n && b.c == a.c {
            Ok(Broadcast::Channel)
        } else {
            Err(Error::Shape { op, left: a, right: b })
        }
    }

    /// Index into the right operand for flat index `i` of the left shape.
    #[inline]
    pub fn source_index(self, a: Shape, i: usize) -> usize {
        match self {
            Broadcast::None => i,
            Broadcast::Scalar => 0,
            Broadcast::Spatial => {
                let plane = a.plane();
                let n = i / (a.c * plane);
                n * plane + i % plane
            }
            Broadcast::Channel => i / a.plane(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(Error::Geometry {
                op: "tensor",
                detail: alloc::format!("shape {shape} has a zero dimension"),
            });
        }
        if data.len() != shape.len() {
            return Err(Error::Contract(alloc::format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: Shape, value: T) -> Self {
        assert!(shape.is_valid(), "shape {shape} has a zero dimension");
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| T::from_f64(lo + (hi - lo) * rng.next_f64()))
            .collect();
        Tensor::from_vec(shape, data).expect("valid shape")
    }

    pub fn normal(shape: Shape, mean: f64, std: f64, rng: &mut Rng) -> Self {
        let data = (0..shape.len())
            .map(|_| T::from_f64(mean + std * rng.next_normal()))
            .collect();
        Tensor::from_vec(shape, data).expect("valid shape")
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `H*W` plane for sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Contiguous `C*H*W` block for sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Sum accumulated in 64-bit.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// `a op b` with `b` possibly broadcast (spatial mask, channel vector or
    /// scalar). The result always has `a`'s shape.
    pub fn elementwise(&self, b: &Tensor<T>, kind: BinaryKind) -> Result<Self> {
        let shape = self.shape;
        let mode = Broadcast::resolve("elementwise", shape, b.shape)?;
        let mut out = Vec::with_capacity(shape.len());
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        match mode {
            Broadcast::None => out.extend(self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y))),
            Broadcast::Scalar => {
                let y = b.data[0];
                out.extend(self.data.iter().map(|&x| f(x, y)));
            }
            Broadcast::Spatial => {
                let plane = shape.plane();
                for n in 0..shape.n {
                    let mask = &b.data[n * plane..(n + 1) * plane];
                    for c in 0..shape.c {
                        out.extend(self.plane(n, c).iter().zip(mask).map(|(&x, &y)| f(x, y)));
                    }
                }
            }
            Broadcast::Channel => {
                for n in 0..shape.n {
                    for c in 0..shape.c {
                        let y = b.data[n * shape.c + c];
                        out.extend(self.plane(n, c).iter().map(|&x| f(x, y)));
                    }
                }
            }
        }
        Ok(Tensor { shape, data: out })
    }

    pub fn add(&self, b: &Tensor<T>) -> Result<Self> {
        self.elementwise(b, BinaryKind::Add)
    }

    pub fn sub(&self, b: &Tensor<T>) -> Result<Self> {
        self.elementwise(b, BinaryKind::Sub)
    }

    pub fn mul(&self, b: &Tensor<T>) -> Result<Self> {
        self.elementwise(b, BinaryKind::Mul)
    }

    /// Channel-wise concatenation preserving list order.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| {
            Error::Contract("concat_channels needs at least one tensor".into())
        })?;
        let base = first.shape;
        let mut channels = 0;
        for p in parts {
            let s = p.shape;
            if s.n != base.n || s.h != base.h || s.w != base.w {
                return Err(Error::Shape { op: "concat_channels", left: base, right: s });
            }
            channels += s.c;
        }
        let shape = base.with_channels(channels);
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..base.n {
            for p in parts {
                data.extend_from_slice(p.sample(n));
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Channels `[start, start+len)`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(Error::Geometry {
                op: "slice_channels",
                detail: alloc::format!("range {start}..{} outside {} channels", start + len, s.c),
            });
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Ok(Tensor { shape: s.with_channels(len), data })
    }

    /// `k` equal channel groups; part `j` holds channels `j*C/k .. (j+1)*C/k`.
    pub fn split_channels(&self, k: usize) -> Result<alloc::vec::Vec<Self>> {
        let c = self.shape.c;
        if k == 0 || !c.is_multiple_of(k) {
            return Err(Error::Divisibility { op: "split_channels", channels: c, parts: k });
        }
        let width = c / k;
        (0..k).map(|j| self.slice_channels(j * width, width)).collect()
    }

    /// Mean over the channel axis, shape `(N,1,H,W)`.
    pub fn channel_mean(&self) -> Self {
        let s = self.shape;
        let plane = s.plane();
        let inv = T::one() / T::from_f64(s.c as f64);
        let mut data = vec![T::zero(); s.n * plane];
        for n in 0..s.n {
            let dst = &mut data[n * plane..(n + 1) * plane];
            for c in 0..s.c {
                for (d, &v) in dst.iter_mut().zip(self.plane(n, c)) {
                    *d += v;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        Tensor { shape: s.with_channels(1), data }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(samples: &[&Tensor<T>]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * samples.len());
        for t in samples {
            if t.shape != s {
                return Err(Error::Shape { op: "stack", left: s, right: t.shape });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape { n: s.n * samples.len(), ..s }, data })
    }

    /// Sample `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        Tensor { shape: Shape { n: 1, ..self.shape }, data: self.sample(n).to_vec() }
    }
}
