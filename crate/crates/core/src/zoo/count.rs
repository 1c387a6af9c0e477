use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{BnMode, Graph};
use crate::error::{Error, Result};
use crate::nn::{Activation, ConvSpec};
use crate::tensor::{BinaryKind, Broadcast, Shape, Tensor};

use super::config::{Family, ModelConfig};
use super::model::{BnUse, Model};

/// Closed-form parameter count, written independently of the builder.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let c = &cfg.channels;
    let k2 = 9;
    match cfg.family {
        Family::UltraSeg => {
            let mut cin = cfg.in_channels;
            let mut total = 0;
            for &co in c {
                total += k2 * cin * co + 2 * co;
                cin = co;
            }
            let e = cfg.edb_expansion;
            total += cfg.edb_blocks * (k2 * e * c[2] + e * c[2] * c[2] + 2 * c[2]);
            total += k2 * c[4] + c[4];
            for l in 0..4 {
                let (ci, co) = (c[l + 1], c[l]);
                total += k2 * ci + ci * co + 2 * co;
                total += co * co + 2 * co + 2;
                total += co + 1;
                if l >= 1 {
                    total += co + 1;
                }
            }
            total += c[0] + 1;
            if cfg.use_agf_ssa {
                let m = cfg.agf_mid;
                total += c[2] * c[3] + c[3];
                total += k2 * 2 * c[3] * m + 2 * m;
                total += 2 * m + 2;
                total += c[3] * c[4] + c[4];
                total += 1;
            }
            total
        }
        Family::UNet => {
            let mut cin = cfg.in_channels;
            let mut total = 0;
            for &co in c {
                total += k2 * cin * co + k2 * co * co + 4 * co;
                cin = co;
            }
            for l in 0..4 {
                let co = c[l];
                total += k2 * c[l + 1] * co + 2 * co;
                total += k2 * 2 * co * co + k2 * co * co + 4 * co;
            }
            total + c[0] + 1
        }
    }
}

/// Multiply-accumulate totals for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub input: Shape,
    pub macs: u64,
    pub flops: u64,
    /// Conv MACs per stage, in execution order.
    pub stages: Vec<(String, u64)>,
}

/// A [`Graph`] that propagates shapes only and tallies conv MACs.
#[derive(Debug, Default)]
pub struct ShapeTracer {
    shapes: Vec<Shape>,
    scope: String,
    stages: Vec<(String, u64)>,
}

impl ShapeTracer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, s: Shape) -> usize {
        self.push(s)
    }

    fn push(&mut self, s: Shape) -> usize {
        self.shapes.push(s);
        self.shapes.len() - 1
    }

    fn tally(&mut self, macs: u64) {
        match self.stages.last_mut() {
            Some((name, m)) if *name == self.scope => *m += macs,
            _ => self.stages.push((self.scope.clone(), macs)),
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.stages.iter().map(|(_, m)| m).sum()
    }

    pub fn stages(&self) -> &[(String, u64)] {
        &self.stages
    }

    fn halve(&self, op: &'static str, x: usize) -> Result<Shape> {
        let s = self.shapes[x];
        if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::Geometry { op, detail: format!("odd spatial size {}x{}", s.h, s.w) });
        }
        Ok(Shape::new(s.n, s.c, s.h / 2, s.w / 2))
    }
}

impl Graph for ShapeTracer {
    type Elem = f32;
    type V = usize;

    fn shape(&self, v: usize) -> Shape {
        self.shapes[v]
    }

    fn parameter(&mut self, t: &Tensor<f32>) -> usize {
        self.push(t.shape())
    }

    fn conv2d(&mut self, x: usize, spec: &ConvSpec, weight: usize, _bias: Option<usize>) -> Result<usize> {
        let xs = self.shapes[x];
        if self.shapes[weight] != spec.weight_shape() {
            return Err(Error::Shape { op: "conv2d weight", left: self.shapes[weight], right: spec.weight_shape() });
        }
        let out = spec.output_shape(xs)?;
        let macs = spec.macs(xs)?;
        self.tally(macs);
        Ok(self.push(out))
    }

    fn batchnorm2d(&mut self, x: usize, _gamma: usize, _beta: usize, _mode: BnMode<'_, f32>) -> Result<usize> {
        Ok(self.push(self.shapes[x]))
    }

    fn activation(&mut self, x: usize, _kind: Activation) -> usize {
        self.push(self.shapes[x])
    }

    fn softmax_channels(&mut self, x: usize) -> usize {
        self.push(self.shapes[x])
    }

    fn maxpool2(&mut self, x: usize) -> Result<usize> {
        let s = self.halve("maxpool2", x)?;
        Ok(self.push(s))
    }

    fn avgpool2(&mut self, x: usize) -> Result<usize> {
        let s = self.halve("avgpool2", x)?;
        Ok(self.push(s))
    }

    fn upsample_bilinear2(&mut self, x: usize) -> usize {
        let s = self.shapes[x];
        self.push(Shape::new(s.n, s.c, s.h * 2, s.w * 2))
    }

    fn elementwise(&mut self, a: usize, b: usize, _kind: BinaryKind) -> Result<usize> {
        let (sa, sb) = (self.shapes[a], self.shapes[b]);
        Broadcast::resolve("elementwise", sa, sb)?;
        Ok(self.push(sa))
    }

    fn affine(&mut self, x: usize, _scale: f64, _shift: f64) -> usize {
        self.push(self.shapes[x])
    }

    fn concat_channels(&mut self, parts: &[usize]) -> Result<usize> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let mut s = self.shapes[first];
        for &p in &parts[1..] {
            let q = self.shapes[p];
            if (q.n, q.h, q.w) != (s.n, s.h, s.w) {
                return Err(Error::Shape { op: "concat_channels", left: s, right: q });
            }
            s.c += q.c;
        }
        Ok(self.push(s))
    }

    fn slice_channels(&mut self, x: usize, start: usize, len: usize) -> Result<usize> {
        let s = self.shapes[x];
        if len == 0 || start + len > s.c {
            return Err(Error::Geometry { op: "slice_channels", detail: format!("[{start}, {}) of {} channels", start + len, s.c) });
        }
        Ok(self.push(s.with_channels(len)))
    }

    fn channel_mean(&mut self, x: usize) -> usize {
        let s = self.shapes[x];
        self.push(s.with_channels(1))
    }

    fn channel_shuffle(&mut self, x: usize, groups: usize) -> Result<usize> {
        let s = self.shapes[x];
        if groups == 0 || !s.c.is_multiple_of(groups) {
            return Err(Error::Divisibility { op: "channel_shuffle", channels: s.c, parts: groups });
        }
        Ok(self.push(s))
    }

    fn scope(&mut self, name: &str) {
        self.scope = name.to_string();
    }
}

/// Conv MACs of one forward pass (BN, activations and resampling excluded).
pub fn count_flops(model: &Model, input: Shape) -> Result<FlopReport> {
    let mut t = ShapeTracer::new();
    let x = t.input(input);
    model.forward(&mut t, x, BnUse::Running)?;
    let macs = t.total_macs();
    Ok(FlopReport { input, macs, flops: 2 * macs, stages: t.stages })
}

/// `1 + Σ (k - 1)·d` along a path of `(kernel, dilation)` layers.
pub fn receptive_field(path: &[(usize, usize)]) -> usize {
    1 + path.iter().map(|&(k, d)| (k - 1) * d).sum::<usize>()
}

/// Receptive field in input pixels for a feature map at `stride`.
pub fn map_to_input(rf: usize, stride: usize) -> usize {
    rf * stride
}
