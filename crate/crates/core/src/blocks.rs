//! The UltraSeg building blocks: Enhanced Dilated Block, Predict-Gated
//! Fusion, Attention-Guided Fusion, Simple Spatial Attention, Group-Shuffle
//! Attention and the 1×1 prediction heads.
//!
//! Blocks describe geometry only; parameters arrive as graph values so the
//! same code runs on a recording tape, an inference tape, or the FLOP
//! tracer, and in either precision.

use alloc::vec::Vec;

use crate::autodiff::{BnMode, Graph};
use crate::error::{Error, Result};
use crate::nn::{Activation, ConvSpec};

/// Batch-norm parameters plus where its statistics come from.
pub struct Norm<'a, V, T> {
    pub gamma: V,
    pub beta: V,
    pub mode: BnMode<'a, T>,
}

pub fn apply_norm<G: Graph>(g: &mut G, x: G::V, norm: Norm<'_, G::V, G::Elem>) -> Result<G::V> {
    g.batchnorm2d(x, norm.gamma, norm.beta, norm.mode)
}

/// Splits channels into three equal groups, runs 3×3 convs with dilation
/// 1, 2 and 3 on them, concatenates and fuses with a 1×1 conv. The full block
/// then applies BN, GELU and a residual connection from its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdbBlock {
    pub channels: usize,
    /// Channel multiplier inside each dilated branch (1 = plain depthwise).
    pub expansion: usize,
    /// Apply BN + GELU after the fusion conv.
    pub bn_act: bool,
    pub residual: bool,
}

pub struct EdbParams<'a, V, T> {
    pub branches: [V; 3],
    pub fuse: V,
    pub norm: Option<Norm<'a, V, T>>,
}

impl EdbBlock {
    pub fn new(channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(3) || channels == 0 {
            return Err(Error::Divisibility { op: "edb", channels, parts: 3 });
        }
        Ok(EdbBlock { channels, expansion: 1, bn_act: true, residual: true })
    }

    pub fn branch_width(&self) -> usize {
        self.channels / 3
    }

    /// Branch `i` (0-based) uses dilation `i + 1` and matching padding.
    pub fn branch_spec(&self, i: usize) -> ConvSpec {
        let w = self.branch_width();
        let d = i + 1;
        ConvSpec {
            in_channels: w,
            out_channels: w * self.expansion,
            kernel: (3, 3),
            stride: (1, 1),
            padding: (d, d),
            dilation: (d, d),
            groups: w,
        }
    }

    pub fn fuse_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels * self.expansion, self.channels)
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: G::V, p: EdbParams<'_, G::V, G::Elem>) -> Result<G::V> {
        let xs = g.shape(x);
        if xs.c != self.channels {
            return Err(Error::Shape { op: "edb", left: xs, right: xs.with_channels(self.channels) });
        }
        let parts = g.split_channels(x, 3)?;
        let mut outs = Vec::with_capacity(3);
        for (i, (&part, &w)) in parts.iter().zip(&p.branches).enumerate() {
            outs.push(g.conv2d(part, &self.branch_spec(i), w, None)?);
        }
        let cat = g.concat_channels(&outs)?;
        let mut y = g.conv2d(cat, &self.fuse_spec(), p.fuse, None)?;
        if self.bn_act {
            let norm = p.norm.ok_or_else(|| Error::Contract("edb with bn_act needs norm parameters".into()))?;
            y = apply_norm(g, y, norm)?;
            y = g.activation(y, Activation::Gelu);
        }
        if self.residual {
            y = g.add(y, x)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        (0..3).map(|i| self.branch_spec(i).param_count(false)).sum::<usize>()
            + self.fuse_spec().param_count(false)
            + if self.bn_act { 2 * self.channels } else { 0 }
    }
}

/// Skip fusion gated by region and boundary predictions:
/// `x1' + x2 + α·σ(P_region)⊙x2 + β·P_boundary⊙x2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PgfBlock {
    pub channels: usize,
}

pub struct PgfParams<'a, V, T> {
    /// 1×1 conv + BN calibrating `x1`; `None` feeds `x1` through unchanged.
    pub adaptor: Option<(V, Option<Norm<'a, V, T>>)>,
    /// α, shape (1,1,1,1).
    pub region_weight: V,
    /// β, shape (1,1,1,1).
    pub boundary_weight: V,
}

impl PgfBlock {
    pub fn adaptor_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.channels, self.channels)
    }

    /// `p_region` holds logits (σ is applied here); `p_boundary` is used as
    /// given. Both are single-channel maps broadcast over `x2`'s channels.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        x1: G::V,
        x2: G::V,
        p_region: G::V,
        p_boundary: G::V,
        p: PgfParams<'_, G::V, G::Elem>,
    ) -> Result<G::V> {
        let x1c = match p.adaptor {
            Some((w, norm)) => {
                let y = g.conv2d(x1, &self.adaptor_spec(), w, None)?;
                match norm {
                    Some(n) => apply_norm(g, y, n)?,
                    None => y,
                }
            }
            None => x1,
        };
        let (s1, s2) = (g.shape(x1c), g.shape(x2));
        if s1 != s2 {
            return Err(Error::Shape { op: "pgf", left: s1, right: s2 });
        }
        let base = g.add(x1c, x2)?;
        let region_prob = g.activation(p_region, Activation::Sigmoid);
        let region_gate = g.mul(region_prob, p.region_weight)?;
        let region_term = g.mul(x2, region_gate)?;
        let boundary_gate = g.mul(p_boundary, p.boundary_weight)?;
        let boundary_term = g.mul(x2, boundary_gate)?;
        let y = g.add(base, region_term)?;
        g.add(y, boundary_term)
    }

    pub fn param_count(&self, norm: bool) -> usize {
        self.adaptor_spec().param_count(false) + if norm { 2 * self.channels } else { 0 } + 2
    }
}

/// Cross-stage fusion of Stage-3 and Stage-4 features through two
/// pixel-wise softmax masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgfBlock {
    pub stage3_channels: usize,
    pub stage4_channels: usize,
    pub mid_channels: usize,
}

pub struct AgfParams<'a, V, T> {
    pub proj_weight: V,
    pub proj_bias: V,
    pub trunk_weight: V,
    pub trunk_norm: Norm<'a, V, T>,
    pub logits_weight: V,
    pub logits_bias: V,
}

pub struct AgfOutput<V> {
    pub fused: V,
    /// Weight of the projected Stage-3 feature, (N,1,H,W).
    pub alpha: V,
    /// Weight of the Stage-4 feature, (N,1,H,W).
    pub beta: V,
}

impl AgfBlock {
    pub fn proj_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.stage3_channels, self.stage4_channels)
    }

    pub fn trunk_spec(&self) -> ConvSpec {
        ConvSpec::new(2 * self.stage4_channels, self.mid_channels, 3)
    }

    pub fn logits_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.mid_channels, 2)
    }

    pub fn forward<G: Graph>(&self, g: &mut G, stage3: G::V, stage4: G::V, p: AgfParams<'_, G::V, G::Elem>) -> Result<AgfOutput<G::V>> {
        let (s3, s4) = (g.shape(stage3), g.shape(stage4));
        if s3.c != self.stage3_channels || s4.c != self.stage4_channels {
            return Err(Error::Shape { op: "agf", left: s3, right: s4 });
        }
        let projected = g.conv2d(stage3, &self.proj_spec(), p.proj_weight, Some(p.proj_bias))?;
        let aligned = g.avgpool2(projected)?;
        let sa = g.shape(aligned);
        if sa != s4 {
            return Err(Error::Shape { op: "agf alignment", left: sa, right: s4 });
        }
        let cat = g.concat_channels(&[aligned, stage4])?;
        let t = g.conv2d(cat, &self.trunk_spec(), p.trunk_weight, None)?;
        let t = apply_norm(g, t, p.trunk_norm)?;
        let t = g.activation(t, Activation::Gelu);
        let logits = g.conv2d(t, &self.logits_spec(), p.logits_weight, Some(p.logits_bias))?;
        let masks = g.softmax_channels(logits);
        let alpha = g.slice_channels(masks, 0, 1)?;
        let beta = g.slice_channels(masks, 1, 1)?;
        let a = g.mul(aligned, alpha)?;
        let b = g.mul(stage4, beta)?;
        let fused = g.add(a, b)?;
        Ok(AgfOutput { fused, alpha, beta })
    }

    pub fn param_count(&self) -> usize {
        self.proj_spec().param_count(true)
            + self.trunk_spec().param_count(false)
            + 2 * self.mid_channels
            + self.logits_spec().param_count(true)
    }
}

/// `(1-α)·x + α·(σ(mean_c x) ⊙ x)` with a single learnable α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SsaBlock;

impl SsaBlock {
    pub const ALPHA_INIT: f64 = 0.3;

    pub fn forward<G: Graph>(&self, g: &mut G, x: G::V, alpha: G::V) -> Result<G::V> {
        let mean = g.channel_mean(x);
        let gate = g.activation(mean, Activation::Sigmoid);
        let attended = g.mul(x, gate)?;
        let keep = g.affine(alpha, -1.0, 1.0);
        let a = g.mul(x, keep)?;
        let b = g.mul(attended, alpha)?;
        g.add(a, b)
    }
}

/// Group-Shuffle Attention: each channel group is gated by the sigmoid of
/// its own 3×3 depthwise conv, then channels are shuffled across groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GsaBlock {
    pub channels: usize,
    pub groups: usize,
}

pub struct GsaParams<V> {
    /// One (weight, bias) pair per group.
    pub gates: Vec<(V, V)>,
}

impl GsaBlock {
    pub fn new(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Divisibility { op: "gsa", channels, parts: groups });
        }
        Ok(GsaBlock { channels, groups })
    }

    pub fn gate_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.channels / self.groups, 1)
    }

    pub fn forward<G: Graph>(&self, g: &mut G, x: G::V, p: &GsaParams<G::V>) -> Result<G::V> {
        let parts = g.split_channels(x, self.groups)?;
        if p.gates.len() != self.groups {
            return Err(Error::Contract(alloc::format!("gsa expects {} gates, got {}", self.groups, p.gates.len())));
        }
        let mut gated = Vec::with_capacity(self.groups);
        for (&part, &(w, b)) in parts.iter().zip(&p.gates) {
            let logits = g.conv2d(part, &self.gate_spec(), w, Some(b))?;
            let gate = g.activation(logits, Activation::Sigmoid);
            gated.push(g.mul(part, gate)?);
        }
        let cat = g.concat_channels(&gated)?;
        g.channel_shuffle(cat, self.groups)
    }

    pub fn param_count(&self) -> usize {
        self.groups * self.gate_spec().param_count(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Region,
    Boundary,
}

/// 1×1 conv `C -> 1` producing a logit map.
pub fn head_forward<G: Graph>(g: &mut G, x: G::V, weight: G::V, bias: G::V) -> Result<G::V> {
    let c = g.shape(x).c;
    g.conv2d(x, &ConvSpec::pointwise(c, 1), weight, Some(bias))
}
