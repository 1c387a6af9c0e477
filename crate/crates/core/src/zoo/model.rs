use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{BnMode, Graph};
use crate::blocks::{head_forward, AgfBlock, AgfParams, EdbBlock, EdbParams, GsaBlock, GsaParams, Norm, PgfBlock, PgfParams, SsaBlock};
use crate::error::{Error, Result};
use crate::nn::{Activation, ConvSpec, RunningStats};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

use super::config::{Family, ModelConfig};

/// Named tensors in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry<T> {
    names: Vec<String>,
    items: Vec<T>,
    index: BTreeMap<String, usize>,
}

impl<T> Default for Registry<T> {
    fn default() -> Self {
        Registry { names: Vec::new(), items: Vec::new(), index: BTreeMap::new() }
    }
}

impl<T> Registry<T> {
    pub fn push(&mut self, name: String, item: T) {
        assert!(!self.index.contains_key(&name), "duplicate registry name {name}");
        self.index.insert(name.clone(), self.items.len());
        self.names.push(name);
        self.items.push(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&T> {
        self.index_of(name).map(|i| &self.items[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut T> {
        self.index_of(name).map(|i| &mut self.items[i])
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn items_mut(&mut self) -> &mut [T] {
        &mut self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &T)> {
        self.names.iter().map(String::as_str).zip(&self.items)
    }
}

pub type Params = Registry<Tensor<f32>>;
pub type Buffers = Registry<RunningStats<f32>>;

/// Where batch-norm layers take their statistics from during a forward.
pub enum BnUse<'b> {
    /// Stored running statistics (evaluation).
    Running,
    /// Batch statistics without touching the running buffers.
    Batch,
    /// Batch statistics, with the EMA update written into `Buffers`.
    Update(&'b mut Buffers),
}

/// Everything the losses and the trainer read off one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs<V> {
    /// Full-resolution region logits, (N,1,H,W).
    pub region: V,
    /// Intermediate region logits at strides 2, 4, 8, 16 (shallowest first).
    pub region_aux: Vec<V>,
    /// Boundary logits at strides 4, 8, 16 (shallowest first).
    pub boundary: Vec<V>,
    /// Deepest encoder feature, used as the distillation tap.
    pub bottleneck: V,
}

pub struct Forward<V> {
    pub outputs: Outputs<V>,
    /// Graph handle of every parameter, indexed like the registry.
    pub params: Vec<Option<V>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    buffers: Buffers,
}

#[derive(Clone, Copy)]
enum Init {
    Kaiming(usize),
    Const(f64),
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Builder {
    rng: Rng,
    params: Params,
    buffers: Buffers,
}

impl Builder {
    fn tensor(&mut self, name: String, shape: Shape, init: Init) {
        let t = match init {
            Init::Kaiming(fan_in) => {
                let bound = num_traits::Float::sqrt(6.0 / fan_in as f64);
                let mut rng = self.rng.fork(name_hash(&name));
                Tensor::uniform(shape, -bound, bound, &mut rng)
            }
            Init::Const(v) => Tensor::full(shape, v as f32),
        };
        self.params.push(name, t);
    }

    fn conv(&mut self, name: &str, spec: &ConvSpec, bias: bool) {
        let fan_in = spec.in_channels / spec.groups * spec.kernel.0 * spec.kernel.1;
        self.tensor(format!("{name}.weight"), spec.weight_shape(), Init::Kaiming(fan_in));
        if bias {
            self.tensor(format!("{name}.bias"), spec.bias_shape(), Init::Const(0.0));
        }
    }

    fn bn(&mut self, name: &str, channels: usize) {
        let s = Shape::new(1, channels, 1, 1);
        self.tensor(format!("{name}.gamma"), s, Init::Const(1.0));
        self.tensor(format!("{name}.beta"), s, Init::Const(0.0));
        self.buffers.push(name.to_string(), RunningStats::new(channels));
    }

    fn scalar(&mut self, name: &str, v: f64) {
        self.tensor(name.to_string(), Shape::scalar(), Init::Const(v));
    }
}

/// Layer geometry shared by the builder and the forward pass.
struct Arch<'a> {
    cfg: &'a ModelConfig,
}

impl Arch<'_> {
    fn c(&self, i: usize) -> usize {
        self.cfg.channels[i]
    }

    fn enc_in(&self, i: usize) -> usize {
        if i == 0 {
            self.cfg.in_channels
        } else {
            self.c(i - 1)
        }
    }

    fn enc_conv(&self, i: usize) -> ConvSpec {
        ConvSpec::new(self.enc_in(i), self.c(i), 3)
    }

    fn edb(&self) -> EdbBlock {
        EdbBlock { channels: self.c(2), expansion: self.cfg.edb_expansion, bn_act: true, residual: true }
    }

    fn gsa(&self) -> GsaBlock {
        GsaBlock { channels: self.c(4), groups: self.cfg.gsa_groups }
    }

    fn agf(&self) -> AgfBlock {
        AgfBlock { stage3_channels: self.c(2), stage4_channels: self.c(3), mid_channels: self.cfg.agf_mid }
    }

    fn agf_out(&self) -> ConvSpec {
        ConvSpec::pointwise(self.c(3), self.c(4))
    }

    /// Separable decoder conv feeding skip level `l`.
    fn dec_dw(&self, l: usize) -> ConvSpec {
        ConvSpec::depthwise(self.c(l + 1), 1)
    }

    fn dec_pw(&self, l: usize) -> ConvSpec {
        ConvSpec::pointwise(self.c(l + 1), self.c(l))
    }

    fn head(&self, l: usize) -> ConvSpec {
        ConvSpec::pointwise(self.c(l), 1)
    }

    fn pgf(&self, l: usize) -> PgfBlock {
        PgfBlock { channels: self.c(l) }
    }

    fn unet_up(&self, l: usize) -> ConvSpec {
        ConvSpec::new(self.c(l + 1), self.c(l), 3)
    }

    fn unet_dec(&self, l: usize) -> (ConvSpec, ConvSpec) {
        (ConvSpec::new(2 * self.c(l), self.c(l), 3), ConvSpec::new(self.c(l), self.c(l), 3))
    }
}

fn layout_ultraseg(b: &mut Builder, cfg: &ModelConfig) {
    let a = Arch { cfg };
    for i in 0..5 {
        b.conv(&format!("enc{}.conv", i + 1), &a.enc_conv(i), false);
        b.bn(&format!("enc{}.bn", i + 1), a.c(i));
        if i == 2 {
            let edb = a.edb();
            for j in 0..cfg.edb_blocks {
                for k in 0..3 {
                    b.conv(&format!("enc3.edb{j}.branch{k}"), &edb.branch_spec(k), false);
                }
                b.conv(&format!("enc3.edb{j}.fuse"), &edb.fuse_spec(), false);
                b.bn(&format!("enc3.edb{j}.bn"), edb.channels);
            }
        }
    }
    let gsa = a.gsa();
    for k in 0..gsa.groups {
        b.conv(&format!("gsa.gate{k}"), &gsa.gate_spec(), true);
    }
    if cfg.use_agf_ssa {
        let agf = a.agf();
        b.conv("agf.proj", &agf.proj_spec(), true);
        b.conv("agf.trunk", &agf.trunk_spec(), false);
        b.bn("agf.trunk_bn", agf.mid_channels);
        b.conv("agf.logits", &agf.logits_spec(), true);
        b.conv("agf.out", &a.agf_out(), true);
        b.scalar("ssa.alpha", SsaBlock::ALPHA_INIT);
    }
    for l in (0..4).rev() {
        let d = l + 1;
        b.conv(&format!("dec{d}.dw"), &a.dec_dw(l), false);
        b.conv(&format!("dec{d}.pw"), &a.dec_pw(l), false);
        b.bn(&format!("dec{d}.bn"), a.c(l));
        b.conv(&format!("dec{d}.region_head"), &a.head(l), true);
        if l >= 1 {
            b.conv(&format!("dec{d}.boundary_head"), &a.head(l), true);
        }
        b.conv(&format!("pgf{d}.adaptor"), &a.pgf(l).adaptor_spec(), false);
        b.bn(&format!("pgf{d}.bn"), a.c(l));
        b.scalar(&format!("pgf{d}.alpha"), 0.5);
        b.scalar(&format!("pgf{d}.beta"), 0.5);
    }
    b.conv("head", &a.head(0), true);
}

fn layout_unet(b: &mut Builder, cfg: &ModelConfig) {
    let a = Arch { cfg };
    for i in 0..5 {
        b.conv(&format!("enc{}.conv1", i + 1), &a.enc_conv(i), false);
        b.bn(&format!("enc{}.bn1", i + 1), a.c(i));
        b.conv(&format!("enc{}.conv2", i + 1), &ConvSpec::new(a.c(i), a.c(i), 3), false);
        b.bn(&format!("enc{}.bn2", i + 1), a.c(i));
    }
    for l in (0..4).rev() {
        let d = l + 1;
        let (c1, c2) = a.unet_dec(l);
        b.conv(&format!("dec{d}.up"), &a.unet_up(l), false);
        b.bn(&format!("dec{d}.up_bn"), a.c(l));
        b.conv(&format!("dec{d}.conv1"), &c1, false);
        b.bn(&format!("dec{d}.bn1"), a.c(l));
        b.conv(&format!("dec{d}.conv2"), &c2, false);
        b.bn(&format!("dec{d}.bn2"), a.c(l));
    }
    b.conv("head", &a.head(0), true);
}

struct Ctx<'g, 'm, 'b, G: Graph<Elem = f32>> {
    g: &'g mut G,
    model: &'m Model,
    bn: BnUse<'b>,
    bound: Vec<Option<G::V>>,
}

fn bn_mode<'a>(model: &'a Model, bn: &'a mut BnUse<'_>, name: &str) -> Result<BnMode<'a, f32>> {
    let missing = || Error::Contract(format!("no batch-norm buffer `{name}`"));
    Ok(match bn {
        BnUse::Running => BnMode::Infer(model.buffers.get(name).ok_or_else(missing)?),
        BnUse::Batch => BnMode::Train(None),
        BnUse::Update(buffers) => BnMode::Train(Some(buffers.get_mut(name).ok_or_else(missing)?)),
    })
}

impl<G: Graph<Elem = f32>> Ctx<'_, '_, '_, G> {
    fn p(&mut self, name: &str) -> Result<G::V> {
        let i = self.model.params.index_of(name).ok_or_else(|| Error::Contract(format!("no parameter `{name}`")))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let v = self.g.parameter(&self.model.params.items()[i]);
        self.bound[i] = Some(v);
        Ok(v)
    }

    fn conv(&mut self, x: G::V, name: &str, spec: &ConvSpec, bias: bool) -> Result<G::V> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = if bias { Some(self.p(&format!("{name}.bias"))?) } else { None };
        self.g.conv2d(x, spec, w, b)
    }

    fn norm_params(&mut self, name: &str) -> Result<(G::V, G::V)> {
        Ok((self.p(&format!("{name}.gamma"))?, self.p(&format!("{name}.beta"))?))
    }

    fn bn(&mut self, x: G::V, name: &str) -> Result<G::V> {
        let (gamma, beta) = self.norm_params(name)?;
        let mode = bn_mode(self.model, &mut self.bn, name)?;
        self.g.batchnorm2d(x, gamma, beta, mode)
    }

    fn conv_bn_gelu(&mut self, x: G::V, conv: &str, bn: &str, spec: &ConvSpec) -> Result<G::V> {
        let y = self.conv(x, conv, spec, false)?;
        let y = self.bn(y, bn)?;
        Ok(self.g.activation(y, Activation::Gelu))
    }

    fn edb(&mut self, x: G::V, name: &str, block: &EdbBlock) -> Result<G::V> {
        let branches = [
            self.p(&format!("{name}.branch0.weight"))?,
            self.p(&format!("{name}.branch1.weight"))?,
            self.p(&format!("{name}.branch2.weight"))?,
        ];
        let fuse = self.p(&format!("{name}.fuse.weight"))?;
        let bn_name = format!("{name}.bn");
        let (gamma, beta) = self.norm_params(&bn_name)?;
        let mode = bn_mode(self.model, &mut self.bn, &bn_name)?;
        block.forward(self.g, x, EdbParams { branches, fuse, norm: Some(Norm { gamma, beta, mode }) })
    }

    fn gsa(&mut self, x: G::V, block: &GsaBlock) -> Result<G::V> {
        let gates = (0..block.groups)
            .map(|k| Ok((self.p(&format!("gsa.gate{k}.weight"))?, self.p(&format!("gsa.gate{k}.bias"))?)))
            .collect::<Result<Vec<_>>>()?;
        block.forward(self.g, x, &GsaParams { gates })
    }

    fn agf(&mut self, s3: G::V, s4: G::V, block: &AgfBlock) -> Result<G::V> {
        let proj_weight = self.p("agf.proj.weight")?;
        let proj_bias = self.p("agf.proj.bias")?;
        let trunk_weight = self.p("agf.trunk.weight")?;
        let logits_weight = self.p("agf.logits.weight")?;
        let logits_bias = self.p("agf.logits.bias")?;
        let (gamma, beta) = self.norm_params("agf.trunk_bn")?;
        let mode = bn_mode(self.model, &mut self.bn, "agf.trunk_bn")?;
        let p = AgfParams { proj_weight, proj_bias, trunk_weight, trunk_norm: Norm { gamma, beta, mode }, logits_weight, logits_bias };
        Ok(block.forward(self.g, s3, s4, p)?.fused)
    }

    fn pgf(&mut self, x1: G::V, x2: G::V, region: G::V, boundary: G::V, d: usize, block: &PgfBlock) -> Result<G::V> {
        let adaptor = self.p(&format!("pgf{d}.adaptor.weight"))?;
        let region_weight = self.p(&format!("pgf{d}.alpha"))?;
        let boundary_weight = self.p(&format!("pgf{d}.beta"))?;
        let bn_name = format!("pgf{d}.bn");
        let (gamma, beta) = self.norm_params(&bn_name)?;
        let mode = bn_mode(self.model, &mut self.bn, &bn_name)?;
        let p = PgfParams { adaptor: Some((adaptor, Some(Norm { gamma, beta, mode }))), region_weight, boundary_weight };
        block.forward(self.g, x1, x2, region, boundary, p)
    }

    fn head(&mut self, x: G::V, name: &str) -> Result<G::V> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        head_forward(self.g, x, w, b)
    }

    fn ultraseg(&mut self, input: G::V) -> Result<Outputs<G::V>> {
        let cfg = &self.model.config;
        let a = Arch { cfg };
        let mut skips = Vec::with_capacity(4);
        let mut x = input;
        for i in 0..5 {
            let s = i + 1;
            self.g.scope(&format!("enc{s}"));
            x = self.conv(x, &format!("enc{s}.conv"), &a.enc_conv(i), false)?;
            x = self.bn(x, &format!("enc{s}.bn"))?;
            if i < 4 {
                x = self.g.maxpool2(x)?;
            }
            x = self.g.activation(x, Activation::Gelu);
            if i == 2 {
                let edb = a.edb();
                for j in 0..cfg.edb_blocks {
                    x = self.edb(x, &format!("enc3.edb{j}"), &edb)?;
                }
            }
            if i < 4 {
                skips.push(x);
            }
        }
        self.g.scope("gsa");
        x = self.gsa(x, &a.gsa())?;
        if cfg.use_agf_ssa {
            self.g.scope("agf");
            let fused = self.agf(skips[2], skips[3], &a.agf())?;
            let proj = self.conv(fused, "agf.out", &a.agf_out(), true)?;
            x = self.g.add(x, proj)?;
            self.g.scope("ssa");
            let alpha = self.p("ssa.alpha")?;
            x = SsaBlock.forward(self.g, x, alpha)?;
        }
        let bottleneck = x;

        let mut region_aux = vec![None; 4];
        let mut boundary = vec![None; 3];
        let mut boundary_prob = None;
        for l in (0..4).rev() {
            let d = l + 1;
            self.g.scope(&format!("dec{d}"));
            if l < 3 {
                x = self.g.upsample_bilinear2(x);
            }
            x = self.conv(x, &format!("dec{d}.dw"), &a.dec_dw(l), false)?;
            x = self.conv(x, &format!("dec{d}.pw"), &a.dec_pw(l), false)?;
            x = self.bn(x, &format!("dec{d}.bn"))?;
            x = self.g.activation(x, Activation::Gelu);
            let r = self.head(x, &format!("dec{d}.region_head"))?;
            let pb = if l >= 1 {
                let q = self.head(x, &format!("dec{d}.boundary_head"))?;
                boundary[l - 1] = Some(q);
                self.g.activation(q, Activation::Sigmoid)
            } else {
                let coarse = boundary_prob.ok_or_else(|| Error::Contract("boundary map missing at the shallowest level".into()))?;
                self.g.upsample_bilinear2(coarse)
            };
            boundary_prob = Some(pb);
            region_aux[l] = Some(r);
            x = self.pgf(x, skips[l], r, pb, d, &a.pgf(l))?;
        }
        self.g.scope("head");
        let logits = self.head(x, "head")?;
        let region = self.g.upsample_bilinear2(logits);
        Ok(Outputs {
            region,
            region_aux: region_aux.into_iter().flatten().collect(),
            boundary: boundary.into_iter().flatten().collect(),
            bottleneck,
        })
    }

    fn unet(&mut self, input: G::V) -> Result<Outputs<G::V>> {
        let cfg = &self.model.config;
        let a = Arch { cfg };
        let mut skips = Vec::with_capacity(5);
        let mut x = input;
        for i in 0..5 {
            let s = i + 1;
            self.g.scope(&format!("enc{s}"));
            if i > 0 {
                x = self.g.maxpool2(x)?;
            }
            x = self.conv_bn_gelu(x, &format!("enc{s}.conv1"), &format!("enc{s}.bn1"), &a.enc_conv(i))?;
            let second = ConvSpec::new(a.c(i), a.c(i), 3);
            x = self.conv_bn_gelu(x, &format!("enc{s}.conv2"), &format!("enc{s}.bn2"), &second)?;
            skips.push(x);
        }
        let bottleneck = x;
        for l in (0..4).rev() {
            let d = l + 1;
            self.g.scope(&format!("dec{d}"));
            x = self.g.upsample_bilinear2(x);
            x = self.conv_bn_gelu(x, &format!("dec{d}.up"), &format!("dec{d}.up_bn"), &a.unet_up(l))?;
            x = self.g.concat_channels(&[skips[l], x])?;
            let (c1, c2) = a.unet_dec(l);
            x = self.conv_bn_gelu(x, &format!("dec{d}.conv1"), &format!("dec{d}.bn1"), &c1)?;
            x = self.conv_bn_gelu(x, &format!("dec{d}.conv2"), &format!("dec{d}.bn2"), &c2)?;
        }
        self.g.scope("head");
        let region = self.head(x, "head")?;
        Ok(Outputs { region, region_aux: Vec::new(), boundary: Vec::new(), bottleneck })
    }
}

impl Model {
    /// Deterministic in `(config, seed)`. Each tensor draws from its own
    /// stream keyed by its name, so shared layers of two variants start
    /// identical.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { rng: Rng::new(seed), params: Registry::default(), buffers: Registry::default() };
        match config.family {
            Family::UltraSeg => layout_ultraseg(&mut b, config),
            Family::UNet => layout_unet(&mut b, config),
        }
        Ok(Model { config: config.clone(), params: b.params, buffers: b.buffers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn buffers(&self) -> &Buffers {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut Buffers {
        &mut self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Buffers) -> Result<()> {
        if buffers.names() != self.buffers.names() {
            return Err(Error::Contract("buffer layout does not match the model".into()));
        }
        self.buffers = buffers;
        Ok(())
    }

    /// Enumerated parameter count (sum over the registry).
    pub fn param_count(&self) -> usize {
        self.params.items().iter().map(Tensor::len).sum()
    }

    /// Parameter counts grouped by the first component of their name.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.params.iter() {
            let module = name.split('.').next().unwrap_or(name);
            match out.iter_mut().find(|(m, _)| m == module) {
                Some((_, n)) => *n += t.len(),
                None => out.push((module.to_string(), t.len())),
            }
        }
        out
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.config.in_channels {
            return Err(Error::Shape { op: "model input", left: s, right: s.with_channels(self.config.in_channels) });
        }
        if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(16) || !s.w.is_multiple_of(16) {
            return Err(Error::Geometry {
                op: "model input",
                detail: format!("{}x{} is not a positive multiple of 16 (four 2x downsamplings)", s.h, s.w),
            });
        }
        Ok(())
    }

    pub fn forward<G: Graph<Elem = f32>>(&self, g: &mut G, x: G::V, bn: BnUse<'_>) -> Result<Forward<G::V>> {
        self.check_input(g.shape(x))?;
        let mut ctx = Ctx { g, model: self, bn, bound: vec![None; self.params.len()] };
        let outputs = match self.config.family {
            Family::UltraSeg => ctx.ultraseg(x)?,
            Family::UNet => ctx.unet(x)?,
        };
        Ok(Forward { outputs, params: ctx.bound })
    }

    /// Full-resolution region logits for a batch, evaluation mode.
    pub fn predict_logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = crate::autodiff::Tape::inference();
        let input = tape.constant(x.clone());
        let f = self.forward(&mut tape, input, BnUse::Running)?;
        Ok(tape.take_value(f.outputs.region))
    }
}
