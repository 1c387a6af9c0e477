//! Central-difference gradient cases for every differentiable op, block and
//! loss. Each case runs 20 random trials in f64 and in f32.

use ultraseg_core::autodiff::{BnMode, Graph, ScalarFn};
use ultraseg_core::blocks::*;
use ultraseg_core::imgproc::{build_pyramid, GtPyramid};
use ultraseg_core::loss::{bce_dice, kd_feature_loss, total_loss, LossWeights, DICE_SMOOTH};
use ultraseg_core::metrics::Mask;
use ultraseg_core::nn::{Activation, ConvSpec, RunningStats};
use ultraseg_core::tensor::BinaryKind;
use ultraseg_core::zoo::Outputs;
use ultraseg_core::*;

pub const TRIALS: u64 = 20;
pub const TOL_64: f64 = 1e-5;
pub const TOL_32: f64 = 1e-3;
const EPS: f64 = 1e-5;

fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

/// Values that are exact in both precisions, so both instantiations see the
/// same function.
fn normal(s: Shape, std: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::<f32>::normal(s, 0.0, std, rng).cast()
}

fn uniform(s: Shape, lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    Tensor::<f32>::uniform(s, lo, hi, rng).cast()
}

fn binary(s: Shape, rng: &mut Rng) -> Tensor<f64> {
    Tensor::<f64>::uniform(s, 0.0, 1.0, rng).map(|v| if v < 0.5 { 0.0 } else { 1.0 })
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
fn project<T: Real>(t: &mut Tape<T>, y: Var) -> Result<Var> {
    let s = t.shape(y);
    if s == Shape::scalar() {
        return Ok(y);
    }
    let r = Tensor::<f32>::normal(s, 0.0, 1.0, &mut Rng::new(0x5eed)).cast();
    let r = t.constant(r);
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

/// Defines a `ScalarFn` from a body generic over the tape precision. `aux`
/// holds constant tensors (targets, running statistics) in that precision.
macro_rules! case {
    ($name:ident, |$t:ident, $v:ident, $aux:ident| $body:block) => {
        struct $name(Vec<Tensor<f64>>);
        impl ScalarFn for $name {
            #[allow(unused_variables)]
            fn eval<T: Real>(&self, $t: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
                let $aux: Vec<Tensor<T>> = self.0.iter().map(|a| a.cast()).collect();
                let y: Var = $body;
                project($t, y)
            }
        }
    };
}

pub struct Outcome {
    pub name: String,
    pub f64_err: f64,
    pub f32_err: f64,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.f64_err < TOL_64 && self.f32_err < TOL_32
    }
}

fn check<F: ScalarFn>(out: &mut Vec<Outcome>, name: &str, make: impl Fn(&mut Rng) -> (F, Vec<Tensor<f64>>)) {
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for trial in 0..TRIALS {
        let mut rng = Rng::new(0x6772_6164).fork(trial);
        let (f, inputs) = make(&mut rng);
        w64 = w64.max(grad_check::<f64, _>(&f, &inputs, EPS).unwrap());
        let narrow: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
        w32 = w32.max(grad_check::<f32, _>(&f, &narrow, EPS).unwrap());
    }
    out.push(Outcome { name: name.to_string(), f64_err: w64, f32_err: w32 });
}

fn conv_case(out: &mut Vec<Outcome>, spec: ConvSpec, x: Shape, bias: bool) {
    struct Conv(ConvSpec, bool);
    impl ScalarFn for Conv {
        fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
            let y = t.conv2d(v[0], &self.0, v[1], self.1.then(|| v[2]))?;
            project(t, y)
        }
    }
    let name = format!("conv {:?} k{:?} s{:?} d{:?} g{}", (spec.in_channels, spec.out_channels), spec.kernel, spec.stride, spec.dilation, spec.groups);
    check(out, &name, |rng| {
        let mut inputs = vec![normal(x, 1.0, rng), normal(spec.weight_shape(), 0.5, rng)];
        if bias {
            inputs.push(normal(spec.bias_shape(), 0.5, rng));
        }
        (Conv(spec, bias), inputs)
    });
}

pub fn conv_dense(out: &mut Vec<Outcome>) {
    conv_case(out, ConvSpec::new(3, 4, 3), sh(2, 3, 5, 5), true);
}

pub fn conv_strided_rectangular(out: &mut Vec<Outcome>) {
    let spec = ConvSpec { kernel: (3, 2), stride: (2, 2), padding: (1, 0), ..ConvSpec::new(2, 3, 3) };
    conv_case(out, spec, sh(1, 2, 7, 6), false);
}

pub fn conv_dilated_grouped(out: &mut Vec<Outcome>) {
    let spec = ConvSpec { padding: (2, 2), dilation: (2, 2), ..ConvSpec::new(4, 6, 3).with_groups(2) };
    conv_case(out, spec, sh(2, 4, 6, 6), true);
}

pub fn conv_depthwise(out: &mut Vec<Outcome>) {
    conv_case(out, ConvSpec::depthwise(3, 1), sh(2, 3, 6, 5), true);
    conv_case(out, ConvSpec::depthwise(3, 3), sh(1, 3, 8, 8), false);
}

pub fn conv_depthwise_multiplier(out: &mut Vec<Outcome>) {
    let spec = ConvSpec { out_channels: 4, ..ConvSpec::depthwise(2, 2) };
    conv_case(out, spec, sh(2, 2, 6, 6), false);
}

pub fn conv_pointwise(out: &mut Vec<Outcome>) {
    conv_case(out, ConvSpec::pointwise(5, 3), sh(2, 5, 4, 3), true);
}

case!(BnTrain, |t, v, aux| { t.batchnorm2d(v[0], v[1], v[2], BnMode::Train(None))? });

pub fn batchnorm_train(out: &mut Vec<Outcome>) {
    check(out, "batchnorm train", |rng| {
        let x = uniform(sh(3, 4, 3, 3), -2.0, 3.0, rng);
        (BnTrain(vec![]), vec![x, normal(sh(1, 4, 1, 1), 1.0, rng), normal(sh(1, 4, 1, 1), 1.0, rng)])
    });
}

case!(BnInfer, |t, v, aux| {
    let stats = RunningStats { mean: aux[0].data().to_vec(), var: aux[1].data().to_vec() };
    t.batchnorm2d(v[0], v[1], v[2], BnMode::Infer(&stats))?
});

pub fn batchnorm_infer(out: &mut Vec<Outcome>) {
    check(out, "batchnorm infer", |rng| {
        let aux = vec![normal(sh(1, 3, 1, 1), 1.0, rng), uniform(sh(1, 3, 1, 1), 0.2, 2.0, rng)];
        (BnInfer(aux), vec![normal(sh(2, 3, 4, 4), 1.5, rng), normal(sh(1, 3, 1, 1), 1.0, rng), normal(sh(1, 3, 1, 1), 1.0, rng)])
    });
}

case!(Gelu, |t, v, aux| { t.activation(v[0], Activation::Gelu) });
case!(Sigmoid, |t, v, aux| { t.activation(v[0], Activation::Sigmoid) });
case!(Relu, |t, v, aux| { t.activation(v[0], Activation::Relu) });

pub fn activations(out: &mut Vec<Outcome>) {
    check(out, "gelu", |rng| (Gelu(vec![]), vec![normal(sh(2, 3, 4, 4), 3.0, rng)]));
    check(out, "sigmoid", |rng| (Sigmoid(vec![]), vec![normal(sh(2, 3, 4, 4), 3.0, rng)]));
    check(out, "relu", |rng| (Relu(vec![]), vec![normal(sh(2, 3, 4, 4), 3.0, rng)]));
}

case!(Softmax, |t, v, aux| { t.softmax_channels(v[0]) });
case!(MaxPool, |t, v, aux| { t.maxpool2(v[0])? });
case!(AvgPool, |t, v, aux| { t.avgpool2(v[0])? });
case!(Upsample, |t, v, aux| { t.upsample_bilinear2(v[0]) });

pub fn softmax_pool_upsample(out: &mut Vec<Outcome>) {
    check(out, "softmax channels", |rng| (Softmax(vec![]), vec![normal(sh(2, 3, 4, 4), 2.0, rng)]));
    check(out, "maxpool2", |rng| (MaxPool(vec![]), vec![normal(sh(2, 2, 6, 8), 1.0, rng)]));
    check(out, "avgpool2", |rng| (AvgPool(vec![]), vec![normal(sh(2, 2, 6, 8), 1.0, rng)]));
    check(out, "upsample bilinear 2x", |rng| (Upsample(vec![]), vec![normal(sh(1, 2, 3, 4), 1.0, rng)]));
}

struct Binary(BinaryKind);

impl ScalarFn for Binary {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = t.elementwise(v[0], v[1], self.0)?;
        project(t, y)
    }
}

pub fn elementwise_broadcasts(out: &mut Vec<Outcome>) {
    let a = sh(2, 3, 4, 5);
    for kind in [BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul] {
        for (label, b) in [("none", a), ("spatial", sh(2, 1, 4, 5)), ("channel", sh(2, 3, 1, 1)), ("scalar", Shape::scalar())] {
            check(out, &format!("{kind:?} {label}"), |rng| (Binary(kind), vec![normal(a, 1.0, rng), normal(b, 1.0, rng)]));
        }
    }
}

case!(Affine, |t, v, aux| { t.affine(v[0], 1.75, -0.5) });
case!(Concat, |t, v, aux| { t.concat_channels(&[v[0], v[1], v[2]])? });
case!(Slice, |t, v, aux| { t.slice_channels(v[0], 1, 2)? });
case!(Split, |t, v, aux| {
    let parts = t.split_channels(v[0], 3)?;
    let p = t.mul(parts[0], parts[2])?;
    t.add(p, parts[1])?
});
case!(ChannelMean, |t, v, aux| { t.channel_mean(v[0]) });
case!(Shuffle, |t, v, aux| { t.channel_shuffle(v[0], 3)? });
case!(Mean, |t, v, aux| {
    let sq = t.mul(v[0], v[0])?;
    t.mean(sq)
});

pub fn structural_ops(out: &mut Vec<Outcome>) {
    check(out, "affine", |rng| (Affine(vec![]), vec![normal(sh(2, 2, 3, 3), 1.0, rng)]));
    check(out, "concat", |rng| {
        (Concat(vec![]), vec![normal(sh(2, 1, 3, 3), 1.0, rng), normal(sh(2, 2, 3, 3), 1.0, rng), normal(sh(2, 3, 3, 3), 1.0, rng)])
    });
    check(out, "slice", |rng| (Slice(vec![]), vec![normal(sh(2, 4, 3, 3), 1.0, rng)]));
    check(out, "split", |rng| (Split(vec![]), vec![normal(sh(2, 6, 3, 3), 1.0, rng)]));
    check(out, "channel mean", |rng| (ChannelMean(vec![]), vec![normal(sh(2, 5, 3, 3), 1.0, rng)]));
    check(out, "channel shuffle", |rng| (Shuffle(vec![]), vec![normal(sh(1, 6, 3, 3), 1.0, rng)]));
    check(out, "mean", |rng| (Mean(vec![]), vec![normal(sh(2, 3, 3, 3), 1.0, rng)]));
}

case!(Bce, |t, v, aux| { t.bce_with_logits(v[0], &aux[0])? });
case!(SoftDice, |t, v, aux| { t.soft_dice_loss(v[0], &aux[0], DICE_SMOOTH)? });
case!(Mse, |t, v, aux| { t.mse(v[0], &aux[0])? });
case!(BceDice, |t, v, aux| { bce_dice(t, v[0], &aux[0])? });

pub fn pixel_losses(out: &mut Vec<Outcome>) {
    let s = sh(2, 1, 6, 6);
    check(out, "bce with logits", |rng| (Bce(vec![binary(s, rng)]), vec![normal(s, 2.0, rng)]));
    check(out, "soft dice", |rng| (SoftDice(vec![binary(s, rng)]), vec![normal(s, 2.0, rng)]));
    check(out, "mse", |rng| (Mse(vec![normal(s, 1.0, rng)]), vec![normal(s, 1.0, rng)]));
    check(out, "bce dice", |rng| (BceDice(vec![binary(s, rng)]), vec![normal(s, 2.0, rng)]));
}

case!(Edb, |t, v, aux| {
    let block = EdbBlock::new(6)?;
    let norm = Norm { gamma: v[5], beta: v[6], mode: BnMode::Train(None) };
    block.forward(t, v[0], EdbParams { branches: [v[1], v[2], v[3]], fuse: v[4], norm: Some(norm) })?
});

pub fn edb_block(out: &mut Vec<Outcome>) {
    check(out, "edb", |rng| {
        let block = EdbBlock::new(6).unwrap();
        let mut inputs = vec![normal(sh(2, 6, 5, 5), 1.0, rng)];
        inputs.extend((0..3).map(|i| normal(block.branch_spec(i).weight_shape(), 0.5, rng)));
        inputs.push(normal(block.fuse_spec().weight_shape(), 0.5, rng));
        inputs.push(normal(sh(1, 6, 1, 1), 1.0, rng));
        inputs.push(normal(sh(1, 6, 1, 1), 1.0, rng));
        (Edb(vec![]), inputs)
    });
}

case!(Pgf, |t, v, aux| {
    let block = PgfBlock { channels: 4 };
    let norm = Norm { gamma: v[5], beta: v[6], mode: BnMode::Train(None) };
    let p = PgfParams { adaptor: Some((v[4], Some(norm))), region_weight: v[7], boundary_weight: v[8] };
    block.forward(t, v[0], v[1], v[2], v[3], p)?
});

pub fn pgf_block(out: &mut Vec<Outcome>) {
    check(out, "pgf", |rng| {
        let block = PgfBlock { channels: 4 };
        let x = sh(2, 4, 4, 4);
        let m = sh(2, 1, 4, 4);
        let inputs = vec![
            normal(x, 1.0, rng),
            normal(x, 1.0, rng),
            normal(m, 2.0, rng),
            uniform(m, 0.0, 1.0, rng),
            normal(block.adaptor_spec().weight_shape(), 0.5, rng),
            normal(sh(1, 4, 1, 1), 1.0, rng),
            normal(sh(1, 4, 1, 1), 1.0, rng),
            normal(Shape::scalar(), 1.0, rng),
            normal(Shape::scalar(), 1.0, rng),
        ];
        (Pgf(vec![]), inputs)
    });
}

const AGF: AgfBlock = AgfBlock { stage3_channels: 3, stage4_channels: 4, mid_channels: 5 };

case!(Agf, |t, v, aux| {
    let p = AgfParams {
        proj_weight: v[2],
        proj_bias: v[3],
        trunk_weight: v[4],
        trunk_norm: Norm { gamma: v[5], beta: v[6], mode: BnMode::Train(None) },
        logits_weight: v[7],
        logits_bias: v[8],
    };
    let out = AGF.forward(t, v[0], v[1], p)?;
    let gates = t.add(out.alpha, out.beta)?;
    let g = t.affine(gates, 0.5, 0.0);
    t.add(out.fused, g)?
});

pub fn agf_block(out: &mut Vec<Outcome>) {
    check(out, "agf", |rng| {
        let inputs = vec![
            normal(sh(2, 3, 8, 8), 1.0, rng),
            normal(sh(2, 4, 4, 4), 1.0, rng),
            normal(AGF.proj_spec().weight_shape(), 0.5, rng),
            normal(AGF.proj_spec().bias_shape(), 0.5, rng),
            normal(AGF.trunk_spec().weight_shape(), 0.3, rng),
            normal(sh(1, 5, 1, 1), 1.0, rng),
            normal(sh(1, 5, 1, 1), 1.0, rng),
            normal(AGF.logits_spec().weight_shape(), 0.5, rng),
            normal(AGF.logits_spec().bias_shape(), 0.5, rng),
        ];
        (Agf(vec![]), inputs)
    });
}

case!(Ssa, |t, v, aux| { SsaBlock.forward(t, v[0], v[1])? });

pub fn ssa_block(out: &mut Vec<Outcome>) {
    check(out, "ssa", |rng| (Ssa(vec![]), vec![normal(sh(2, 4, 5, 5), 1.0, rng), uniform(Shape::scalar(), 0.0, 1.0, rng)]));
}

case!(Gsa, |t, v, aux| {
    let block = GsaBlock::new(8, 4)?;
    let gates = (0..4).map(|k| (v[1 + 2 * k], v[2 + 2 * k])).collect();
    block.forward(t, v[0], &GsaParams { gates })?
});

pub fn gsa_block(out: &mut Vec<Outcome>) {
    check(out, "gsa", |rng| {
        let spec = GsaBlock::new(8, 4).unwrap().gate_spec();
        let mut inputs = vec![normal(sh(1, 8, 4, 4), 1.0, rng)];
        for _ in 0..4 {
            inputs.push(normal(spec.weight_shape(), 0.5, rng));
            inputs.push(normal(spec.bias_shape(), 0.5, rng));
        }
        (Gsa(vec![]), inputs)
    });
}

case!(Head, |t, v, aux| { head_forward(t, v[0], v[1], v[2])? });

pub fn prediction_head(out: &mut Vec<Outcome>) {
    check(out, "head", |rng| {
        let spec = ConvSpec::pointwise(5, 1);
        (Head(vec![]), vec![normal(sh(2, 5, 4, 4), 1.0, rng), normal(spec.weight_shape(), 0.5, rng), normal(spec.bias_shape(), 0.5, rng)])
    });
}

struct Composite(GtPyramid);

impl ScalarFn for Composite {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let out = Outputs { region: v[0], region_aux: v[1..5].to_vec(), boundary: v[5..8].to_vec(), bottleneck: v[0] };
        Ok(total_loss(t, &out, &self.0, &LossWeights::default())?.total)
    }
}

pub fn composite_loss(out: &mut Vec<Outcome>) {
    check(out, "total loss", |rng| {
        let size = 16;
        let bits = |rng: &mut Rng| (0..size * size).map(|_| rng.next_f64() < 0.4).collect::<Vec<_>>();
        let mask = Mask::new(size, size, bits(rng)).unwrap();
        let boundary = Mask::new(size, size, bits(rng)).unwrap();
        let gt = build_pyramid(&mask, &boundary, &[2, 4, 8, 16], &[4, 8, 16]).unwrap();
        let mut inputs = vec![normal(sh(1, 1, size, size), 2.0, rng)];
        inputs.extend([2, 4, 8, 16].iter().map(|s| normal(sh(1, 1, size / s, size / s), 2.0, rng)));
        inputs.extend([4, 8, 16].iter().map(|s| normal(sh(1, 1, size / s, size / s), 2.0, rng)));
        (Composite(gt), inputs)
    });
}

case!(Kd, |t, v, aux| { kd_feature_loss(t, &aux[0], v[0], v[1], Some(v[2]), 0.7)? });

pub fn distillation_loss(out: &mut Vec<Outcome>) {
    check(out, "kd feature loss", |rng| {
        let spec = ConvSpec::pointwise(4, 3);
        let teacher = normal(sh(2, 3, 2, 2), 1.0, rng);
        (Kd(vec![teacher]), vec![normal(sh(2, 4, 8, 8), 1.0, rng), normal(spec.weight_shape(), 0.5, rng), normal(spec.bias_shape(), 0.5, rng)])
    });
}

case!(SumSquares, |t, v, aux| {
    let sq = t.mul(v[0], v[0])?;
    t.sum(sq)
});

case!(ConvBnGelu, |t, v, aux| {
    let y = t.conv2d(v[0], &ConvSpec::new(3, 4, 3), v[1], None)?;
    let y = t.batchnorm2d(y, v[2], v[3], BnMode::Train(None))?;
    let y = t.activation(y, Activation::Gelu);
    t.sum(y)
});

pub fn composite_examples(out: &mut Vec<Outcome>) {
    check(out, "sum of squares", |rng| (SumSquares(vec![]), vec![normal(sh(2, 3, 4, 4), 1.0, rng)]));
    check(out, "conv bn gelu sum", |rng| {
        let inputs = vec![
            normal(sh(1, 3, 6, 6), 1.0, rng),
            normal(ConvSpec::new(3, 4, 3).weight_shape(), 0.5, rng),
            normal(sh(1, 4, 1, 1), 1.0, rng),
            normal(sh(1, 4, 1, 1), 1.0, rng),
        ];
        (ConvBnGelu(vec![]), inputs)
    });
}

pub const GROUPS: &[(&str, fn(&mut Vec<Outcome>))] = &[
    ("conv_dense", conv_dense),
    ("conv_strided_rectangular", conv_strided_rectangular),
    ("conv_dilated_grouped", conv_dilated_grouped),
    ("conv_depthwise", conv_depthwise),
    ("conv_depthwise_multiplier", conv_depthwise_multiplier),
    ("conv_pointwise", conv_pointwise),
    ("batchnorm_train", batchnorm_train),
    ("batchnorm_infer", batchnorm_infer),
    ("activations", activations),
    ("softmax_pool_upsample", softmax_pool_upsample),
    ("elementwise_broadcasts", elementwise_broadcasts),
    ("structural_ops", structural_ops),
    ("pixel_losses", pixel_losses),
    ("edb_block", edb_block),
    ("pgf_block", pgf_block),
    ("agf_block", agf_block),
    ("ssa_block", ssa_block),
    ("gsa_block", gsa_block),
    ("prediction_head", prediction_head),
    ("composite_loss", composite_loss),
    ("distillation_loss", distillation_loss),
    ("composite_examples", composite_examples),
];
