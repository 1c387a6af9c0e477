//! Acceptance suite. Prints one line per criterion. Correctness failures make
//! the run fail; wall-clock and throughput targets depend on the host and are
//! reported without failing the run.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use serde_json::Value;
use ultraseg::bench::{run_bench, BenchConfig};
use ultraseg::checkpoint::{load_checkpoint, save_checkpoint};
use ultraseg::cli::run;
use ultraseg_core::autodiff::{BnMode, Graph};
use ultraseg_core::blocks::*;
use ultraseg_core::imgproc::{make_boundary_gt, resize_bilinear, resize_mask_nearest};
use ultraseg_core::loss::kd_feature_loss;
use ultraseg_core::metrics::{dice, hd95, iou, Mask};
use ultraseg_core::nn::ConvSpec;
use ultraseg_core::optim::{Adam, AdamConfig};
use ultraseg_core::synth::synth_sample;
use ultraseg_core::train::{fit, train_step, Distill, Sample, TrainConfig};
use ultraseg_core::zoo::{analytic_param_count, count_flops, map_to_input, receptive_field, Model, ModelConfig, VARIANTS};
use ultraseg_core::{Rng, Shape, Tape, Tensor};

#[allow(dead_code)]
#[path = "../../core/tests/support/grad_cases.rs"]
mod grad_cases;

struct Verdict {
    /// Correctness part of the criterion.
    correct: bool,
    /// Host-dependent part (runtime budgets, frame rate).
    timing: bool,
    detail: String,
}

impl Verdict {
    fn new(correct: bool, timing: bool, detail: String) -> Self {
        Verdict { correct, timing, detail }
    }
}

fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn randn(s: Shape, rng: &mut Rng) -> Tensor<f32> {
    Tensor::normal(s, 0.0, 1.0, rng)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut out = Vec::new();
    for (_, group) in grad_cases::GROUPS {
        group(&mut out);
    }
    let elapsed = start.elapsed();
    let failed: Vec<&str> = out.iter().filter(|o| !o.passed()).map(|o| o.name.as_str()).collect();
    let w64 = out.iter().map(|o| o.f64_err).fold(0.0, f64::max);
    let w32 = out.iter().map(|o| o.f32_err).fold(0.0, f64::max);
    Verdict::new(
        failed.is_empty(),
        elapsed < Duration::from_secs(120),
        format!("{} cases x {} trials, worst f64 {w64:.1e}, f32 {w32:.1e}, failing {failed:?}, {:.1} s", out.len(), grad_cases::TRIALS, secs(elapsed)),
    )
}

fn run_edb(block: &EdbBlock, x: &Tensor<f32>, branches: &[Tensor<f32>; 3], fuse: &Tensor<f32>) -> Tensor<f32> {
    let mut t = Tape::<f32>::inference();
    let xv = t.constant(x.clone());
    let b = [0, 1, 2].map(|i| t.constant(branches[i].clone()));
    let f = t.constant(fuse.clone());
    let y = block.forward(&mut t, xv, EdbParams { branches: b, fuse: f, norm: None }).unwrap();
    t.take_value(y)
}

fn support(t: &Tensor<f32>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for c in 0..s.c {
        for r in 0..s.h {
            for col in 0..s.w {
                if t.get(0, c, r, col) != 0.0 {
                    (r0, r1, c0, c1) = (r0.min(r), r1.max(r), c0.min(col), c1.max(col));
                }
            }
        }
    }
    (r0, r1, c0, c1)
}

fn receptive_field_check() -> Verdict {
    let block = EdbBlock { bn_act: false, residual: true, ..EdbBlock::new(48).unwrap() };
    let mut rng = Rng::new(3);
    let weights: Vec<([Tensor<f32>; 3], Tensor<f32>)> = (0..2)
        .map(|_| {
            let b = core::array::from_fn(|i| Tensor::uniform(block.branch_spec(i).weight_shape(), 0.1, 1.0, &mut rng));
            (b, Tensor::uniform(block.fuse_spec().weight_shape(), 0.1, 1.0, &mut rng))
        })
        .collect();
    let mut x = Tensor::<f32>::zeros(sh(1, 48, 31, 31));
    for c in 0..48 {
        x.set(0, c, 15, 15, 1.0);
    }
    let cascade = |w: &[([Tensor<f32>; 3], Tensor<f32>)]| {
        let once = run_edb(&block, &x, &w[0].0, &w[0].1);
        run_edb(&block, &once, &w[1].0, &w[1].1)
    };
    let full = cascade(&weights);
    let box13 = support(&full) == (9, 21, 9, 21);
    let corners = [(9, 9), (9, 21), (21, 9), (21, 21)].iter().all(|&(r, c)| (0..48).any(|ch| full.get(0, ch, r, c) != 0.0));
    // without the dilation-3 branches the corners are out of reach
    let mut no_d3 = weights.clone();
    for (b, _) in &mut no_d3 {
        b[2] = Tensor::zeros(b[2].shape());
    }
    let short = support(&cascade(&no_d3));
    let rf = receptive_field(&[(3, 3), (3, 3)]);
    let mapped = map_to_input(13, 4);
    Verdict::new(
        box13 && corners && short == (11, 19, 11, 19) && rf == 13 && mapped == 52,
        true,
        format!("support {:?}, corners reached {corners}, without dilation 3 {short:?}, rf {rf}, mapped {mapped}", support(&full)),
    )
}

fn agf_normalization() -> Verdict {
    let block = AgfBlock { stage3_channels: 48, stage4_channels: 64, mid_channels: 12 };
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let mut rng = Rng::new(trial);
        let m = block.mid_channels;
        let mut t = Tape::<f32>::new();
        let mut c = |s: Shape, std: f64, t: &mut Tape<f32>| t.constant(Tensor::normal(s, 0.0, std, &mut rng));
        let s3 = c(sh(1, 48, 8, 8), 1.0, &mut t);
        let s4 = c(sh(1, 64, 4, 4), 1.0, &mut t);
        let p = AgfParams {
            proj_weight: c(block.proj_spec().weight_shape(), 0.5, &mut t),
            proj_bias: c(block.proj_spec().bias_shape(), 0.5, &mut t),
            trunk_weight: c(block.trunk_spec().weight_shape(), 0.3, &mut t),
            trunk_norm: Norm { gamma: c(sh(1, m, 1, 1), 1.0, &mut t), beta: c(sh(1, m, 1, 1), 1.0, &mut t), mode: BnMode::Train(None) },
            logits_weight: c(block.logits_spec().weight_shape(), 1.0, &mut t),
            logits_bias: c(block.logits_spec().bias_shape(), 1.0, &mut t),
        };
        let out = block.forward(&mut t, s3, s4, p).unwrap();
        for (a, b) in t.value(out.alpha).data().iter().zip(t.value(out.beta).data()) {
            worst = worst.max((*a as f64 + *b as f64 - 1.0).abs());
        }
    }
    Verdict::new(worst < 1e-6, true, format!("100 trials, max |alpha + beta - 1| = {worst:.1e}"))
}

fn run_pgf(alpha: f32, beta: f32, x1: &Tensor<f32>, x2: &Tensor<f32>, pr: &Tensor<f32>, pb: &Tensor<f32>) -> Tensor<f32> {
    let mut t = Tape::<f32>::inference();
    let [x1, x2, pr, pb, a, b] =
        [x1.clone(), x2.clone(), pr.clone(), pb.clone(), Tensor::scalar(alpha), Tensor::scalar(beta)].map(|v| t.constant(v));
    let block = PgfBlock { channels: t.shape(x2).c };
    let y = block.forward(&mut t, x1, x2, pr, pb, PgfParams { adaptor: None, region_weight: a, boundary_weight: b }).unwrap();
    t.take_value(y)
}

fn pgf_cases() -> Verdict {
    let mut rng = Rng::new(11);
    let (x1, x2) = (randn(sh(2, 4, 5, 5), &mut rng), randn(sh(2, 4, 5, 5), &mut rng));
    let (pr, pb) = (randn(sh(2, 1, 5, 5), &mut rng), randn(sh(2, 1, 5, 5), &mut rng));
    let exact = run_pgf(0.0, 0.0, &x1, &x2, &pr, &pb) == x1.add(&x2).unwrap();
    let zeros = Tensor::zeros(x2.shape());
    // saturated region probability doubles x2
    let doubled = run_pgf(1.0, 0.0, &zeros, &x2, &Tensor::full(pr.shape(), 40.0), &pb).max_abs_diff(&x2.map(|v| 2.0 * v));
    // x2 = 1, p_r = sigmoid(0) = 0.5, p_b = 1: 1 + 0.5 * 0.5 + 2 * 1
    let ones = Tensor::ones(x2.shape());
    let mixed = run_pgf(0.5, 2.0, &zeros, &ones, &Tensor::zeros(pr.shape()), &Tensor::ones(pb.shape()));
    let mixed_err = mixed.data().iter().map(|&v| (v as f64 - 3.25).abs()).fold(0.0, f64::max);
    Verdict::new(
        exact && doubled < 1e-6 && mixed_err < 1e-6,
        true,
        format!("alpha=beta=0 bit-exact {exact}, closed forms max err {:.1e}", doubled.max(mixed_err)),
    )
}

fn ssa_cases() -> Verdict {
    let run_ssa = |x: &Tensor<f32>, alpha: f32| {
        let mut t = Tape::<f32>::inference();
        let (xv, a) = (t.constant(x.clone()), t.constant(Tensor::scalar(alpha)));
        let y = SsaBlock.forward(&mut t, xv, a).unwrap();
        t.take_value(y)
    };
    let x = randn(sh(2, 5, 4, 4), &mut Rng::new(5));
    let identity = run_ssa(&x, 0.0) == x;
    let mut worst = 0.0f64;
    for c in [-2.0f64, -0.5, 0.0, 1.0, 3.0] {
        let y = run_ssa(&Tensor::full(sh(1, 3, 2, 2), c as f32), 0.3);
        let want = 0.7 * c + 0.3 / (1.0 + (-c).exp()) * c;
        worst = worst.max(y.data().iter().map(|&v| (v as f64 - want).abs()).fold(0.0, f64::max));
    }
    Verdict::new(identity && worst < 1e-6, true, format!("alpha=0 bit-exact {identity}, constant-input max err {worst:.1e}"))
}

fn brute_hd95(p: &[(usize, usize)], g: &[(usize, usize)]) -> Option<f64> {
    if p.is_empty() && g.is_empty() {
        return Some(0.0);
    }
    if p.is_empty() || g.is_empty() {
        return None;
    }
    let nearest = |a: (usize, usize), set: &[(usize, usize)]| {
        set.iter().map(|b| (a.0 as f64 - b.0 as f64).powi(2) + (a.1 as f64 - b.1 as f64).powi(2)).fold(f64::INFINITY, f64::min).sqrt()
    };
    let mut d: Vec<f64> = p.iter().map(|&a| nearest(a, g)).chain(g.iter().map(|&b| nearest(b, p))).collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    Some(d[lo] + (pos - lo as f64) * (d[hi] - d[lo]))
}

fn random_mask(n: usize, rng: &mut Rng) -> Mask {
    let density = rng.next_f64().powi(2);
    Mask::new(n, n, (0..n * n).map(|_| rng.next_f64() < density).collect()).unwrap()
}

fn metric_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(6);
    let (mut pairs, mut mismatches, mut worst_hd, mut worst_identity) = (0, 0, 0.0f64, 0.0f64);
    for (n, count) in [(16, 500), (32, 100)] {
        for _ in 0..count {
            let (a, b) = (random_mask(n, &mut rng), random_mask(n, &mut rng));
            let (pa, pb) = (a.points(), b.points());
            let inter = pa.iter().filter(|&&(r, c)| b.get(r, c)).count();
            let union = pa.len() + pb.len() - inter;
            let (want_dice, want_iou) = if union == 0 { (1.0, 1.0) } else { (2.0 * inter as f64 / (pa.len() + pb.len()) as f64, inter as f64 / union as f64) };
            let (d, j) = (dice(&a, &b).unwrap(), iou(&a, &b).unwrap());
            if d != want_dice || j != want_iou {
                mismatches += 1;
            }
            match (hd95(&a, &b).unwrap(), brute_hd95(&pa, &pb)) {
                (Some(x), Some(y)) => worst_hd = worst_hd.max((x - y).abs()),
                (None, None) => {}
                _ => mismatches += 1,
            }
            worst_identity = worst_identity.max((j - d / (2.0 - d)).abs());
            pairs += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        mismatches == 0 && worst_hd <= 1e-9 && worst_identity < 1e-12,
        elapsed < Duration::from_secs(60),
        format!("{pairs} pairs, {mismatches} mismatches, hd95 max err {worst_hd:.1e}, iou identity max err {worst_identity:.1e}, {:.1} s", secs(elapsed)),
    )
}

fn build(name: &str, seed: u64) -> Model {
    Model::build(&ModelConfig::preset(name).unwrap(), seed).unwrap()
}

fn parameter_budget() -> Verdict {
    let mut agree = true;
    for name in VARIANTS {
        let cfg = ModelConfig::preset(name).unwrap();
        agree &= build(name, 1).param_count() == analytic_param_count(&cfg);
    }
    let count = |n: &str| build(n, 1).param_count();
    let (small, large, tiny) = (count("ultraseg-108k"), count("ultraseg-130k"), count("unet-tiny"));
    let delta = large - small;
    let tiny_class = (100_000..1_000_000).contains(&tiny);
    Verdict::new(
        agree && small < 300_000 && (15_000..=30_000).contains(&delta) && tiny_class,
        true,
        format!("enumerated == analytic {agree}, 108k {small}, 130k {large}, delta {delta}, unet-tiny {tiny}"),
    )
}

fn flops_ordering() -> Verdict {
    let macs = |n: &str| count_flops(&build(n, 1), sh(1, 3, 256, 256)).unwrap().macs;
    let (a, b, c) = (macs("ultraseg-108k"), macs("ultraseg-130k"), macs("unet-tiny"));
    let rel = (b - a) as f64 / a as f64;
    Verdict::new(a < b && b < c && rel < 0.10, true, format!("MACs 108k {a}, 130k {b}, unet-tiny {c}, delta {:.1}%", 100.0 * rel))
}

fn synth_samples(cfg: &ModelConfig, seed: u64, range: std::ops::Range<u64>, size: usize) -> Vec<Sample> {
    range
        .map(|i| {
            let s = synth_sample(seed, i);
            let (image, mask) = if size == s.mask.height {
                (s.image, s.mask)
            } else {
                (resize_bilinear(&s.image, size, size).unwrap(), resize_mask_nearest(&s.mask, size, size))
            };
            Sample::new(format!("s{i}"), image, mask, cfg).unwrap()
        })
        .collect()
}

fn training_capacity() -> Verdict {
    let cfg = ModelConfig::preset("ultraseg-108k").unwrap();
    let data = synth_samples(&cfg, 7, 0..64, 256);
    let tc = TrainConfig { epochs: 200, patience: 200, seed: 1, stop_at_dice: Some(0.95), ..TrainConfig::default() };

    let mut model = Model::build(&cfg, tc.seed).unwrap();
    let mut adam = Adam::new(tc.adam, model.params());
    let batch: Vec<&Sample> = data[..tc.batch_size].iter().collect();
    let losses: Vec<f64> = (0..11).map(|_| train_step(&mut model, &mut adam, &batch, &tc, None).unwrap()).collect();
    let ups = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    let decreasing = ups <= 2 && losses[10] < losses[0];

    let start = Instant::now();
    let mut model = Model::build(&cfg, tc.seed).unwrap();
    let report = fit(&mut model, &data, &data, &tc, None, &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    Verdict::new(
        decreasing && report.best_dice >= 0.95,
        elapsed < Duration::from_secs(30 * 60),
        format!(
            "loss {:.3} -> {:.3} over 10 steps ({ups} non-monotone), train Dice {:.4} at epoch {}, {:.0} s",
            losses[0],
            losses[10],
            report.best_dice,
            report.best_epoch,
            secs(elapsed)
        ),
    )
}

fn throughput() -> Verdict {
    let fast = run_bench(&build("ultraseg-108k", 1), &BenchConfig { threads: 1, iters: 1000, warmup: 10, seed: 1 }).unwrap();
    let slow = run_bench(&build("unet-medium", 1), &BenchConfig { threads: 1, iters: 10, warmup: 1, seed: 1 }).unwrap();
    let consistent = [&fast, &slow].iter().all(|r| (r.fps - 1000.0 / r.latency_mean_ms).abs() / r.fps < 0.02);
    Verdict::new(
        consistent && fast.fps > slow.fps,
        fast.fps >= 30.0,
        format!(
            "ultraseg-108k {:.1} FPS (mean {:.2} ms, p95 {:.2} ms, pinned {}), unet-medium {:.2} FPS, fps/latency consistent {consistent}",
            fast.fps, fast.latency_mean_ms, fast.latency_p95_ms, fast.affinity_applied, slow.fps
        ),
    )
}

fn checkpoint_roundtrip() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::<f32>::uniform(sh(1, 3, 256, 256), 0.0, 1.0, &mut Rng::new(2));
    let mut identical = true;
    let mut size = 0;
    for name in ["ultraseg-108k", "ultraseg-130k"] {
        let model = build(name, 4);
        let path = dir.path().join(format!("{name}.useg"));
        save_checkpoint(&path, &model).unwrap();
        let back = load_checkpoint(&path).unwrap();
        identical &= model.predict_logits(&x).unwrap() == back.predict_logits(&x).unwrap();
        size = fs::metadata(&path).unwrap().len();
    }
    Verdict::new(identical && size < 1_000_000, true, format!("forward bit-identical {identical}, ultraseg-130k file {size} bytes"))
}

/// Crack midpoints between 4-neighbours of different value.
fn contour(m: &Mask) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if x + 1 < m.width && m.get(y, x) != m.get(y, x + 1) {
                out.push((y as f64, x as f64 + 0.5));
            }
            if y + 1 < m.height && m.get(y, x) != m.get(y + 1, x) {
                out.push((y as f64 + 0.5, x as f64));
            }
        }
    }
    out
}

fn nearest(p: (f64, f64), set: &[(f64, f64)]) -> f64 {
    set.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min)
}

fn boundary_gt() -> Verdict {
    let n = 256;
    let disk = Mask::new(n, n, (0..n * n).map(|i| ((i / n) as f64 + 0.5 - 128.0).hypot((i % n) as f64 + 0.5 - 120.0) <= 70.0).collect()).unwrap();
    let square = Mask::new(n, n, (0..n * n).map(|i| (64..192).contains(&(i / n)) && (80..200).contains(&(i % n))).collect()).unwrap();
    let (mut far, mut gap) = (0.0f64, 0.0f64);
    for m in [&disk, &square] {
        let b = make_boundary_gt(m);
        let pts: Vec<(f64, f64)> = b.points().iter().map(|&(y, x)| (y as f64, x as f64)).collect();
        let edge = contour(m);
        far = far.max(pts.iter().map(|&p| nearest(p, &edge)).fold(0.0, f64::max));
        // closed ring: every point of the true contour is covered
        gap = gap.max(edge.iter().map(|&p| nearest(p, &pts)).fold(0.0, f64::max));
    }
    let mut times: Vec<Duration> = (0..5)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(make_boundary_gt(&disk));
            t.elapsed()
        })
        .collect();
    times.sort();
    let median = times[2];
    Verdict::new(
        far <= 2.0 && gap <= 1.0,
        median < Duration::from_millis(50),
        format!("max distance to contour {far:.2} px, max contour gap {gap:.2} px, 256x256 in {:.1} ms", 1e3 * secs(median)),
    )
}

fn kd_loss_value(teacher: &Tensor<f32>, student: &Tensor<f32>, w: &Tensor<f32>) -> f32 {
    let mut t = Tape::<f32>::inference();
    let (s, wv) = (t.constant(student.clone()), t.constant(w.clone()));
    let l = kd_feature_loss(&mut t, teacher, s, wv, None, 0.2).unwrap();
    t.value(l).data()[0]
}

fn distillation() -> Verdict {
    // zero when the adapted student equals the teacher
    let student = randn(sh(2, 4, 8, 8), &mut Rng::new(1));
    let mut eye = Tensor::zeros(ConvSpec::pointwise(4, 4).weight_shape());
    for i in 0..4 {
        eye.set(i, i, 0, 0, 1.0);
    }
    let matched = kd_loss_value(&student, &student, &eye);
    let mut out = Vec::new();
    grad_cases::distillation_loss(&mut out);
    let grads_ok = out.iter().all(|o| o.passed());

    let teacher_cfg = ModelConfig::preset("unet-medium").unwrap();
    let cfg = ModelConfig::preset("ultraseg-108k").unwrap();
    let (train, val) = (synth_samples(&cfg, 11, 0..16, 64), synth_samples(&cfg, 11, 16..24, 64));
    let adam = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
    let start = Instant::now();
    let mut teacher = Model::build(&teacher_cfg, 1).unwrap();
    let tc = TrainConfig { epochs: 8, patience: 8, seed: 1, adam, ..TrainConfig::default() };
    let t_report = fit(&mut teacher, &train, &val, &tc, None, &mut |_| {}).unwrap();
    let teacher = t_report.best;
    let mut deltas = Vec::new();
    for seed in 1..=3 {
        let mut tc = TrainConfig { epochs: 10, patience: 10, seed, adam, ..TrainConfig::default() };
        let mut plain = Model::build(&cfg, seed).unwrap();
        let base = fit(&mut plain, &train, &val, &tc, None, &mut |_| {}).unwrap().best_dice;
        tc.weights.kd = 0.2;
        let mut student = Model::build(&cfg, seed).unwrap();
        let mut kd = Distill::new(&teacher, &student, seed, adam);
        let with = fit(&mut student, &train, &val, &tc, Some(&mut kd), &mut |_| {}).unwrap().best_dice;
        deltas.push(with - base);
    }
    let deltas_txt: Vec<String> = deltas.iter().map(|d| format!("{d:+.4}")).collect();
    Verdict::new(
        matched == 0.0 && grads_ok && deltas.iter().all(|d| d.is_finite()),
        true,
        format!(
            "matched loss {matched}, gradient check {grads_ok}, teacher Dice {:.4}, Dice deltas (kd 0.2) [{}], {:.0} s",
            t_report.best_dice,
            deltas_txt.join(", "),
            secs(start.elapsed())
        ),
    )
}

fn useg(args: &[&str]) -> Value {
    let mut out = Vec::new();
    let code = run(std::iter::once("useg").chain(args.iter().copied()), &mut out);
    assert_eq!(code, 0, "useg {args:?}");
    serde_json::from_slice(&out).unwrap()
}

fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| !k.contains("elapsed"));
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn pipeline(root: &Path) -> (Vec<Value>, Vec<u8>) {
    let _ = fs::remove_dir_all(root);
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, out) = (root.join("data"), root.join("run"));
    let manifest = s(&data.join("manifest.tsv"));
    let mut reports = vec![useg(&["synth", "--n", "6", "--seed", "3", "--out", &s(&data)])];
    reports.push(useg(&["train", "--model", "ultraseg-108k", "--data", &manifest, "--seed", "1", "--epochs", "2", "--out", &s(&out)]));
    reports.push(useg(&["eval", "--checkpoint", &s(&out.join("best.useg")), "--data", &manifest]));
    reports.iter_mut().for_each(strip_timing);
    (reports, fs::read(out.join("final.useg")).unwrap())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("pipeline");
    let (a, ca) = pipeline(&root);
    let (b, cb) = pipeline(&root);
    let same = a == b;
    Verdict::new(same && ca == cb, true, format!("synth, train, eval JSON identical {same}, final checkpoint identical {}", ca == cb))
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags; a name filter that excludes us skips the run
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|a| !"acceptance".contains(a.as_str())) || std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Verdict); 14] = [
        ("gradient correctness", gradients),
        ("receptive field", receptive_field_check),
        ("agf mask normalization", agf_normalization),
        ("pgf degenerate cases", pgf_cases),
        ("ssa cases", ssa_cases),
        ("metric oracles", metric_oracles),
        ("parameter budget", parameter_budget),
        ("flops ordering", flops_ordering),
        ("training capacity", training_capacity),
        ("throughput", throughput),
        ("checkpoint roundtrip", checkpoint_roundtrip),
        ("boundary gt", boundary_gt),
        ("kd loss", distillation),
        ("determinism", determinism),
    ];
    let mut broken = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        let status = match (v.correct, v.timing) {
            (true, true) => "PASS",
            (true, false) => "FAIL (host timing)",
            _ => "FAIL",
        };
        println!("criterion {:>2} {name:<24} {status}: {}", i + 1, v.detail);
        broken += usize::from(!v.correct);
    }
    if broken == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
