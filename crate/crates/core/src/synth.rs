//! Synthetic "polyp" frames: a low-frequency textured background with one to
//! three soft-edged, shaded ellipses. Masks are the exact ellipse union
//! evaluated at pixel centres.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::imgproc::resize_bilinear;
use crate::metrics::Mask;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const SYNTH_SIZE: usize = 256;
pub const MIN_COVERAGE: f64 = 0.01;
pub const MAX_COVERAGE: f64 = 0.40;
pub const SEMI_AXIS: (f64, f64) = (18.0, 60.0);

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// `(1,3,256,256)` in [0,1].
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub center: String,
    pub modality: String,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// `(x'/a)² + (y'/b)²` in the ellipse frame.
    fn level(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

fn draw_ellipses(rng: &mut Rng) -> Vec<Ellipse> {
    let k = 1 + rng.below(3) as usize;
    (0..k)
        .map(|_| {
            let a = rng.uniform(SEMI_AXIS.0, SEMI_AXIS.1);
            let b = rng.uniform(SEMI_AXIS.0, SEMI_AXIS.1);
            let margin = a.max(b) + 2.0;
            let theta = rng.uniform(0.0, core::f64::consts::PI);
            Ellipse {
                cx: rng.uniform(margin, SYNTH_SIZE as f64 - margin),
                cy: rng.uniform(margin, SYNTH_SIZE as f64 - margin),
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            }
        })
        .collect()
}

fn mask_of(ellipses: &[Ellipse]) -> Mask {
    let n = SYNTH_SIZE;
    let mut m = Mask::empty(n, n);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            m.data[y * n + x] = ellipses.iter().any(|e| e.level(px, py) <= 1.0);
        }
    }
    m
}

fn background(rng: &mut Rng, base: [f64; 3]) -> Tensor<f32> {
    let coarse = Tensor::uniform(Shape::new(1, 3, 5, 5), -1.0, 1.0, rng);
    let mut bg = resize_bilinear(&coarse, SYNTH_SIZE, SYNTH_SIZE).expect("fixed sizes");
    for (c, &b) in base.iter().enumerate() {
        for v in bg.plane_mut(0, c) {
            *v = (b + 0.08 * *v as f64) as f32;
        }
    }
    bg
}

/// Deterministic in `(seed, index)`.
pub fn synth_sample(seed: u64, index: u64) -> SynthSample {
    let mut rng = Rng::new(seed).fork(index);
    let nbi = index % 4 == 3;
    let base = if nbi { [0.42, 0.55, 0.50] } else { [0.72, 0.44, 0.38] };
    let mut image = background(&mut rng, base);

    let (ellipses, mask) = loop {
        let e = draw_ellipses(&mut rng);
        let m = mask_of(&e);
        let cover = m.count() as f64 / (SYNTH_SIZE * SYNTH_SIZE) as f64;
        if (MIN_COVERAGE..=MAX_COVERAGE).contains(&cover) {
            break (e, m);
        }
    };

    let n = SYNTH_SIZE;
    for e in &ellipses {
        let tint: [f64; 3] = core::array::from_fn(|_| rng.uniform(1.12, 1.32));
        let shade = rng.uniform(0.25, 0.45);
        let r_min = e.a.min(e.b);
        for y in 0..n {
            for x in 0..n {
                let f = e.level(x as f64 + 0.5, y as f64 + 0.5);
                let dist = (f.sqrt() - 1.0) * r_min;
                let alpha = (0.5 - dist).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                let light = 1.0 - shade * f.min(1.0);
                for c in 0..3 {
                    let i = y * n + x;
                    let plane = image.plane_mut(0, c);
                    let bg = plane[i] as f64;
                    let fg = (base[c] * tint[c] * light).min(1.0);
                    plane[i] = (bg * (1.0 - alpha) + fg * alpha) as f32;
                }
            }
        }
    }
    for v in image.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    SynthSample {
        image,
        mask,
        center: format!("c{}", index % 3),
        modality: String::from(if nbi { "nbi" } else { "wle" }),
    }
}
