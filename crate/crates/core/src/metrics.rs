//! Confusion counts, Dice, IoU and HD95 on binary masks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// A single-channel binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Geometry {
                op: "mask",
                detail: alloc::format!("{} values for {height}x{width}", data.len()),
            });
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask { height, width, data: vec![false; height * width] }
    }

    pub fn from_points(height: usize, width: usize, points: &[(usize, usize)]) -> Self {
        let mut m = Self::empty(height, width);
        for &(r, c) in points {
            m.data[r * width + c] = true;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.contains(&true)
    }

    /// Foreground pixel coordinates `(row, col)`.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len()).filter(|&i| self.data[i]).map(|i| (i / self.width, i % self.width)).collect()
    }

    fn shape(&self) -> Shape {
        Shape::new(1, 1, self.height, self.width)
    }

    /// Masks of a `(N,1,H,W)` tensor holding values in {0,1} (anything >= 0.5 counts as 1).
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Vec<Mask>> {
        binarize(t, 0.5)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(self.shape(), data).expect("mask shape")
    }
}

/// `mask = prob >= threshold`, one mask per batch item of a `(N,1,H,W)` tensor.
pub fn binarize<T: Real>(prob: &Tensor<T>, threshold: f64) -> Result<Vec<Mask>> {
    let s = prob.shape();
    if s.c != 1 {
        return Err(Error::Shape { op: "binarize", left: s, right: s.with_channels(1) });
    }
    Ok((0..s.n)
        .map(|n| Mask {
            height: s.h,
            width: s.w,
            data: prob.plane(n, 0).iter().map(|&v| v.as_f64() >= threshold).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }
}

fn check(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Shape { op, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check("confusion", pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `2·TP / (2·TP + FP + FN)`; 1 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let den = 2 * c.tp + c.fp + c.r#fn;
    Ok(if den == 0 { 1.0 } else { (2 * c.tp) as f64 / den as f64 })
}

/// `TP / (TP + FP + FN)`; 1 when both masks are empty.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let den = c.tp + c.fp + c.r#fn;
    Ok(if den == 0 { 1.0 } else { c.tp as f64 / den as f64 })
}

const FAR: f64 = 1e20;

/// 1-D squared distance transform of sampled function `f` (lower envelope
/// of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        loop {
            let p = v[k];
            let s = (fq - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dx = q as f64 - p as f64;
        *dq = dx * dx + f[p];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// foreground pixel of `m`. `m` must be non-empty.
pub fn squared_distance_transform(m: &Mask) -> Vec<f64> {
    let (h, w) = (m.height, m.width);
    let mut grid: Vec<f64> = m.data.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let len = h.max(w);
    let (mut f, mut d) = (vec![0.0; len], vec![0.0; len]);
    let (mut v, mut z) = (vec![0usize; len], vec![0.0; len + 1]);
    for c in 0..w {
        for r in 0..h {
            f[r] = grid[r * w + c];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&grid[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

/// Inclusive linear-interpolation percentile, `q` in [0, 100].
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

/// 95th percentile of the pooled directed nearest-neighbour distances
/// between the foreground sets. `None` when exactly one mask is empty; 0 when
/// both are.
pub fn hd95(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check("hd95", pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let to_gt = squared_distance_transform(gt);
    let to_pred = squared_distance_transform(pred);
    let mut dists = Vec::with_capacity(pred.count() + gt.count());
    for (i, &p) in pred.data.iter().enumerate() {
        if p {
            dists.push(sqrt(to_gt[i]));
        }
    }
    for (i, &g) in gt.data.iter().enumerate() {
        if g {
            dists.push(sqrt(to_pred[i]));
        }
    }
    Ok(Some(percentile(&mut dists, 95.0)))
}

fn sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SampleMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    /// `None` when exactly one of the masks is empty.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    /// Sorted by id.
    pub samples: Vec<SampleMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    /// Mean over samples with a defined HD95.
    pub mean_hd95: Option<f64>,
    pub undefined_hd95: usize,
}

impl MetricsReport {
    pub fn from_samples(mut samples: Vec<SampleMetrics>) -> Self {
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let n = samples.len().max(1) as f64;
        let mean_dice = samples.iter().map(|s| s.dice).sum::<f64>() / n;
        let mean_iou = samples.iter().map(|s| s.iou).sum::<f64>() / n;
        let defined: Vec<f64> = samples.iter().filter_map(|s| s.hd95).collect();
        let mean_hd95 = if defined.is_empty() { None } else { Some(defined.iter().sum::<f64>() / defined.len() as f64) };
        let undefined_hd95 = samples.len() - defined.len();
        MetricsReport { samples, mean_dice, mean_iou, mean_hd95, undefined_hd95 }
    }
}

pub fn sample_metrics(id: &str, pred: &Mask, gt: &Mask) -> Result<SampleMetrics> {
    Ok(SampleMetrics { id: id.into(), dice: dice(pred, gt)?, iou: iou(pred, gt)?, hd95: hd95(pred, gt)? })
}

/// Metrics of `(id, prediction, ground truth)` triples.
pub fn evaluate<'a, I>(pairs: I) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a str, &'a Mask, &'a Mask)>,
{
    let samples = pairs.into_iter().map(|(id, p, g)| sample_metrics(id, p, g)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_samples(samples))
}
