//! Resizing, Canny edges, boundary ground truth and supervision pyramids.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::{Shape, Tensor};

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn resize_bilinear(x: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || height == 0 || width == 0 {
        return Err(Error::Geometry { op: "resize_bilinear", detail: format!("{}x{} -> {height}x{width}", s.h, s.w) });
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64).min(1.0) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(height, s.h), taps(width, s.w));
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, height, width));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * s.w + x0] * (1.0 - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (1.0 - fx) + src[y1 * s.w + x1] * fx;
                    dst[oy * width + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour index rule: output `o` samples input `floor(o·in/out)`.
pub fn nearest_index(o: usize, inp: usize, out: usize) -> usize {
    o * inp / out
}

pub fn resize_nearest(x: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || height == 0 || width == 0 {
        return Err(Error::Geometry { op: "resize_nearest", detail: format!("{}x{} -> {height}x{width}", s.h, s.w) });
    }
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, height, width));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..height {
                let iy = nearest_index(oy, s.h, height);
                for ox in 0..width {
                    dst[oy * width + ox] = src[iy * s.w + nearest_index(ox, s.w, width)];
                }
            }
        }
    }
    Ok(out)
}

pub fn resize_mask_nearest(m: &Mask, height: usize, width: usize) -> Mask {
    let mut out = Mask::empty(height, width);
    for oy in 0..height {
        let iy = nearest_index(oy, m.height, height);
        for ox in 0..width {
            out.data[oy * width + ox] = m.get(iy, nearest_index(ox, m.width, width));
        }
    }
    out
}

pub const CANNY_SIGMA: f64 = 1.4;

/// Normalised 1-D Gaussian taps; the 5×5 kernel is their outer product.
pub fn gaussian_taps(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 5×5 Gaussian smoothing with replicated borders.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_taps(sigma);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5).map(|i| k[i] * img[y * w + clamp_idx(x as isize + i as isize - 2, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5).map(|i| k[i] * tmp[clamp_idx(y as isize + i as isize - 2, h) * w + x]).sum();
        }
    }
    out
}

/// Gradient magnitude and direction bin per pixel.
///
/// Bins: 0 = horizontal gradient, 1 = down-right diagonal, 2 = vertical,
/// 3 = down-left diagonal (image rows grow downward).
#[derive(Debug, Clone)]
pub struct Gradient {
    pub height: usize,
    pub width: usize,
    pub magnitude: Vec<f64>,
    pub direction: Vec<u8>,
}

impl Gradient {
    /// Offsets `(dy, dx)` of the neighbour ahead along the gradient.
    pub fn step(bin: u8) -> (isize, isize) {
        match bin {
            0 => (0, 1),
            1 => (1, 1),
            2 => (1, 0),
            _ => (1, -1),
        }
    }
}

/// Sobel gradients of an already smoothed image, replicated borders.
pub fn sobel(img: &[f64], h: usize, w: usize) -> Gradient {
    let at = |y: isize, x: isize| img[clamp_idx(y, h) * w + clamp_idx(x, w)];
    let mut magnitude = vec![0.0; h * w];
    let mut direction = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)) - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            magnitude[i] = gx.hypot(gy);
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            direction[i] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }
    Gradient { height: h, width: w, magnitude, direction }
}

/// Keeps pixels whose magnitude is a local maximum along the gradient
/// direction (strictly above the neighbour behind, at least the one ahead).
/// The one-pixel frame is dropped.
pub fn non_max_suppression(g: &Gradient) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let mut out = vec![0.0; h * w];
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let i = y * w + x;
            let m = g.magnitude[i];
            if m <= 0.0 {
                continue;
            }
            let (dy, dx) = Gradient::step(g.direction[i]);
            let ahead = g.magnitude[((y as isize + dy) as usize) * w + (x as isize + dx) as usize];
            let behind = g.magnitude[((y as isize - dy) as usize) * w + (x as isize - dx) as usize];
            if m > behind && m >= ahead {
                out[i] = m;
            }
        }
    }
    out
}

/// Double threshold plus 8-connected hysteresis on a suppressed magnitude map.
pub fn hysteresis(nms: &[f64], h: usize, w: usize, low: f64, high: f64) -> Mask {
    let mut edges = Mask::empty(h, w);
    let mut queue = VecDeque::new();
    for (i, &m) in nms.iter().enumerate() {
        if m > 0.0 && m >= high {
            edges.data[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges.data[j] && nms[j] > 0.0 && nms[j] >= low {
                    edges.data[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    edges
}

fn gray_plane(gray: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let s = gray.shape();
    if s.n != 1 || s.c != 1 {
        return Err(Error::Shape { op: "canny", left: s, right: Shape::new(1, 1, s.h, s.w) });
    }
    Ok((gray.data().iter().map(|&v| v as f64).collect(), s.h, s.w))
}

/// Gaussian (5×5, σ = 1.4) → Sobel → NMS → double threshold → hysteresis.
/// Thresholds are absolute gradient magnitudes.
pub fn canny(gray: &Tensor<f32>, low: f64, high: f64) -> Result<Mask> {
    if !(low >= 0.0 && low <= high) {
        return Err(Error::Parameter(format!("canny thresholds need 0 <= low <= high, got {low}, {high}")));
    }
    let (img, h, w) = gray_plane(gray)?;
    let g = sobel(&gaussian_blur(&img, h, w, CANNY_SIGMA), h, w);
    Ok(hysteresis(&non_max_suppression(&g), h, w, low, high))
}

pub const BOUNDARY_LOW: f64 = 0.1;
pub const BOUNDARY_HIGH: f64 = 0.2;

/// 3×3 binary dilation.
pub fn dilate3x3(m: &Mask) -> Mask {
    let (h, w) = (m.height, m.width);
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if !m.data[y * w + x] {
                continue;
            }
            for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    out.data[ny * w + nx] = true;
                }
            }
        }
    }
    out
}

/// Canny on the mask with thresholds relative to the peak gradient, then a
/// 3×3 dilation.
pub fn make_boundary_gt(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let img: Vec<f64> = mask.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let g = sobel(&gaussian_blur(&img, h, w, CANNY_SIGMA), h, w);
    let peak = g.magnitude.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Mask::empty(h, w);
    }
    let edges = hysteresis(&non_max_suppression(&g), h, w, BOUNDARY_LOW * peak, BOUNDARY_HIGH * peak);
    dilate3x3(&edges)
}

/// Region and boundary targets at full resolution and at every supervised
/// stride, as `(N,1,H,W)` tensors of 0/1.
#[derive(Debug, Clone, PartialEq)]
pub struct GtPyramid {
    pub region: Tensor<f32>,
    pub boundary: Tensor<f32>,
    /// Shallowest (smallest stride) first.
    pub region_levels: Vec<Tensor<f32>>,
    pub boundary_levels: Vec<Tensor<f32>>,
}

impl GtPyramid {
    /// Concatenates single-sample pyramids along the batch axis.
    pub fn stack(items: &[&GtPyramid]) -> Result<GtPyramid> {
        let first = items.first().ok_or_else(|| Error::Contract("empty pyramid batch".into()))?;
        let cat = |f: &dyn Fn(&GtPyramid) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let parts: Vec<&Tensor<f32>> = items.iter().map(|p| f(p)).collect();
            Tensor::stack(&parts)
        };
        let level = |get: &dyn Fn(&GtPyramid) -> &Vec<Tensor<f32>>, j: usize| -> Result<Tensor<f32>> {
            let parts: Vec<&Tensor<f32>> = items.iter().map(|p| &get(p)[j]).collect();
            Tensor::stack(&parts)
        };
        Ok(GtPyramid {
            region: cat(&|p| &p.region)?,
            boundary: cat(&|p| &p.boundary)?,
            region_levels: (0..first.region_levels.len()).map(|j| level(&|p| &p.region_levels, j)).collect::<Result<_>>()?,
            boundary_levels: (0..first.boundary_levels.len()).map(|j| level(&|p| &p.boundary_levels, j)).collect::<Result<_>>()?,
        })
    }
}

/// Nearest-neighbour downsampling of both masks to each stride.
pub fn build_pyramid(mask: &Mask, boundary: &Mask, region_strides: &[usize], boundary_strides: &[usize]) -> Result<GtPyramid> {
    if (mask.height, mask.width) != (boundary.height, boundary.width) {
        return Err(Error::Shape {
            op: "build_pyramid",
            left: Shape::new(1, 1, mask.height, mask.width),
            right: Shape::new(1, 1, boundary.height, boundary.width),
        });
    }
    let down = |m: &Mask, s: usize| -> Result<Tensor<f32>> {
        if s == 0 || !m.height.is_multiple_of(s) || !m.width.is_multiple_of(s) {
            return Err(Error::Geometry { op: "build_pyramid", detail: format!("stride {s} on {}x{}", m.height, m.width) });
        }
        Ok(resize_mask_nearest(m, m.height / s, m.width / s).to_tensor())
    };
    Ok(GtPyramid {
        region: mask.to_tensor(),
        boundary: boundary.to_tensor(),
        region_levels: region_strides.iter().map(|&s| down(mask, s)).collect::<Result<_>>()?,
        boundary_levels: boundary_strides.iter().map(|&s| down(boundary, s)).collect::<Result<_>>()?,
    })
}
