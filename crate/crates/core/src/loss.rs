//! BceDice, the dual deep-supervision composite, and feature distillation.

use alloc::format;

use crate::autodiff::{Graph, Tape, Var};
use crate::error::{Error, Result};
use crate::imgproc::GtPyramid;
use crate::nn::ConvSpec;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::zoo::Outputs;

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    /// Intermediate region heads, shallowest (stride 2) first.
    pub region: [f64; 4],
    /// Boundary heads, shallowest (stride 4) first.
    pub boundary: [f64; 3],
    /// Distillation weight; 0 disables it.
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { region: [0.4, 0.3, 0.2, 0.1], boundary: [0.3, 0.2, 0.1], kd: 0.0 }
    }
}

/// Mean BCE plus `1 - softDice`, both on `sigmoid(logits)`.
pub fn bce_dice<T: Real>(tape: &mut Tape<T>, logits: Var, target: &Tensor<T>) -> Result<Var> {
    let bce = tape.bce_with_logits(logits, target)?;
    let dice = tape.soft_dice_loss(logits, target, DICE_SMOOTH)?;
    tape.add(bce, dice)
}

fn weighted_sum<T: Real>(tape: &mut Tape<T>, acc: Option<Var>, term: Var, w: f64) -> Result<Option<Var>> {
    let t = tape.affine(term, w, 0.0);
    Ok(Some(match acc {
        Some(a) => tape.add(a, t)?,
        None => t,
    }))
}

/// The three components of the composite loss and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub region: Var,
    pub boundary: Var,
    pub levels: Var,
}

/// `L_region + Σ w_b·bce_dice(boundary_j) + Σ w_r·bce_dice(region_j)`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, out: &Outputs<Var>, gt: &GtPyramid, w: &LossWeights) -> Result<LossTerms> {
    if out.boundary.len() != w.boundary.len() || gt.boundary_levels.len() != w.boundary.len() {
        return Err(Error::Contract(format!(
            "expected {} boundary levels, got {} outputs and {} targets",
            w.boundary.len(),
            out.boundary.len(),
            gt.boundary_levels.len()
        )));
    }
    if out.region_aux.len() != w.region.len() || gt.region_levels.len() != w.region.len() {
        return Err(Error::Contract(format!(
            "expected {} region levels, got {} outputs and {} targets",
            w.region.len(),
            out.region_aux.len(),
            gt.region_levels.len()
        )));
    }
    let region = bce_dice(tape, out.region, &gt.region.cast())?;
    let mut boundary = None;
    for ((&v, t), &wj) in out.boundary.iter().zip(&gt.boundary_levels).zip(&w.boundary) {
        let l = bce_dice(tape, v, &t.cast())?;
        boundary = weighted_sum(tape, boundary, l, wj)?;
    }
    let mut levels = None;
    for ((&v, t), &wj) in out.region_aux.iter().zip(&gt.region_levels).zip(&w.region) {
        let l = bce_dice(tape, v, &t.cast())?;
        levels = weighted_sum(tape, levels, l, wj)?;
    }
    let (boundary, levels) = (boundary.unwrap(), levels.unwrap());
    let side = tape.add(boundary, levels)?;
    let total = tape.add(region, side)?;
    Ok(LossTerms { total, region, boundary, levels })
}

/// `alpha · MSE(teacher, adaptor(student))`. The student map is average
/// pooled by 2× until it matches the teacher's spatial size; the teacher
/// tensor is a constant.
pub fn kd_feature_loss<T: Real>(
    tape: &mut Tape<T>,
    teacher: &Tensor<T>,
    student: Var,
    adaptor_weight: Var,
    adaptor_bias: Option<Var>,
    alpha: f64,
) -> Result<Var> {
    let ts = teacher.shape();
    let mut x = student;
    loop {
        let s = tape.shape(x);
        if (s.h, s.w) == (ts.h, ts.w) {
            break;
        }
        if s.h < ts.h || s.w < ts.w || !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
            return Err(Error::Shape { op: "kd_feature_loss alignment", left: tape.shape(student), right: ts });
        }
        x = tape.avgpool2(x)?;
    }
    let spec = ConvSpec::pointwise(tape.shape(x).c, ts.c);
    let adapted = tape.conv2d(x, &spec, adaptor_weight, adaptor_bias)?;
    let mse = tape.mse(adapted, teacher)?;
    Ok(tape.affine(mse, alpha, 0.0))
}
