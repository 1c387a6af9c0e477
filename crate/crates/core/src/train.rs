//! Training loop: shuffled mini-batches, the composite loss, Adam, and
//! early stopping on validation Dice.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Tape};
use crate::error::{Error, Result};
use crate::imgproc::{build_pyramid, make_boundary_gt, GtPyramid};
use crate::loss::{bce_dice, kd_feature_loss, total_loss, LossWeights};
use crate::metrics::{binarize, dice, Mask};
use crate::nn::{sigmoid, ConvSpec};
use crate::optim::{Adam, AdamConfig, EarlyStop};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};
use crate::zoo::{BnUse, Family, Model, ModelConfig, Params};

/// One in-memory training example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `(1,3,H,W)` in [0,1].
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub pyramid: GtPyramid,
}

impl Sample {
    /// Derives the boundary map and the pyramid for `config`'s supervision levels.
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: Mask, config: &ModelConfig) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || (s.h, s.w) != (mask.height, mask.width) {
            return Err(Error::Shape { op: "sample", left: s, right: Shape::new(1, s.c, mask.height, mask.width) });
        }
        let boundary = make_boundary_gt(&mask);
        let pyramid = build_pyramid(&mask, &boundary, &config.region_levels, &config.boundary_levels)?;
        Ok(Sample { id: id.into(), image, mask, pyramid })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    /// Finish as soon as validation Dice reaches this value.
    pub stop_at_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 4,
            patience: 10,
            seed: 1,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            stop_at_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs, batch size and patience must be >= 1".into()));
        }
        if !(self.adam.lr >= 0.0) || self.weights.kd < 0.0 {
            return Err(Error::Config("learning rate and kd weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub best_dice: f64,
    pub improved: bool,
    pub stopped: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub stopped_early: bool,
    /// Parameters and buffers at the best validation epoch.
    pub best: Model,
}

/// Feature-distillation setup: a frozen teacher and a trainable 1×1
/// adaptor from the student's bottleneck to the teacher's.
pub struct Distill<'t> {
    pub teacher: &'t Model,
    adaptor: Params,
    adam: Adam,
}

impl<'t> Distill<'t> {
    pub fn new(teacher: &'t Model, student: &Model, seed: u64, adam: AdamConfig) -> Self {
        let spec = ConvSpec::pointwise(*student.config().channels.last().unwrap(), *teacher.config().channels.last().unwrap());
        let bound = num_traits::Float::sqrt(6.0 / spec.in_channels as f64);
        let mut rng = Rng::new(seed).fork(0x6b64);
        let mut adaptor = Params::default();
        adaptor.push("kd.adaptor.weight".into(), Tensor::uniform(spec.weight_shape(), -bound, bound, &mut rng));
        adaptor.push("kd.adaptor.bias".into(), Tensor::zeros(spec.bias_shape()));
        let adam = Adam::new(adam, &adaptor);
        Distill { teacher, adaptor, adam }
    }

    fn teacher_features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let f = self.teacher.forward(&mut tape, x, BnUse::Running)?;
        Ok(tape.take_value(f.outputs.bottleneck))
    }
}

/// Mean per-sample Dice of thresholded predictions (running BN statistics).
pub fn mean_dice(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let logits = model.predict_logits(&Tensor::stack(&imgs)?)?;
        let prob = logits.map(sigmoid);
        for (pred, s) in binarize(&prob, 0.5)?.iter().zip(chunk) {
            total += dice(pred, &s.mask)?;
        }
    }
    Ok(total / samples.len() as f64)
}

/// Loss value and parameter gradients for one batch; BN running statistics
/// are updated in place.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Sample],
    cfg: &TrainConfig,
    kd: Option<&mut Distill<'_>>,
) -> Result<f64> {
    let imgs: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
    let images = Tensor::stack(&imgs)?;
    let pyramids: Vec<&GtPyramid> = batch.iter().map(|s| &s.pyramid).collect();
    let gt = GtPyramid::stack(&pyramids)?;

    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let mut buffers = model.buffers().clone();
    let f = model.forward(&mut tape, x, BnUse::Update(&mut buffers))?;
    let mut loss = match model.config().family {
        Family::UltraSeg => total_loss(&mut tape, &f.outputs, &gt, &cfg.weights)?.total,
        Family::UNet => bce_dice(&mut tape, f.outputs.region, &gt.region)?,
    };
    let mut kd_vars = None;
    if let Some(d) = kd.as_deref() {
        if cfg.weights.kd > 0.0 {
            let teacher = d.teacher_features(&images)?;
            let w = tape.parameter(&d.adaptor.items()[0]);
            let b = tape.parameter(&d.adaptor.items()[1]);
            let l = kd_feature_loss(&mut tape, &teacher, f.outputs.bottleneck, w, Some(b), cfg.weights.kd)?;
            loss = tape.add(loss, l)?;
            kd_vars = Some([w, b]);
        }
    }
    let value = tape.scalar(loss) as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss = {value}")));
    }
    tape.backward(loss)?;
    let mut grads: Vec<Option<Tensor<f32>>> = f.params.iter().map(|v| v.and_then(|v| tape.grad(v).cloned())).collect();
    for (g, name) in grads.iter_mut().zip(model.params().names()) {
        if g.is_none() {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    adam.step(model.params_mut(), &mut grads)?;
    model.set_buffers(buffers)?;
    if let (Some(d), Some(vars)) = (kd, kd_vars) {
        let mut g: Vec<Option<Tensor<f32>>> = vars.iter().map(|&v| tape.grad(v).cloned()).collect();
        d.adam.step(&mut d.adaptor, &mut g)?;
    }
    Ok(value)
}

/// Trains `model` in place and returns the per-epoch history plus a copy
/// of the best model. `on_epoch` sees every record as it is produced.
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut kd: Option<&mut Distill<'_>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut stopper = EarlyStop::new(cfg.patience)?;
    let shuffler = Rng::new(cfg.seed).fork(0x7368_7566);
    let mut records = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY, model.clone());
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffler.fork(epoch as u64).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let l = train_step(model, &mut adam, &batch, cfg, kd.as_deref_mut()).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {}: {m}", bi + 1)),
                other => other,
            })?;
            loss_sum += l;
            batches += 1;
        }
        let val_dice = mean_dice(model, val, cfg.batch_size)?;
        let (improved, patience_out) = stopper.observe(val_dice);
        if improved {
            best = (epoch, val_dice, model.clone());
        }
        let reached = cfg.stop_at_dice.is_some_and(|t| val_dice >= t);
        let stopped = patience_out || reached;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_dice,
            best_dice: best.1,
            improved,
            stopped: stopped || epoch == cfg.epochs,
        };
        on_epoch(&rec);
        records.push(rec);
        if stopped {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    Ok(TrainReport { seed: cfg.seed, epochs: records, best_epoch: best.0, best_dice: best.1, stopped_early, best: best.2 })
}
