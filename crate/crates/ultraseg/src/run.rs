//! Training runs over manifests and the FLOPs/parameter report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use ultraseg_core::train::{fit, Distill, EpochRecord, TrainConfig};
use ultraseg_core::zoo::{analytic_param_count, count_flops, to_bytes, Model, ModelConfig};
use ultraseg_core::Shape;

use crate::checkpoint::save_checkpoint;
use crate::data::{load_samples, Manifest, Split};
use crate::error::{Error, Result};
use crate::eval::SCHEMA_VERSION;

pub const BEST_CHECKPOINT: &str = "best.useg";
pub const FINAL_CHECKPOINT: &str = "final.useg";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "train_log.tsv";

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub schema_version: u32,
    pub model: String,
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub val_split: Split,
    pub config: TrainConfig,
    pub distilled: bool,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dice: f64,
    pub stopped_early: bool,
    pub best_checkpoint: String,
    pub final_checkpoint: String,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub elapsed_s: f64,
}

pub struct TrainRun<'a> {
    pub model: &'a str,
    pub manifest: &'a Manifest,
    pub val_split: Split,
    pub config: TrainConfig,
    pub teacher: Option<&'a Model>,
    pub out: &'a Path,
}

/// One line of the training log: epoch, mean loss, val Dice, best Dice, stopped flag.
pub fn log_line(r: &EpochRecord) -> String {
    format!("{}\t{:.6}\t{:.6}\t{:.6}\t{}", r.epoch, r.train_loss, r.val_dice, r.best_dice, u8::from(r.stopped))
}

/// Trains a freshly initialised model (initialised from the run seed) and
/// writes the best and final checkpoints, the log and the JSON report to `out`.
pub fn train_run(run: &TrainRun<'_>, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let started = Instant::now();
    let cfg = ModelConfig::preset(run.model)?;
    let train = load_samples(run.manifest, Split::Train, &cfg)?;
    let val = load_samples(run.manifest, run.val_split, &cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage(format!(
            "manifest has {} train and {} {} samples; both must be non-empty",
            train.len(),
            val.len(),
            run.val_split
        )));
    }
    fs::create_dir_all(run.out).map_err(|e| Error::io(run.out, e))?;
    let mut model = Model::build(&cfg, run.config.seed)?;
    let mut distill = run.teacher.map(|t| Distill::new(t, &model, run.config.seed, run.config.adam));
    let mut log = String::from("# epoch\ttrain_loss\tval_dice\tbest_dice\tstopped\n");
    let report = fit(&mut model, &train, &val, &run.config, distill.as_mut(), &mut |r| {
        log.push_str(&log_line(r));
        log.push('\n');
        on_epoch(r);
    })?;
    let path = |name: &str| -> PathBuf { run.out.join(name) };
    save_checkpoint(&path(BEST_CHECKPOINT), &report.best)?;
    save_checkpoint(&path(FINAL_CHECKPOINT), &model)?;
    fs::write(path(LOG_FILE), log).map_err(|e| Error::io(path(LOG_FILE), e))?;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        model: cfg.name.clone(),
        seed: run.config.seed,
        train_samples: train.len(),
        val_samples: val.len(),
        val_split: run.val_split,
        config: run.config,
        distilled: run.teacher.is_some() && run.config.weights.kd > 0.0,
        epochs: report.epochs,
        best_epoch: report.best_epoch,
        best_dice: report.best_dice,
        stopped_early: report.stopped_early,
        best_checkpoint: BEST_CHECKPOINT.into(),
        final_checkpoint: FINAL_CHECKPOINT.into(),
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("serialisable report");
    fs::write(path(REPORT_FILE), json).map_err(|e| Error::io(path(REPORT_FILE), e))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageMacs {
    pub name: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub schema_version: u32,
    pub model: String,
    pub input: [usize; 4],
    pub params_enumerated: usize,
    pub params_analytic: usize,
    pub macs: u64,
    pub flops: u64,
    pub gmacs: f64,
    pub stages: Vec<StageMacs>,
    pub checkpoint_bytes: usize,
}

pub fn flops_report(variant: &str, height: usize, width: usize) -> Result<FlopsReport> {
    let mut cfg = ModelConfig::preset(variant)?;
    cfg.input = (height, width);
    cfg.validate()?;
    let model = Model::build(&cfg, 0)?;
    let input = Shape::new(1, cfg.in_channels, height, width);
    let f = count_flops(&model, input)?;
    Ok(FlopsReport {
        schema_version: SCHEMA_VERSION,
        model: cfg.name.clone(),
        input: [1, cfg.in_channels, height, width],
        params_enumerated: model.param_count(),
        params_analytic: analytic_param_count(&cfg),
        macs: f.macs,
        flops: f.flops,
        gmacs: f.macs as f64 / 1e9,
        stages: f.stages.into_iter().map(|(name, macs)| StageMacs { name, macs }).collect(),
        checkpoint_bytes: to_bytes(&model).len(),
    })
}
