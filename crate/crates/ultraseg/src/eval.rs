//! Model evaluation over a manifest split, with per-tag summaries.

use std::collections::BTreeMap;

use serde::Serialize;
use ultraseg_core::metrics::{binarize, sample_metrics, Mask, MetricsReport, SampleMetrics};
use ultraseg_core::nn::sigmoid;
use ultraseg_core::zoo::Model;
use ultraseg_core::Tensor;

use crate::data::{load_sample, Manifest, SampleRecord, Split};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagSummary {
    pub count: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model: String,
    pub split: Split,
    pub threshold: f64,
    pub count: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_hd95: Option<f64>,
    pub undefined_hd95: usize,
    pub samples: Vec<SampleMetrics>,
    /// `"center"` / `"modality"` → tag value → summary. Empty when no record is tagged.
    pub by_tag: BTreeMap<String, BTreeMap<String, TagSummary>>,
}

/// Thresholded prediction for one `(1,3,H,W)` image.
pub fn predict_mask(model: &Model, image: &Tensor<f32>, threshold: f64) -> Result<(Mask, Tensor<f32>)> {
    let prob = model.predict_logits(image)?.map(sigmoid);
    let mask = binarize(&prob, threshold)?.pop().expect("batch of one");
    Ok((mask, prob))
}

fn summarize(items: &[&SampleMetrics]) -> TagSummary {
    let r = MetricsReport::from_samples(items.iter().map(|&s| s.clone()).collect());
    TagSummary { count: items.len(), mean_dice: r.mean_dice, mean_iou: r.mean_iou, mean_hd95: r.mean_hd95 }
}

fn by_tag(records: &[&SampleRecord], samples: &[SampleMetrics]) -> BTreeMap<String, BTreeMap<String, TagSummary>> {
    let index: BTreeMap<&str, &SampleMetrics> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = BTreeMap::new();
    for (kind, get) in [
        ("center", (|r: &SampleRecord| r.center.clone()) as fn(&SampleRecord) -> Option<String>),
        ("modality", |r: &SampleRecord| r.modality.clone()),
    ] {
        let mut groups: BTreeMap<String, Vec<&SampleMetrics>> = BTreeMap::new();
        for r in records {
            if let (Some(t), Some(m)) = (get(r), index.get(r.id.as_str())) {
                groups.entry(t).or_default().push(m);
            }
        }
        if !groups.is_empty() {
            out.insert(kind.to_string(), groups.iter().map(|(k, v)| (k.clone(), summarize(v))).collect());
        }
    }
    out
}

fn eval_record(model: &Model, r: &SampleRecord) -> Result<SampleMetrics> {
    let (image, gt) = load_sample(r)?;
    let (pred, _) = predict_mask(model, &image, THRESHOLD)?;
    Ok(sample_metrics(&r.id, &pred, &gt)?)
}

/// Evaluates every record of `split` at 256×256, fanning samples out over
/// `threads` workers. The report does not depend on the thread count.
pub fn evaluate_split(model: &Model, manifest: &Manifest, split: Split, threads: usize) -> Result<EvalReport> {
    let records: Vec<&SampleRecord> = manifest.split(split).collect();
    if records.is_empty() {
        return Err(Error::Usage(format!("split `{split}` has no samples")));
    }
    let threads = threads.clamp(1, records.len());
    let per = records.len().div_ceil(threads);
    let results: Vec<Result<Vec<SampleMetrics>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(per)
            .map(|chunk| s.spawn(move || chunk.iter().map(|r| eval_record(model, r)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut samples = Vec::with_capacity(records.len());
    for r in results {
        samples.extend(r?);
    }
    let report = MetricsReport::from_samples(samples);
    let by_tag = by_tag(&records, &report.samples);
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        model: model.config().name.clone(),
        split,
        threshold: THRESHOLD,
        count: report.samples.len(),
        mean_dice: report.mean_dice,
        mean_iou: report.mean_iou,
        mean_hd95: report.mean_hd95,
        undefined_hd95: report.undefined_hd95,
        samples: report.samples,
        by_tag,
    })
}

/// Pairs predictions with ground truth by id; every id must appear on both sides.
pub fn pair_by_id<'a>(pred: &'a [(String, Mask)], gt: &'a [(String, Mask)]) -> Result<Vec<(&'a str, &'a Mask, &'a Mask)>> {
    let gt_index: BTreeMap<&str, &Mask> = gt.iter().map(|(id, m)| (id.as_str(), m)).collect();
    let pred_ids: std::collections::HashSet<&str> = pred.iter().map(|(id, _)| id.as_str()).collect();
    if let Some((id, _)) = gt.iter().find(|(id, _)| !pred_ids.contains(id.as_str())) {
        return Err(Error::Pairing(id.clone()));
    }
    pred.iter()
        .map(|(id, m)| gt_index.get(id.as_str()).map(|g| (id.as_str(), m, *g)).ok_or_else(|| Error::Pairing(id.clone())))
        .collect()
}
