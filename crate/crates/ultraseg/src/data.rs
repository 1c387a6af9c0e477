//! Manifests, image/mask ingestion, seeded train/test splits and the
//! on-disk synthetic dataset.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};
use ultraseg_core::imgproc::{resize_bilinear, resize_mask_nearest};
use ultraseg_core::metrics::Mask;
use ultraseg_core::synth::synth_sample;
use ultraseg_core::train::Sample;
use ultraseg_core::zoo::ModelConfig;
use ultraseg_core::{Rng, Shape, Tensor};

use crate::error::{Error, Result};

pub const INPUT_SIZE: usize = 256;
pub const TRAIN_FRACTION: f64 = 0.8;
const SPLIT_STREAM: u64 = 0x7370_6c69;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub center: Option<String>,
    pub modality: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    /// Seed the split was drawn with, when known.
    pub seed: Option<u64>,
}

fn tag(field: &str) -> Option<String> {
    (field != "-" && !field.is_empty()).then(|| field.to_string())
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Parses the tab-separated manifest format. Relative paths are resolved
    /// against `base`.
    pub fn parse(text: &str, path: &Path, base: &Path) -> Result<Manifest> {
        let err = |line: usize, detail: String| Error::Manifest { path: path.to_path_buf(), line, detail };
        let mut records = Vec::new();
        let mut seed = None;
        let mut ids = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("seed=") {
                    seed = Some(v.trim().parse().map_err(|_| err(n, format!("bad seed `{v}`")))?);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(err(n, format!("expected 6 tab-separated fields, found {}", f.len())));
            }
            if !ids.insert(f[0].to_string()) {
                return Err(err(n, format!("duplicate id `{}`", f[0])));
            }
            records.push(SampleRecord {
                id: f[0].to_string(),
                image: base.join(f[1]),
                mask: base.join(f[2]),
                split: f[3].parse().map_err(|e| err(n, e))?,
                center: tag(f[4]),
                modality: tag(f[5]),
            });
        }
        Ok(Manifest { records, seed })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    /// Serialises with paths written relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let mut out = String::from("# id\timage\tmask\tsplit\tcenter\tmodality\n");
        if let Some(s) = self.seed {
            out.push_str(&format!("# seed={s}\n"));
        }
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.id,
                rel(&r.image),
                rel(&r.mask),
                r.split,
                r.center.as_deref().unwrap_or("-"),
                r.modality.as_deref().unwrap_or("-"),
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        fs::write(path, self.to_text(base)).map_err(|e| Error::io(path, e))
    }
}

/// Shuffles `records` with `seed` and marks the first `round(fraction·n)` as train.
pub fn split_dataset(records: Vec<SampleRecord>, seed: u64, train_fraction: f64) -> Result<Manifest> {
    if records.len() < 2 {
        return Err(Error::Usage(format!("need at least 2 records to split, got {}", records.len())));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Usage(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let n = records.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(SPLIT_STREAM).shuffle(&mut order);
    let mut split = vec![Split::Test; n];
    for &i in &order[..n_train] {
        split[i] = Split::Train;
    }
    let records = records.into_iter().zip(split).map(|(r, split)| SampleRecord { split, ..r }).collect();
    Ok(Manifest { records, seed: Some(seed) })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Decode { path: path.to_path_buf(), detail: e.to_string() })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::EmptyImage { path: path.to_path_buf() });
    }
    Ok(img)
}

/// RGB image at its native size as `(1,3,H,W)` in [0,1].
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("rgb shape")
}

/// Inverse of [`rgb_to_tensor`] with rounding and clamping.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> RgbImage {
    let s = t.shape();
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            p.0[c] = (t.plane(0, c)[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img
}

/// Binary mask at native size; a pixel is foreground when its gray value exceeds 127.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = open(path)?.to_luma8();
    let data = g.pixels().map(|p| p.0[0] > 127).collect();
    Ok(Mask::new(g.height() as usize, g.width() as usize, data)?)
}

pub fn mask_to_gray(m: &Mask) -> GrayImage {
    let data = m.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
    GrayImage::from_raw(m.width as u32, m.height as u32, data).expect("mask size")
}

/// Image stretched bilinearly to 256×256 and mask resampled by nearest neighbour.
pub fn load_sample(record: &SampleRecord) -> Result<(Tensor<f32>, Mask)> {
    let image = resize_bilinear(&read_image(&record.image)?, INPUT_SIZE, INPUT_SIZE)?;
    let mask = resize_mask_nearest(&read_mask(&record.mask)?, INPUT_SIZE, INPUT_SIZE);
    Ok((image, mask))
}

/// Training samples for every record of `split`, in manifest order.
pub fn load_samples(manifest: &Manifest, split: Split, config: &ModelConfig) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .map(|r| {
            let (image, mask) = load_sample(r)?;
            Ok(Sample::new(r.id.clone(), image, mask, config)?)
        })
        .collect()
}

pub const MIN_SYNTH: usize = 2;

/// Writes `n` synthetic image/mask pairs plus `manifest.tsv` under `out_dir`
/// and returns the (split) manifest.
pub fn synth_dataset(n: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n < MIN_SYNTH {
        return Err(Error::Usage(format!("synth needs n >= {MIN_SYNTH}, got {n}")));
    }
    let (img_dir, mask_dir) = (out_dir.join("images"), out_dir.join("masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let s = synth_sample(seed, i as u64);
        let id = format!("synth_{i:04}");
        let image = img_dir.join(format!("{id}.png"));
        let mask = mask_dir.join(format!("{id}.png"));
        save_png(&image, |p| tensor_to_rgb(&s.image).save(p))?;
        save_png(&mask, |p| mask_to_gray(&s.mask).save(p))?;
        records.push(SampleRecord {
            id,
            image,
            mask,
            split: Split::Train,
            center: Some(s.center),
            modality: Some(s.modality),
        });
    }
    let manifest = split_dataset(records, seed, TRAIN_FRACTION)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

pub(crate) fn save_png(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    f(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), detail: other.to_string() },
    })
}
