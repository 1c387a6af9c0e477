//! The `useg` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use ultraseg_core::imgproc::{resize_bilinear, resize_mask_nearest};
use ultraseg_core::optim::AdamConfig;
use ultraseg_core::train::TrainConfig;
use ultraseg_core::zoo::{Model, ModelConfig, VARIANTS};

use crate::bench::{run_bench, BenchConfig};
use crate::checkpoint::load_checkpoint;
use crate::data::{mask_to_gray, read_image, save_png, synth_dataset, Manifest, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, predict_mask, SCHEMA_VERSION};
use crate::run::{flops_report, log_line, train_run, TrainRun};

pub const THREADS_ENV: &str = "USEG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "useg", version, about = "Train, evaluate and benchmark ultra-lightweight segmentation models on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Write predicted masks for images.
    Infer(InferArgs),
    /// Dice / IoU / HD95 of a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Forward-pass throughput and latency.
    Bench(BenchArgs),
    /// Parameter and MAC counts.
    Flops(FlopsArgs),
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
}

fn variant(s: &str) -> std::result::Result<String, String> {
    if VARIANTS.contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!("unknown model `{s}`; expected one of {}", VARIANTS.join(", ")))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "ultraseg-108k", value_parser = variant)]
    pub model: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    /// Split used for early stopping.
    #[arg(long, default_value = "test")]
    pub val_split: Split,
    /// Teacher checkpoint for feature distillation.
    #[arg(long, requires = "kd_weight")]
    pub teacher: Option<PathBuf>,
    #[arg(long, requires = "teacher")]
    pub kd_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Also write the probability map as an 8-bit PNG.
    #[arg(long)]
    pub save_prob: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_parser = variant, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pub model: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = 1000)]
    pub iters: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, value_parser = variant)]
    pub model: String,
    #[arg(long, default_value_t = 256)]
    pub height: usize,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Worker cap from the environment, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn capped(requested: usize) -> usize {
    thread_cap().map_or(requested, |c| requested.min(c))
}

fn emit<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("serialisable report");
    writeln!(out, "{json}").map_err(|e| Error::io("<stdout>", e))
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = Manifest::load(&a.data)?;
    let teacher = a.teacher.as_deref().map(load_checkpoint).transpose()?;
    let mut config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        patience: a.patience,
        seed: a.seed,
        adam: AdamConfig { lr: a.lr, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    config.weights.kd = a.kd_weight.unwrap_or(0.0);
    config.validate()?;
    let run = TrainRun {
        model: &a.model,
        manifest: &manifest,
        val_split: a.val_split,
        config,
        teacher: teacher.as_ref(),
        out: &a.out,
    };
    let summary = train_run(&run, &mut |r| eprintln!("{}", log_line(r)))?;
    emit(out, &summary)
}

#[derive(Serialize)]
struct InferOutput {
    schema_version: u32,
    model: String,
    threshold: f64,
    masks: Vec<PathBuf>,
    probabilities: Vec<PathBuf>,
}

fn infer_one(model: &Model, input: &Path, a: &InferArgs, written: &mut Vec<PathBuf>) -> Result<(PathBuf, Option<PathBuf>)> {
    let image = read_image(input)?;
    let s = image.shape();
    let (h, w) = model.config().input;
    let (mask, prob) = predict_mask(model, &resize_bilinear(&image, h, w)?, a.threshold)?;
    let stem = input.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let mask_path = a.out.join(format!("{stem}_mask.png"));
    let full = resize_mask_nearest(&mask, s.h, s.w);
    written.push(mask_path.clone());
    save_png(&mask_path, |p| mask_to_gray(&full).save(p))?;
    let mut prob_path = None;
    if a.save_prob {
        let p = a.out.join(format!("{stem}_prob.png"));
        let gray: Vec<u8> = prob.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(w as u32, h as u32, gray).expect("probability map size");
        written.push(p.clone());
        save_png(&p, |path| img.save(path))?;
        prob_path = Some(p);
    }
    Ok((mask_path, prob_path))
}

fn cmd_infer(a: &InferArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = Vec::new();
    let mut report =
        InferOutput { schema_version: SCHEMA_VERSION, model: model.config().name.clone(), threshold: a.threshold, masks: vec![], probabilities: vec![] };
    for input in &a.input {
        match infer_one(&model, input, a, &mut written) {
            Ok((m, p)) => {
                report.masks.push(m);
                report.probabilities.extend(p);
            }
            Err(e) => {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                return Err(e);
            }
        }
    }
    emit(out, &report)
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let manifest = Manifest::load(&a.data)?;
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = evaluate_split(&model, &manifest, a.split, capped(a.threads.unwrap_or(default)))?;
    emit(out, &report)
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let model = match (&a.model, &a.checkpoint) {
        (_, Some(path)) => load_checkpoint(path)?,
        (Some(name), None) => Model::build(&ModelConfig::preset(name)?, 1)?,
        (None, None) => return Err(Error::Usage("bench needs --model or --checkpoint".into())),
    };
    let cfg = BenchConfig { threads: capped(a.threads), iters: a.iters, warmup: a.warmup, ..BenchConfig::default() };
    emit(out, &run_bench(&model, &cfg)?)
}

#[derive(Serialize)]
struct SynthOutput {
    schema_version: u32,
    manifest: PathBuf,
    n: usize,
    seed: u64,
    train: usize,
    test: usize,
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let m = synth_dataset(a.n, a.seed, &a.out)?;
    emit(
        out,
        &SynthOutput {
            schema_version: SCHEMA_VERSION,
            manifest: a.out.join("manifest.tsv"),
            n: a.n,
            seed: a.seed,
            train: m.split(Split::Train).count(),
            test: m.split(Split::Test).count(),
        },
    )
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Bench(a) => cmd_bench(a, out),
        Command::Flops(a) => emit(out, &flops_report(&a.model, a.height, a.width)?),
        Command::Synth(a) => cmd_synth(a, out),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. JSON goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
