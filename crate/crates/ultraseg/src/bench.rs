//! Forward-pass throughput and latency benchmark.

use std::sync::Barrier;
use std::time::Instant;

use serde::Serialize;
use ultraseg_core::zoo::Model;
use ultraseg_core::{Rng, Shape, Tensor};

use crate::error::{Error, Result};
use crate::eval::SCHEMA_VERSION;

pub const MIN_ITERS: usize = 10;
pub const CLOCK: &str = "monotonic clock around each forward pass; fps = images / wall time of the timed region";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub model: String,
    pub input: [usize; 4],
    pub threads: usize,
    pub warmup: usize,
    pub iters: usize,
    pub fps: f64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub wall_s: f64,
    /// Whether the single worker was pinned to one core.
    pub affinity_applied: bool,
    pub clock: &'static str,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub threads: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { threads: 1, iters: 1000, warmup: 10, seed: 1 }
    }
}

#[cfg(target_os = "linux")]
fn pin_current_thread() -> bool {
    // SAFETY: plain libc calls on a zeroed cpu_set_t owned by this frame.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_current_thread() -> bool {
    false
}

fn percentile_ms(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

struct WorkerResult {
    latencies: Vec<f64>,
    start: Instant,
    end: Instant,
    pinned: bool,
}

/// Runs `warmup` untimed and `iters` timed forward passes split across
/// `threads` workers, each owning a fixed random input.
pub fn run_bench(model: &Model, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.threads == 0 || cfg.iters < MIN_ITERS {
        return Err(Error::Usage(format!("bench needs threads >= 1 and iters >= {MIN_ITERS}")));
    }
    let (h, w) = model.config().input;
    let shape = Shape::new(1, model.config().in_channels, h, w);
    model.check_input(shape)?;
    let barrier = Barrier::new(cfg.threads);
    let results: Vec<Result<WorkerResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.threads)
            .map(|k| {
                let n = cfg.iters / cfg.threads + usize::from(k < cfg.iters % cfg.threads);
                let barrier = &barrier;
                s.spawn(move || -> Result<WorkerResult> {
                    let pinned = cfg.threads == 1 && pin_current_thread();
                    let mut rng = Rng::new(cfg.seed).fork(k as u64);
                    let input = Tensor::<f32>::uniform(shape, 0.0, 1.0, &mut rng);
                    for _ in 0..cfg.warmup {
                        std::hint::black_box(model.predict_logits(&input)?);
                    }
                    let mut latencies = Vec::with_capacity(n);
                    barrier.wait();
                    let start = Instant::now();
                    for _ in 0..n {
                        let t = Instant::now();
                        std::hint::black_box(model.predict_logits(&input)?);
                        latencies.push(t.elapsed().as_secs_f64() * 1e3);
                    }
                    Ok(WorkerResult { latencies, start, end: Instant::now(), pinned })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench worker panicked")).collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let start = results.iter().map(|r| r.start).min().expect("one worker");
    let end = results.iter().map(|r| r.end).max().expect("one worker");
    let wall_s = (end - start).as_secs_f64();
    let mut lat: Vec<f64> = results.iter().flat_map(|r| r.latencies.iter().copied()).collect();
    lat.sort_by(|a, b| a.total_cmp(b));
    Ok(BenchReport {
        schema_version: SCHEMA_VERSION,
        model: model.config().name.clone(),
        input: [shape.n, shape.c, shape.h, shape.w],
        threads: cfg.threads,
        warmup: cfg.warmup,
        iters: cfg.iters,
        fps: cfg.iters as f64 / wall_s,
        latency_mean_ms: lat.iter().sum::<f64>() / lat.len() as f64,
        latency_p50_ms: percentile_ms(&lat, 0.50),
        latency_p95_ms: percentile_ms(&lat, 0.95),
        wall_s,
        affinity_applied: results.iter().all(|r| r.pinned),
        clock: CLOCK,
    })
}
