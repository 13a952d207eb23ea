//! Per-image training-step timing for a square dense layer versus a square
//! circulant layer of the same size.
//!
//! One timed step is forward, backward, and an SGD update on a single image.
//! The dense update is fused into the backward sweep so that the largest
//! sizes need only one `d × d` matrix in memory.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::circulant::{CirculantLayer, Mode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::DenseLayer;

pub const MIN_REPS: usize = 10;
const STEP_LR: f64 = 1e-6;
/// Relative agreement required between the two layers before timing starts.
const GATE_TOLERANCE: f64 = 1e-9;

static BENCH_RUNNING: AtomicBool = AtomicBool::new(false);

struct BenchGuard;

impl BenchGuard {
    fn acquire() -> Result<BenchGuard> {
        BENCH_RUNNING
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| BenchGuard)
            .map_err(|_| Error::State("another benchmark is already running".into()))
    }
}

impl Drop for BenchGuard {
    fn drop(&mut self) {
        BENCH_RUNNING.store(false, Ordering::Release);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub d: usize,
    pub dense_ms: f64,
    pub circ_ms: f64,
    /// `dense_ms / circ_ms`.
    pub speedup: f64,
    /// Dense floats over circulant floats; equals `d` for square layers.
    pub space_ratio: f64,
    /// Images per timing sample; above 1 when the clock was too coarse.
    pub images_per_sample: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub reps: usize,
    pub warmup: usize,
    pub environment: String,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "d,dense_ms,circ_ms,speedup,space_ratio";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.4},{}",
                r.d, r.dense_ms, r.circ_ms, r.speedup, r.space_ratio
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>12} {:>12} {:>9} {:>12}\n",
            "d", "dense ms", "circ ms", "speedup", "space saving"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8} {:>12.4} {:>12.4} {:>8.2}x {:>11}x",
                r.d, r.dense_ms, r.circ_ms, r.speedup, r.space_ratio
            );
            if let Some(note) = &r.note {
                let _ = writeln!(out, "         note: {note}");
            }
        }
        let _ = write!(
            out,
            "median of {} reps after {} warmup, single thread; {}",
            self.reps, self.warmup, self.environment
        );
        out
    }
}

pub fn environment_note() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{}, {cpus} logical cpus",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Smallest nonzero step the monotonic clock reports.
fn clock_granularity() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..50 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let m = samples.len() / 2;
    if samples.len().is_multiple_of(2) {
        (samples[m - 1] + samples[m]) / 2.0
    } else {
        samples[m]
    }
}

/// Median milliseconds per image of `step`, widening the number of images
/// per sample until a sample spans at least ten clock ticks.
fn time_per_image(
    reps: usize,
    warmup: usize,
    granularity: Duration,
    mut step: impl FnMut() -> Result<()>,
) -> Result<(f64, usize)> {
    for _ in 0..warmup {
        step()?;
    }
    let mut batch = 1usize;
    loop {
        let mut samples = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            for _ in 0..batch {
                step()?;
            }
            samples.push(t0.elapsed().as_secs_f64());
        }
        let med = median(&mut samples);
        if med >= 10.0 * granularity.as_secs_f64() || batch >= 1 << 20 {
            return Ok((med * 1e3 / batch as f64, batch));
        }
        batch *= 2;
    }
}

/// Times a `d → d` dense and circulant training step on the same random image.
pub fn bench_layer(d: usize, reps: usize, warmup: usize, seed: u64) -> Result<BenchRow> {
    let _guard = BenchGuard::acquire()?;
    bench_layer_unlocked(d, reps, warmup, seed)
}

fn bench_layer_unlocked(d: usize, reps: usize, warmup: usize, seed: u64) -> Result<BenchRow> {
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::Argument(format!(
            "benchmark size {d} is not a power of two"
        )));
    }
    if reps < MIN_REPS {
        return Err(Error::Argument(format!(
            "need at least {MIN_REPS} reps, got {reps}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_vec(1, d, (0..d).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let upstream = Matrix::from_vec(1, d, (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let mut circ = CirculantLayer::new(d, d, Mode::Trained, seed)?;
    let mut dense = DenseLayer::from_matrix(circ.to_dense())?;

    let y_circ = circ.forward(&x)?.0;
    let y_dense = dense.apply(&x)?;
    let scale = y_dense
        .as_slice()
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()));
    let gap = y_circ.max_abs_diff(&y_dense);
    if gap > GATE_TOLERANCE * scale {
        return Err(Error::Data(format!(
            "dense and circulant outputs differ by {gap:e} at d={d}; refusing to time"
        )));
    }

    let granularity = clock_granularity();
    let (dense_ms, dense_batch) = time_per_image(reps, warmup, granularity, || {
        let (_, cache) = dense.forward(&x)?;
        dense.sgd_backward_in_place(&upstream, &cache, STEP_LR)?;
        Ok(())
    })?;
    drop(dense);

    let (circ_ms, circ_batch) = time_per_image(reps, warmup, granularity, || {
        let (_, cache) = circ.forward(&x)?;
        let g = circ.backward(&upstream, &cache)?;
        let step: Vec<f64> = g.grad_r.iter().map(|v| -STEP_LR * v).collect();
        circ.apply_update(&step)
    })?;

    let images_per_sample = dense_batch.max(circ_batch);
    let note = (images_per_sample > 1).then(|| {
        format!(
            "clock granularity {granularity:?}; timed {dense_batch} dense / {circ_batch} circulant images per sample"
        )
    });
    let dense_floats = (d * d) as f64;
    Ok(BenchRow {
        d,
        dense_ms,
        circ_ms,
        speedup: dense_ms / circ_ms,
        space_ratio: dense_floats / circ.param_count().0 as f64,
        images_per_sample,
        note,
    })
}

/// One row per distinct size, ascending.
pub fn bench_sweep(dims: &[usize], reps: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if dims.is_empty() {
        return Err(Error::Argument("no benchmark sizes given".into()));
    }
    let _guard = BenchGuard::acquire()?;
    let mut sorted = dims.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let rows = sorted
        .iter()
        .map(|&d| bench_layer_unlocked(d, reps, warmup, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        rows,
        reps,
        warmup,
        environment: environment_note(),
    })
}

/// True when each speedup is at least `1 − tolerance` times the previous one.
pub fn speedup_nondecreasing(rows: &[BenchRow], tolerance: f64) -> bool {
    rows.windows(2)
        .all(|w| w[1].speedup >= w[0].speedup * (1.0 - tolerance))
}
