//! Throughput harness for the scan paths.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{scan_parallel, scan_recurrent, worker_pool};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "path,L,N,D,workers,wall_ns,throughput_tokens_per_s";

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub lens: Vec<usize>,
    pub states: Vec<usize>,
    pub width: usize,
    pub batch: usize,
    pub workers: Vec<usize>,
    pub chunk: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            lens: vec![8192],
            states: vec![16],
            width: 64,
            batch: 1,
            workers: vec![1, 2, 4],
            chunk: 64,
            reps: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub path: &'static str,
    pub len: usize,
    pub state: usize,
    pub width: usize,
    pub workers: usize,
    pub wall_ns: u128,
    pub throughput: f64,
    /// Sum of all outputs, rounded to five significant digits.
    pub checksum: String,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.1}",
            self.path, self.len, self.state, self.width, self.workers, self.wall_ns, self.throughput
        )
    }
}

struct Inputs {
    a_bar: Tensor<f32>,
    b_bar: Tensor<f32>,
    c: Tensor<f32>,
    x: Tensor<f32>,
}

fn random_inputs(batch: usize, len: usize, d: usize, n: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |shape: Vec<usize>, lo: f32, hi: f32| {
        let count = shape.iter().product();
        Tensor::new(shape, (0..count).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
    };
    Inputs {
        a_bar: draw(vec![batch, len, d, n], 0.5, 0.999),
        b_bar: draw(vec![batch, len, d, n], -0.1, 0.1),
        c: draw(vec![batch, len, n], -1.0, 1.0),
        x: draw(vec![batch, len, d], -1.0, 1.0),
    }
}

fn checksum(y: &Tensor<f32>) -> String {
    let s: f64 = y.data().iter().map(|&v| v as f64).sum();
    format!("{s:.4e}")
}

fn timed(reps: usize, mut f: impl FnMut() -> Result<Tensor<f32>>) -> Result<(u128, Tensor<f32>)> {
    let mut best = u128::MAX;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        let y = f()?;
        best = best.min(start.elapsed().as_nanos());
        out = Some(y);
    }
    Ok((best.max(1), out.expect("at least one repetition")))
}

/// Runs the sequential path and the chunked path at every worker count.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.chunk == 0 || spec.workers.iter().any(|&w| w == 0) {
        return Err(Error::Config("bench needs chunk >= 1 and workers >= 1".into()));
    }
    let mut rows = Vec::new();
    for &len in &spec.lens {
        for &n in &spec.states {
            let inp = random_inputs(spec.batch, len, spec.width, n, spec.seed);
            let tokens = (spec.batch * len) as f64;
            let row = |path, workers, wall_ns: u128, y: &Tensor<f32>| BenchRow {
                path,
                len,
                state: n,
                width: spec.width,
                workers,
                wall_ns,
                throughput: tokens / (wall_ns as f64 * 1e-9),
                checksum: checksum(y),
            };
            let (ns, y) = timed(spec.reps, || scan_recurrent(&inp.a_bar, &inp.b_bar, &inp.c, &inp.x))?;
            rows.push(row("sequential", 1, ns, &y));
            for &w in &spec.workers {
                let pool = worker_pool(w)?;
                let (ns, y) = timed(spec.reps, || {
                    scan_parallel(&inp.a_bar, &inp.b_bar, &inp.c, &inp.x, spec.chunk, Some(&pool))
                })?;
                rows.push(row("parallel", w, ns, &y));
            }
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[BenchRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Throughput of `row` relative to the sequential row with the same `L`, `N`.
pub fn speedup(rows: &[BenchRow], row: &BenchRow) -> Option<f64> {
    rows.iter()
        .find(|r| r.path == "sequential" && r.len == row.len && r.state == row.state)
        .map(|s| row.throughput / s.throughput)
}
