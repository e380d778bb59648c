//! Invariant suites run by `arm selfcheck` and the acceptance tests.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::{classify_forward, encoder_param_count, init_encoder, init_head};
use crate::config::{ModelConfig, ScanMode};
use crate::error::{Error, Result};
use crate::layout::{invert_permutation, make_layout, order_permutation, OrderKind};
use crate::objective::{ar_loss, init_pretrain, pretrain_forward};
use crate::params::{gradcheck_params, ParamStore};
use crate::scan::{discretize_with, lti_kernel_apply, scan_parallel, scan_recurrent, Discretization, ScanPath, SERIES_THRESHOLD};
use crate::tensor::{Element, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::Config(format!("unknown selfcheck level {other:?} (fast, full)"))),
        }
    }
}

/// Knobs for fault injection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hooks {
    /// `|Δ·a|` below which the ZOH factor uses its series
    pub series_threshold: f64,
}

impl Default for Hooks {
    fn default() -> Self {
        Self {
            series_threshold: SERIES_THRESHOLD,
        }
    }
}

/// Outcome of one invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub module: &'static str,
    pub invariant: &'static str,
    pub observed: f64,
    pub bound: f64,
    pub elapsed: Duration,
}

impl Finding {
    fn new(module: &'static str, invariant: &'static str, observed: f64, bound: f64, started: Instant) -> Self {
        Self {
            module,
            invariant,
            observed,
            bound,
            elapsed: started.elapsed(),
        }
    }

    pub fn passed(&self) -> bool {
        self.observed <= self.bound
    }
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}: observed {:.3e} vs bound {:.3e} ({:.2}s)",
            if self.passed() { "ok  " } else { "FAIL" },
            self.module,
            self.invariant,
            self.observed,
            self.bound,
            self.elapsed.as_secs_f64()
        )
    }
}

/// Runs every check of `level`.
pub fn run(level: Level, hooks: &Hooks) -> Result<Vec<Finding>> {
    let full = level == Level::Full;
    let mut out = Vec::new();

    let lens: Vec<usize> = if full { (1..=64).collect() } else { vec![1, 2, 7, 33, 64] };
    let seeds = if full { 20 } else { 2 };
    let t = Instant::now();
    let e = scan_agreement::<f64>(&lens, &[1, 4, 16], &[1, 8], seeds)?;
    out.push(Finding::new("ssm-scan", "three paths agree (f64)", e, 1e-12, t));
    let t = Instant::now();
    let e = scan_agreement::<f32>(&lens, &[1, 4, 16], &[1, 8], seeds)?;
    out.push(Finding::new("ssm-scan", "three paths agree (f32)", e, 1e-5, t));

    let t = Instant::now();
    let e = zoh_continuity(hooks.series_threshold)?;
    out.push(Finding::new("ssm-scan", "zoh continuity", e, 1e-9, t));

    let t = Instant::now();
    let bad = causality_failures(if full { 50 } else { 10 }, 0)?;
    out.push(Finding::new("ar-objective", "causality", bad as f64, 0.0, t));

    let t = Instant::now();
    let bad = order_bijection_failures(if full { 20 } else { 4 });
    out.push(Finding::new("sequence-layout", "order bijection", bad as f64, 0.0, t));

    if full {
        let t = Instant::now();
        let bad = table4_rows().iter().filter(|r| r.clusters != r.expected).count();
        out.push(Finding::new("sequence-layout", "cluster table", bad as f64, 0.0, t));

        let t = Instant::now();
        let n = encoder_param_count(&ModelConfig::arm_b()) as f64;
        out.push(Finding::new("arch-blocks", "base size count", (n / 85e6 - 1.0).abs(), 0.15, t));

        let t = Instant::now();
        let e = pretrain_gradient_errors(0, Some(16))?.into_values().fold(0.0, f64::max);
        out.push(Finding::new("tensor-autodiff", "pretrain gradients (f64)", e, 1e-4, t));
        let t = Instant::now();
        let e = classifier_gradient_errors(1, Some(16))?.into_values().fold(0.0, f64::max);
        out.push(Finding::new("tensor-autodiff", "classifier gradients (f64)", e, 1e-4, t));
    }
    Ok(out)
}

/// A discretized time-invariant system and its broadcast form.
pub struct LtiCase<T: Element> {
    /// `[D, N]`
    pub a_bar: Tensor<T>,
    /// `[D, N]`
    pub b_bar: Tensor<T>,
    /// `[N]`
    pub c: Tensor<T>,
    /// `[1, L, D]`
    pub x: Tensor<T>,
}

/// Diagonal `a = −(1..=N)`, log-uniform `Δ ∈ [1e-3, 1e-1]`, ZOH in f64.
pub fn lti_case<T: Element>(seed: u64, l: usize, n: usize, d: usize) -> Result<LtiCase<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..d).flat_map(|_| (1..=n).map(|k| -(k as f64))).collect();
    let delta: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.gen_range(-3.0..-1.0))).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (a_bar, b_bar) = discretize_with(
        Discretization::ZohExact,
        &Tensor::new(vec![d, n], a)?,
        &Tensor::new(vec![1, 1, d], delta)?,
        &Tensor::new(vec![1, 1, n], b)?,
        SERIES_THRESHOLD,
    )?;
    Ok(LtiCase {
        a_bar: a_bar.reshape(vec![d, n])?.cast(),
        b_bar: b_bar.reshape(vec![d, n])?.cast(),
        c: Tensor::<f64>::new(vec![n], c)?.cast(),
        x: Tensor::<f64>::new(vec![1, l, d], x)?.cast(),
    })
}

/// Largest pairwise gap between the recurrent, chunked and kernel paths.
pub fn scan_agreement<T: Element>(lens: &[usize], states: &[usize], widths: &[usize], seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for &l in lens {
        for &n in states {
            for &d in widths {
                for s in 0..seeds {
                    let case = lti_case::<T>(s * 1_000_003 + (l * 131 + n * 17 + d) as u64, l, n, d)?;
                    let a = case.a_bar.expand(&[1, l, d, n])?;
                    let b = case.b_bar.expand(&[1, l, d, n])?;
                    let c = case.c.expand(&[1, l, n])?;
                    let seq = scan_recurrent(&a, &b, &c, &case.x)?;
                    let par = scan_parallel(&a, &b, &c, &case.x, 8, None)?;
                    let lti = lti_kernel_apply(&case.a_bar, &case.b_bar, &case.c, &case.x)?;
                    worst = worst.max(seq.max_abs_diff(&par)).max(seq.max_abs_diff(&lti)).max(par.max_abs_diff(&lti));
                }
            }
        }
    }
    Ok(worst)
}

/// Largest relative error of the ZOH input factor against `expm1(Δa)/a`,
/// swept across `|Δa| ∈ [1e-8, 1]` and on both sides of `threshold`.
pub fn zoh_continuity(threshold: f64) -> Result<f64> {
    let mut zs: Vec<f64> = (0..=80).map(|i| 10f64.powf(-8.0 + i as f64 * 0.1)).collect();
    for s in [1.0 - 1e-9, 1.0 + 1e-9, 0.5, 2.0] {
        zs.push(SERIES_THRESHOLD * s);
        zs.push(threshold * s);
    }
    let a = Tensor::new(vec![1, 1], vec![-1.0f64])?;
    let b = Tensor::new(vec![1, zs.len(), 1], vec![1.0; zs.len()])?;
    let delta = Tensor::new(vec![1, zs.len(), 1], zs.clone())?;
    let (_, b_bar) = discretize_with(Discretization::ZohExact, &a, &delta, &b, threshold)?;
    Ok(zs
        .iter()
        .zip(b_bar.data())
        .map(|(&z, &got)| {
            let want = -(-z).exp_m1();
            ((got - want) / want).abs()
        })
        .fold(0.0, f64::max))
}

/// Tiny model: width 8, depth 2, `N = 4`, 16 tokens of 2×2 patches on 8×8.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        width: 8,
        depth: 2,
        state_dim: 4,
        patch_size: 2,
        cluster_size: 4,
        image_size: [8, 8],
        dec_depth: 1,
        dec_width: 8,
        num_classes: 3,
        scan_path: ScanPath::Sequential,
        ..ModelConfig::default()
    }
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Trials in which a prediction at some position `≤ t` changed after
/// the inputs at positions `> t` were redrawn.
pub fn causality_failures(trials: usize, seed: u64) -> Result<usize> {
    let orders = [
        OrderKind::RowForward,
        OrderKind::RowBackward,
        OrderKind::ColForward,
        OrderKind::ColBackward,
        OrderKind::Random(seed),
    ];
    let mut failures = 0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919).wrapping_add(trial as u64));
        let cfg = ModelConfig {
            order: orders[trial % orders.len()],
            ..tiny_model()
        };
        let layout = cfg.layout()?;
        let (l, dim) = (layout.num_patches(), layout.token_dim());
        let store: ParamStore<f64> = init_pretrain(&cfg, &mut rng)?;
        let run = |tokens: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut tape = Tape::new();
            let bound = store.bind_frozen(&mut tape);
            let x = tape.constant(tokens.clone());
            let y = pretrain_forward(&mut tape, x, &layout, &bound, &cfg)?;
            Ok(tape.value(y).clone())
        };
        let tokens = random_tensor(&mut rng, vec![1, l, dim])?;
        let t = rng.gen_range(0..l - 1);
        let mut moved = tokens.clone();
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        for v in &mut moved.data_mut()[(t + 1) * dim..] {
            *v = rng.gen_range(-scale..scale);
        }
        let (a, b) = (run(&tokens)?, run(&moved)?);
        let keep = (t + 1) * dim;
        if a.data()[..keep] != b.data()[..keep] {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Permutations (fixed orders plus `random_seeds` random ones, on a range
/// of grids) that fail to invert, plus layouts whose token positions are
/// not a bijection.
pub fn order_bijection_failures(random_seeds: u64) -> usize {
    let grids = [(1, 1), (1, 7), (3, 3), (2, 5), (4, 4), (6, 9), (12, 12)];
    let mut orders: Vec<OrderKind> = OrderKind::FIXED.to_vec();
    orders.extend((0..random_seeds).map(OrderKind::Random));
    let mut bad = 0;
    for &(r, c) in &grids {
        for &o in &orders {
            let p = order_permutation(r, c, o);
            let ok = p.len() == r * c
                && invert_permutation(&p).is_some_and(|inv| inv.iter().enumerate().all(|(i, &j)| p[j] == i));
            bad += usize::from(!ok);
        }
    }
    for &o in &orders {
        match make_layout(48, 32, 4, 8, o) {
            Ok(layout) => {
                let pos = layout.token_positions();
                bad += usize::from(pos.len() != layout.num_patches() || invert_permutation(&pos).is_none());
            }
            Err(_) => bad += 1,
        }
    }
    bad
}

/// One row of the cluster-size table on 192² with 16-pixel patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterRow {
    pub cluster_px: usize,
    pub expected: usize,
    pub clusters: usize,
    pub patches_per_cluster: usize,
}

pub fn table4_rows() -> Vec<ClusterRow> {
    [(96, 4), (64, 9), (48, 16), (32, 36), (16, 144)]
        .into_iter()
        .map(|(s, expected)| {
            let (clusters, k) = make_layout(192, 192, 16, s, OrderKind::RowForward)
                .map(|l| (l.num_clusters(), l.patches_per_cluster()))
                .unwrap_or((0, 0));
            ClusterRow {
                cluster_px: s,
                expected,
                clusters,
                patches_per_cluster: k,
            }
        })
        .collect()
}

/// Central-difference step of the gradient checks.
pub const FD_STEP: f64 = 1e-4;

/// Takes every step size and readout off its near-zero init so each parameter gets a gradient well above roundoff.
fn condition(store: &mut ParamStore<f64>, rng: &mut impl Rng) {
    for (name, t) in store.iter_mut() {
        if name.ends_with("b_delta") {
            t.data_mut().fill(0.5);
        } else if name.ends_with("proj_out.w") || name == "head.w" {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
}

/// Relative finite-difference error per parameter of the pretraining loss
/// of [`tiny_model`] in f64.
pub fn pretrain_gradient_errors(seed: u64, max_coords: Option<usize>) -> Result<BTreeMap<String, f64>> {
    let cfg = tiny_model();
    let layout = cfg.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParamStore<f64> = init_pretrain(&cfg, &mut rng)?;
    condition(&mut store, &mut rng);
    let (l, dim, k) = (layout.num_patches(), layout.token_dim(), layout.patches_per_cluster());
    let tokens = random_tensor(&mut rng, vec![2, l, dim])?;
    let targets = random_tensor(&mut rng, vec![2, l - k, dim])?;
    gradcheck_params(
        &store,
        |tape, bound| {
            let x = tape.constant(tokens.clone());
            let y = tape.constant(targets.clone());
            let p = pretrain_forward(tape, x, &layout, bound, &cfg)?;
            ar_loss(tape, p, y, k)
        },
        FD_STEP,
        max_coords,
    )
}

/// Same as [`pretrain_gradient_errors`] for the four-direction classifier.
pub fn classifier_gradient_errors(seed: u64, max_coords: Option<usize>) -> Result<BTreeMap<String, f64>> {
    let cfg = ModelConfig {
        scan_mode: ScanMode::Cross4scan,
        ..tiny_model()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store: ParamStore<f64> = init_encoder(&cfg, &mut rng)?;
    init_head(&mut store, &cfg, &mut rng);
    condition(&mut store, &mut rng);
    let tokens = random_tensor(&mut rng, vec![2, cfg.seq_len(), cfg.token_dim()])?;
    gradcheck_params(
        &store,
        |tape, bound| {
            let x = tape.constant(tokens.clone());
            let logits = classify_forward(tape, x, bound, &cfg)?;
            tape.cross_entropy(logits, &[2, 0])
        },
        FD_STEP,
        max_coords,
    )
}
