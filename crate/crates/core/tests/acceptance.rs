//! End-to-end acceptance run.
//!
//! Prints one PASS/FAIL line per item and fails if any item fails.
//! `ARM_ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed items.

use std::fmt::Write as _;
use std::io::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use arm_core::arch::encoder_param_count;
use arm_core::config::ModelConfig;
use arm_core::data::{generate_synthetic, SyntheticSpec};
use arm_core::layout::OrderKind;
use arm_core::scan::bench::{run_bench, speedup, BenchSpec};
use arm_core::scan::ScanPath;
use arm_core::selfcheck::{
    causality_failures, classifier_gradient_errors, order_bijection_failures, pretrain_gradient_errors, scan_agreement,
    table4_rows,
};
use arm_core::train::{
    run_finetune, run_pretrain, smoothed_tail, Checkpoint, MetricRow, RunConfig, RunOptions, Stage, LAST_CKPT,
    METRICS_FILE,
};
use tempfile::tempdir;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(4)
}

fn scan_paths() -> Outcome {
    let t = Instant::now();
    let lens: Vec<usize> = (1..=64).collect();
    let e64 = scan_agreement::<f64>(&lens, &[1, 4, 16], &[1, 8], 20).unwrap();
    let e32 = scan_agreement::<f32>(&lens, &[1, 4, 16], &[1, 8], 20).unwrap();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        e64 <= 1e-12 && e32 <= 1e-5 && secs < 30.0,
        format!("max gap f64 {e64:.2e} (<= 1e-12), f32 {e32:.2e} (<= 1e-5), {secs:.1}s (< 30s)"),
    )
}

fn causality() -> Outcome {
    let bad = causality_failures(50, 17).unwrap();
    outcome(bad == 0, format!("{bad} of 50 trials changed an earlier prediction"))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let worst = |m: std::collections::BTreeMap<String, f64>| {
        m.into_iter().fold((String::new(), 0.0f64), |a, (k, v)| if v > a.1 { (k, v) } else { a })
    };
    let (pn, pe) = worst(pretrain_gradient_errors(3, None).unwrap());
    let (cn, ce) = worst(classifier_gradient_errors(4, None).unwrap());
    let secs = t.elapsed().as_secs_f64();
    outcome(
        pe <= 1e-4 && ce <= 1e-4 && secs < 120.0,
        format!("worst rel error pretrain {pe:.2e} ({pn}), classifier {ce:.2e} ({cn}), {secs:.1}s (< 120s)"),
    )
}

fn layout_table() -> Outcome {
    let rows = table4_rows();
    let mut detail = String::new();
    for r in &rows {
        let sep = if detail.is_empty() { "" } else { " " };
        write!(detail, "{sep}{}²→{}", r.cluster_px, r.clusters).unwrap();
    }
    let bad = order_bijection_failures(20);
    write!(detail, "; {bad} non-bijective orders").unwrap();
    outcome(rows.iter().all(|r| r.clusters == r.expected) && bad == 0, detail)
}

fn param_counts() -> Outcome {
    let base = encoder_param_count(&ModelConfig::arm_b()) as f64;
    let dev = base / 85e6 - 1.0;
    let toy = ModelConfig {
        width: 8,
        depth: 1,
        state_dim: 4,
        patch_size: 4,
        cluster_size: 8,
        image_size: [16, 16],
        dec_depth: 1,
        dec_width: 8,
        num_classes: 3,
        scan_path: ScanPath::Sequential,
        ..ModelConfig::default()
    };
    // patch embed and positions
    let embed = 48 * 8 + 8 + 16 * 8;
    // projections in/gate/out, B/C/A, the delta path, the depthwise conv
    let mixer = 3 * 64 + 3 * 32 + 3 * 8 + 32;
    // two norms, the mixer, the three SwiGLU matrices
    let ledger = embed + 2 * 2 * 8 + mixer + 3 * 8 * 24;
    let toy_count = encoder_param_count(&toy);
    outcome(
        dev.abs() <= 0.15 && toy_count == ledger,
        format!(
            "base {:.2}M ({:+.1}% vs 85M), toy {toy_count} vs ledger {ledger}",
            base / 1e6,
            dev * 100.0
        ),
    )
}

fn desk_data(dir: &Path) -> PathBuf {
    let path = dir.join("shapes64.armd");
    let spec = SyntheticSpec {
        classes: 10,
        per_class: 250,
        size: 64,
        seed: 0,
        val_fraction: 0.2,
    };
    generate_synthetic(&path, &spec).unwrap().save(&path.with_extension("json")).unwrap();
    path
}

fn desk_config(name: &str, stage: Stage, data: &Path, seed: u64, extra: &[String]) -> RunConfig {
    let mut over = vec![
        format!("data.path={}", data.display()),
        format!("train.seed={seed}"),
        format!("train.workers={}", workers()),
        "train.deterministic=true".to_string(),
    ];
    over.extend_from_slice(extra);
    RunConfig::load(&configs().join(name), stage, &over).unwrap()
}

fn final_top1(rows: &[MetricRow]) -> f64 {
    rows.iter().rev().find_map(|r| r.top1).unwrap_or(f64::NAN)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Desk {
    learning: Outcome,
    /// pretraining loss curve of the first seed (row-forward order)
    row_forward: Vec<f64>,
    data: PathBuf,
    elapsed: Duration,
}

fn desk_learning(dir: &Path) -> Desk {
    let t = Instant::now();
    let data = desk_data(dir);
    let mut detail = String::new();
    let mut ok = true;
    let mut gaps = Vec::new();
    let mut row_forward = Vec::new();
    for seed in 0..3u64 {
        let pre_dir = dir.join(format!("pre-{seed}"));
        let pre = run_pretrain(
            &desk_config("desk-pretrain.json", Stage::Pretrain, &data, seed, &[]),
            &pre_dir,
            &RunOptions::default(),
        )
        .unwrap();
        let first = pre.rows[0].loss;
        let tail = smoothed_tail(&pre.rows, 20);
        ok &= pre.rows.len() == 300 && tail < 0.7 * first;
        if seed == 0 {
            row_forward = pre.rows.iter().map(|r| r.loss).collect();
        }

        let ft = desk_config("desk-finetune.json", Stage::Finetune, &data, seed, &[]);
        let warm = run_finetune(
            &ft,
            &dir.join(format!("ft-{seed}")),
            &RunOptions {
                init: Some(pre_dir.join(LAST_CKPT)),
                ..RunOptions::default()
            },
        )
        .unwrap();
        let cold = run_finetune(&ft, &dir.join(format!("scratch-{seed}")), &RunOptions::default()).unwrap();
        let (a, b) = (final_top1(&warm.rows), final_top1(&cold.rows));
        gaps.push(a - b);
        write!(
            detail,
            "seed {seed}: loss {first:.3}→{tail:.3} ({:.2}x), top-1 pretrained {:.1}% vs scratch {:.1}%; ",
            tail / first,
            a * 100.0,
            b * 100.0
        )
        .unwrap();
    }
    let gap = median(gaps);
    let elapsed = t.elapsed();
    let minutes = elapsed.as_secs_f64() / 60.0;
    write!(
        detail,
        "median gap {:+.1} points (>= 3); {minutes:.1} min with {} worker(s) (< 30 min on 4 cores)",
        gap * 100.0,
        workers()
    )
    .unwrap();
    Desk {
        learning: outcome(ok && gap >= 0.03 && minutes < 30.0, detail),
        row_forward,
        data,
        elapsed,
    }
}

fn orders(dir: &Path, desk: &Desk) -> Outcome {
    let mut curves = vec![("row-forward".to_string(), desk.row_forward.clone())];
    let others = [
        OrderKind::RowBackward,
        OrderKind::ColForward,
        OrderKind::ColBackward,
        OrderKind::Random(7),
    ];
    for o in others {
        let cfg = desk_config("desk-pretrain.json", Stage::Pretrain, &desk.data, 0, &[format!("model.order={o}")]);
        match run_pretrain(&cfg, &dir.join(format!("order-{o}")), &RunOptions::default()) {
            Ok(r) => curves.push((o.to_string(), r.rows.iter().map(|r| r.loss).collect())),
            Err(e) => return outcome(false, format!("{o} failed: {e}")),
        }
    }
    let mut same = Vec::new();
    for i in 0..curves.len() {
        for j in i + 1..curves.len() {
            if curves[i].1 == curves[j].1 {
                same.push(format!("{}={}", curves[i].0, curves[j].0));
            }
        }
    }
    let finals: Vec<String> = curves
        .iter()
        .map(|(n, c)| format!("{n} {:.3}", c.iter().rev().take(20).sum::<f64>() / 20.0))
        .collect();
    outcome(
        same.is_empty() && curves.iter().all(|c| c.1.len() == 300),
        format!("final smoothed losses: {}; identical pairs: {same:?}", finals.join(", ")),
    )
}

fn scan_speed() -> Outcome {
    let spec = BenchSpec {
        lens: vec![8192],
        states: vec![16],
        width: 64,
        batch: 1,
        workers: vec![4],
        chunk: 64,
        reps: 3,
        seed: 0,
    };
    let rows = run_bench(&spec).unwrap();
    let seq = rows.iter().find(|r| r.path == "sequential").unwrap();
    let par = rows.iter().find(|r| r.path == "parallel").unwrap();
    let s = speedup(&rows, par).unwrap();
    outcome(
        s >= 2.0 && par.checksum == seq.checksum,
        format!(
            "4 workers {s:.2}x over sequential (>= 2x), checksums {} / {}, {} core(s) available",
            seq.checksum,
            par.checksum,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    )
}

fn serialization(dir: &Path) -> Outcome {
    let data = dir.join("toy.armd");
    let spec = SyntheticSpec {
        classes: 3,
        per_class: 8,
        size: 8,
        seed: 5,
        val_fraction: 0.25,
    };
    generate_synthetic(&data, &spec).unwrap().save(&data.with_extension("json")).unwrap();
    let load = |name: &str, stage| {
        RunConfig::load(
            &configs().join(name),
            stage,
            &[format!("data.path={}", data.display()), "train.deterministic=true".into()],
        )
        .unwrap()
    };
    let pre = load("toy-pretrain.json", Stage::Pretrain);
    let full = dir.join("full");
    run_pretrain(&pre, &full, &RunOptions::default()).unwrap();
    let cut = dir.join("cut");
    run_pretrain(
        &pre,
        &cut,
        &RunOptions {
            stop_after_epochs: Some(1),
            ..RunOptions::default()
        },
    )
    .unwrap();
    run_pretrain(
        &pre,
        &cut,
        &RunOptions {
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    let same = |f: &str| fs::read(full.join(f)).unwrap() == fs::read(cut.join(f)).unwrap();
    let resumed = same(METRICS_FILE) && same(LAST_CKPT);

    let ft = load("toy-finetune.json", Stage::Finetune);
    let ft_dir = dir.join("ft");
    run_finetune(
        &ft,
        &ft_dir,
        &RunOptions {
            init: Some(full.join(LAST_CKPT)),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let mut round_trips = 0;
    for path in [full.join(LAST_CKPT), ft_dir.join(LAST_CKPT)] {
        let bytes = fs::read(&path).unwrap();
        let again = dir.join("again.armc");
        Checkpoint::load(&path).unwrap().save(&again).unwrap();
        round_trips += usize::from(fs::read(&again).unwrap() == bytes);
    }
    outcome(
        resumed && round_trips == 2,
        format!("{round_trips}/2 checkpoints byte-identical after save→load→save; resumed curve and weights identical: {resumed}"),
    )
}

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("ARM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let want = |n: usize| only.as_ref().map_or(true, |o| o.contains(&n));
    let dir = tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if want(n) {
            let t = Instant::now();
            let o = f();
            let line = format!(
                "[{n}] {} {name}: {} [{:.1}s]",
                if o.passed { "PASS" } else { "FAIL" },
                o.detail,
                t.elapsed().as_secs_f64()
            );
            let _ = writeln!(std::io::stderr(), "{line}");
            results.push((n, name, o));
        }
    };

    run(1, "scan-path equivalence", &mut scan_paths);
    run(2, "causality", &mut causality);
    run(3, "gradient correctness", &mut gradients);
    run(4, "layout arithmetic", &mut layout_table);
    run(5, "parameter accounting", &mut param_counts);
    let mut desk = None;
    if want(6) || want(7) {
        let d = desk_learning(dir.path());
        let o = outcome(d.learning.passed, d.learning.detail.clone());
        run(6, "desk-scale learning", &mut || outcome(o.passed, o.detail.clone()));
        let _ = writeln!(std::io::stderr(), "    desk-scale runs took {:.1} min", d.elapsed.as_secs_f64() / 60.0);
        desk = Some(d);
    }
    if let Some(d) = &desk {
        run(7, "prediction-order harness", &mut || orders(dir.path(), d));
    }
    run(8, "parallel-scan performance", &mut scan_speed);
    run(9, "serialization", &mut || serialization(dir.path()));

    let mut summary = String::new();
    for (n, name, o) in &results {
        writeln!(summary, "[{n}] {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail).unwrap();
    }
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance.txt");
    fs::write(&out, &summary).unwrap();
    eprintln!("summary written to {}", out.display());
    let failed: Vec<String> = results.iter().filter(|r| !r.2.passed).map(|r| format!("[{}] {}", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed: {}", failed.join(", "));
}
