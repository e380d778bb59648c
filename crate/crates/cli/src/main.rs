use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arm_core::data::{generate_synthetic, ingest_ppm_dir, SyntheticSpec};
use arm_core::layout::{make_layout, OrderKind};
use arm_core::scan::bench::{run_bench, speedup, write_csv, BenchSpec};
use arm_core::selfcheck::{self, Hooks, Level};
use arm_core::train::{run_eval, run_finetune, run_pretrain, RunConfig, RunOptions, RunReport, Stage};
use arm_core::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "arm", version, about = "Autoregressive pretraining of selective state-space vision models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Seed for every random stream of the command
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed reduction order and single-threaded data loading
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads; bench accepts a comma-separated sweep
    #[arg(long, global = true, value_delimiter = ',')]
    workers: Vec<usize>,
    /// Log more (-v info is the default, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the cluster geometry and visiting order of an image size
    Layout {
        #[arg(long, default_value_t = 192)]
        image: usize,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 64)]
        cluster: usize,
        /// row-forward, row-backward, col-forward, col-backward, random[:SEED]
        #[arg(long, default_value = "row-forward")]
        order: String,
    },
    /// Run the built-in invariant checks
    Selfcheck {
        #[arg(long, default_value = "fast")]
        level: String,
        /// Override the ZOH series threshold (fault injection)
        #[arg(long, hide = true)]
        series_threshold: Option<f64>,
    },
    /// Time the scan paths and write CSV to stdout
    Bench {
        #[arg(long, default_value = "scan")]
        kernel: String,
        /// Sequence lengths, comma separated
        #[arg(long = "L", value_delimiter = ',', default_value = "8192")]
        lens: Vec<usize>,
        /// State sizes, comma separated
        #[arg(long = "N", value_delimiter = ',', default_value = "16")]
        states: Vec<usize>,
        /// Channels
        #[arg(long = "D", default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Autoregressive pretraining
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from last.armc in --out
        #[arg(long)]
        resume: bool,
    },
    /// Classification finetuning, from a pretraining checkpoint or from scratch
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pretraining checkpoint to start from
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Top-1 accuracy of a finetuning checkpoint on the validation split
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Config overrides, `section.key=value`
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Dataset tools
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Config overrides, `section.key=value`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum DataCmd {
    /// Render the synthetic shape dataset
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
    /// Pack a directory of per-class PPM folders
    Ingest {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.2)]
        val_fraction: f64,
    },
}

enum Failure {
    Check(usize),
    Core(Error),
    Io(io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.common.quiet, cli.common.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0 | 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric(_) => 3,
                _ => 2,
            })
        }
        Err(Failure::Io(e)) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = cli.common;
    match cli.cmd {
        Cmd::Layout {
            image,
            patch,
            cluster,
            order,
        } => layout(image, patch, cluster, &order, &common),
        Cmd::Selfcheck { level, series_threshold } => {
            let level: Level = level.parse()?;
            let mut hooks = Hooks::default();
            if let Some(t) = series_threshold {
                hooks.series_threshold = t;
            }
            let found = selfcheck::run(level, &hooks)?;
            for f in &found {
                eprintln!("{f}");
            }
            match found.iter().filter(|f| !f.passed()).count() {
                0 => Ok(()),
                n => Err(Failure::Check(n)),
            }
        }
        Cmd::Bench {
            kernel,
            lens,
            states,
            width,
            batch,
            chunk,
            reps,
        } => {
            if kernel != "scan" {
                return Err(Error::Config(format!("unknown kernel {kernel:?} (scan)")).into());
            }
            let workers = match common.workers.is_empty() {
                true => vec![1, 2, 4],
                false => common.workers.clone(),
            };
            let spec = BenchSpec {
                lens,
                states,
                width,
                batch,
                workers,
                chunk,
                reps,
                seed: common.seed.unwrap_or(0),
            };
            let rows = run_bench(&spec)?;
            write_csv(&rows, io::stdout().lock())?;
            for r in rows.iter().filter(|r| r.path == "parallel") {
                let base = rows
                    .iter()
                    .find(|s| s.path == "sequential" && s.len == r.len && s.state == r.state)
                    .expect("sequential row per shape");
                eprintln!(
                    "L={} N={} workers={}: speedup {:.2}x, checksum {} ({})",
                    r.len,
                    r.state,
                    r.workers,
                    speedup(&rows, r).unwrap_or(f64::NAN),
                    r.checksum,
                    if r.checksum == base.checksum { "matches" } else { "DIFFERS" }
                );
            }
            Ok(())
        }
        Cmd::Pretrain { run, resume } => {
            let cfg = load(&run.config, Stage::Pretrain, &run.overrides, &common)?;
            let opts = RunOptions {
                resume,
                ..RunOptions::default()
            };
            report(&run.out, run_pretrain(&cfg, &run.out, &opts)?)
        }
        Cmd::Finetune { run, ckpt, resume } => {
            let cfg = load(&run.config, Stage::Finetune, &run.overrides, &common)?;
            let opts = RunOptions {
                resume,
                init: ckpt,
                ..RunOptions::default()
            };
            report(&run.out, run_finetune(&cfg, &run.out, &opts)?)
        }
        Cmd::Eval { config, ckpt, overrides } => {
            let cfg = load(&config, Stage::Finetune, &overrides, &common)?;
            let top1 = run_eval(&cfg, &ckpt)?;
            eprintln!("top-1 {:.2}% on {}", top1 * 100.0, ckpt.display());
            println!("{}", json!({ "checkpoint": ckpt, "top1": top1 }));
            Ok(())
        }
        Cmd::Data { cmd } => data(cmd, &common),
    }
}

fn layout(image: usize, patch: usize, cluster: usize, order: &str, common: &Common) -> Result<(), Failure> {
    let order = match order {
        "random" => OrderKind::Random(common.seed.unwrap_or(0)),
        other => other.parse()?,
    };
    let l = make_layout(image, image, patch, cluster, order)?;
    let (rows, cols) = l.cluster_grid();
    let perm: Vec<String> = l.perm.iter().map(|p| p.to_string()).collect();
    println!(
        "{} clusters, grid {rows}×{cols}, k={}, perm=[{}]",
        l.num_clusters(),
        l.patches_per_cluster(),
        perm.join(",")
    );
    Ok(())
}

/// Config file, then `--set` overrides, then the global flags.
fn load(path: &Path, stage: Stage, overrides: &[String], common: &Common) -> Result<RunConfig, Failure> {
    let mut all = overrides.to_vec();
    if let Some(s) = common.seed {
        all.push(format!("train.seed={s}"));
    }
    if common.deterministic {
        all.push("train.deterministic=true".into());
    }
    match common.workers[..] {
        [] => {}
        [w] => all.push(format!("train.workers={w}")),
        _ => return Err(Error::Config("training takes a single --workers value".into()).into()),
    }
    Ok(RunConfig::load(path, stage, &all)?)
}

fn report(out: &Path, r: RunReport) -> Result<(), Failure> {
    if let Some(last) = r.rows.last() {
        eprintln!("step {} epoch {} loss {:.5}", last.step, last.epoch, last.loss);
    }
    if let Some(top1) = r.best_top1 {
        eprintln!("best top-1 {:.2}%", top1 * 100.0);
    }
    eprintln!("{} parameters, artifacts in {}", r.param_count, out.display());
    let summary = json!({
        "params": r.param_count,
        "steps": r.rows.last().map(|row| row.step),
        "final_loss": r.rows.last().map(|row| row.loss),
        "best_top1": r.best_top1,
        "last": r.last,
        "best": r.best,
    });
    writeln!(io::stdout().lock(), "{summary}")?;
    Ok(())
}

fn create_parent(path: &Path) -> io::Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent),
        None => Ok(()),
    }
}

fn data(cmd: DataCmd, common: &Common) -> Result<(), Failure> {
    let (out, manifest) = match cmd {
        DataCmd::Gen {
            out,
            classes,
            per_class,
            size,
            val_fraction,
        } => {
            let spec = SyntheticSpec {
                classes,
                per_class,
                size,
                seed: common.seed.unwrap_or(0),
                val_fraction,
            };
            create_parent(&out)?;
            let m = generate_synthetic(&out, &spec)?;
            (out, m)
        }
        DataCmd::Ingest {
            dir,
            out,
            size,
            val_fraction,
        } => {
            create_parent(&out)?;
            let m = ingest_ppm_dir(&dir, &out, size, val_fraction)?;
            (out, m)
        }
    };
    let sidecar = out.with_extension("json");
    manifest.save(&sidecar)?;
    eprintln!(
        "{} images in {} classes ({} train / {} val) -> {}",
        manifest.counts.iter().sum::<usize>(),
        manifest.num_classes(),
        manifest.splits.train.len(),
        manifest.splits.val.len(),
        out.display()
    );
    Ok(())
}
