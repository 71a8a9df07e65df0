//! Command-line workflows. Machine-readable output goes to stdout or files;
//! human-readable progress and summaries go to stderr.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::ablation::{run_arm, runs_csv, summarize, summary_csv, verdict, Arm};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::decoder::Mode;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckOptions;
use crate::gradsuite::run_suite;
use crate::graph::OpKind;
use crate::metrics::pr_curve_csv;
use crate::synthdata::{self, SceneSpec};
use crate::trainer::{
    eval_dataset, evaluate, thread_pool, train_dataset, train_until, Dataset, TrainState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "route-detr",
    version,
    about = "Adaptive pairwise query routing on a toy detection task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a JSON-lines dataset of synthetic scenes.
    GenData(GenData),
    /// Train with the dual-branch objective; writes metrics.jsonl and a checkpoint.
    Train(Train),
    /// Evaluate a checkpoint and print a metrics report.
    Eval(Eval),
    /// Run the finite-difference gradient suite in f64.
    Gradcheck(Gradcheck),
    /// Train every route configuration over several seeds.
    Ablate(Ablate),
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 512)]
    count: usize,
    #[arg(long, default_value = "scenes.jsonl")]
    out: PathBuf,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = ["on", "off"])]
    routing: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    suppressor: Option<String>,
    #[arg(long, value_parser = ["on", "off"])]
    delegator: Option<String>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        for (key, value) in [
            ("routing", &self.routing),
            ("suppressor", &self.suppressor),
            ("delegator", &self.delegator),
        ] {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct Train {
    #[command(flatten)]
    run: RunArgs,
    /// Training scenes; generated from the seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Continue from a checkpoint directory instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps (checkpointing there).
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scenes to evaluate on; the held-out evaluation scenes when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "main")]
    mode: String,
    /// Also write precision-recall points at IoU 0.5 as CSV.
    #[arg(long)]
    pr_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Gradcheck {
    /// Flip the sign of one op kind's local gradient; the suite must then fail.
    #[arg(long)]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct Ablate {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Where per-run metric logs and the summary table are written.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Config(_) | Error::Format(_) | Error::Checkpoint(_) => EXIT_USAGE,
        Error::Dimension(_) | Error::Contract(_) | Error::NonFinite(_) => EXIT_CHECK_FAILED,
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(text.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|e| Error::io(path, e))
}

fn gen_data(a: GenData) -> Result<i32> {
    let mut spec = SceneSpec {
        seed: a.seed,
        ..Default::default()
    };
    if let Some(c) = a.classes {
        spec.classes = c;
    }
    if let Some(m) = a.max_objects {
        spec.max_objects = m;
        spec.min_objects = spec.min_objects.min(m);
    }
    spec.validate()?;
    let scenes = synthdata::generate(&spec, a.count)?;
    synthdata::save(&scenes, &a.out)?;
    let mut per_class = vec![0usize; spec.classes];
    for s in &scenes {
        for &c in &s.classes {
            per_class[c - 1] += 1;
        }
    }
    let objects: usize = per_class.iter().sum();
    println!(
        "{}",
        json!({"out": a.out, "seed": a.seed, "count": scenes.len(), "objects": objects, "per_class": per_class})
    );
    eprintln!(
        "wrote {} scenes with {objects} objects to {}",
        scenes.len(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn load_dataset(path: &Path, cfg: &RunConfig) -> Result<Dataset<f32>> {
    let scenes = synthdata::load(path)?;
    for (i, s) in scenes.iter().enumerate() {
        if s.len() > cfg.model.decoder.queries {
            return Err(Error::Format(format!(
                "{} line {}: {} objects exceed {} queries",
                path.display(),
                i + 1,
                s.len(),
                cfg.model.decoder.queries
            )));
        }
        if let Some(&c) = s.classes.iter().find(|&&c| c == 0 || c > cfg.data.classes) {
            return Err(Error::Format(format!(
                "{} line {}: class {c} outside 1..={}",
                path.display(),
                i + 1,
                cfg.data.classes
            )));
        }
    }
    Ok(Dataset::new(scenes, &cfg.data))
}

fn train(a: Train) -> Result<i32> {
    let pool = thread_pool()?;
    let mut state = match &a.resume {
        Some(dir) => checkpoint::load::<f32>(dir)?,
        None => TrainState::<f32>::new(a.run.resolve()?)?,
    };
    let cfg = state.config.clone();
    let data = match &a.data {
        Some(p) => load_dataset(p, &cfg)?,
        None => train_dataset(&cfg)?,
    };
    let eval = eval_dataset(&cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    write_file(&a.out_dir.join("config.txt"), &cfg.to_key_values())?;

    // The log is rewritten from the restored history so a resumed run's log
    // matches an uninterrupted one.
    let log_path = a.out_dir.join("metrics.jsonl");
    let mut log = create(&log_path)?;
    for rec in &state.history {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }
    let until = a.until.unwrap_or(cfg.train.steps);
    eprintln!(
        "training {} params from step {} to {} (routing {}, suppressor {}, delegator {})",
        state.model.params.numel(),
        state.step,
        until.min(cfg.train.steps),
        cfg.model.routing_enabled,
        cfg.model.switch.suppressor,
        cfg.model.switch.delegator
    );
    train_until(&mut state, &data, &eval, until, pool.as_ref(), |rec| {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        eprintln!(
            "step {:>5}  alpha {:.3}  L_main {:.4}  L_aux {:.4}  AP {:.4}  dup {:.4}",
            rec.step, rec.alpha, rec.l_main, rec.l_aux, rec.ap, rec.duplicate_rate
        );
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = a.out_dir.join("checkpoint");
    checkpoint::save(&state, &ckpt)?;
    let last = state.history.last();
    println!(
        "{}",
        json!({"step": state.step, "checkpoint": ckpt, "metrics": log_path, "final": last})
    );
    Ok(EXIT_OK)
}

fn eval(a: Eval) -> Result<i32> {
    let mode: Mode = a.mode.parse()?;
    if !a.checkpoint.join(checkpoint::MANIFEST).exists() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {}",
            a.checkpoint.display()
        )));
    }
    let state = checkpoint::load::<f32>(&a.checkpoint)?;
    let data = match &a.data {
        Some(p) => load_dataset(p, &state.config)?,
        None => eval_dataset(&state.config)?,
    };
    let pool = thread_pool()?;
    let report = evaluate(&state.model, &data, mode, pool.as_ref())?;
    if let Some(path) = &a.pr_csv {
        let preds: Vec<_> = data
            .patches
            .iter()
            .map(|p| {
                crate::decoder::infer(&state.model, p, mode)
                    .map(|(mut v, _)| v.pop().expect("layers"))
            })
            .collect::<Result<_>>()?;
        write_file(
            path,
            &pr_curve_csv(&preds, &data.scenes, state.config.data.classes, 0.5),
        )?;
    }
    println!(
        "{}",
        serde_json::to_string(&report).map_err(|e| Error::Format(e.to_string()))?
    );
    eprintln!(
        "{} scenes, mode {:?}: AP {:.4}  AP50 {:.4}  AP75 {:.4}  duplicate rate {:.4}",
        report.num_scenes, mode, report.ap, report.ap50, report.ap75, report.duplicate_rate
    );
    Ok(EXIT_OK)
}

fn gradcheck(a: Gradcheck) -> Result<i32> {
    let fault = a
        .inject_fault
        .as_deref()
        .map(str::parse::<OpKind>)
        .transpose()?;
    let opts = GradCheckOptions {
        fault,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let reports = run_suite(opts)?;
    let passed = reports.iter().all(|r| r.passed);
    for r in &reports {
        let worst = r.worst();
        eprintln!(
            "{} {:<32} worst {:<36} rel {:.2e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.label,
            worst.map_or("-", |w| w.name.as_str()),
            worst.map_or(0.0, |w| w.max_rel_error)
        );
        for e in r.entries.iter().filter(|e| !e.passed) {
            eprintln!(
                "     {:<36} rel {:.3e} abs {:.3e} at {}",
                e.name, e.max_rel_error, e.max_abs_error, e.worst_index
            );
        }
    }
    eprintln!(
        "{} of {} cases passed in {:.1?}",
        reports.iter().filter(|r| r.passed).count(),
        reports.len(),
        start.elapsed()
    );
    println!(
        "{}",
        serde_json::to_string(&json!({"passed": passed, "reports": reports}))
            .map_err(|e| Error::Format(e.to_string()))?
    );
    Ok(if passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn ablate(a: Ablate) -> Result<i32> {
    let base = a.run.resolve()?;
    let pool = thread_pool()?;
    let first_seed = base.train.seed;
    let mut results = Vec::new();
    for arm in Arm::ALL {
        for seed in first_seed..first_seed + a.seeds {
            let start = std::time::Instant::now();
            let r = run_arm(&base, arm, seed, pool.as_ref())?;
            eprintln!(
                "{:<4} seed {seed}: AP {:.4}  dup {:.4}  aux dup @{} {:.4}  ({:.0?})",
                arm.name(),
                r.ap,
                r.duplicate_rate,
                r.mid_step,
                r.aux_duplicate_rate_mid,
                start.elapsed()
            );
            if let Some(dir) = &a.out_dir {
                let lines: String = r
                    .history
                    .iter()
                    .map(|rec| serde_json::to_string(rec).map(|l| l + "\n"))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Format(e.to_string()))?;
                let name = format!("metrics_{}_seed{seed}.jsonl", arm.name().replace('+', ""));
                write_file(&dir.join(name), &lines)?;
            }
            results.push(r);
        }
    }
    let summary = summarize(&results);
    let v = verdict(&summary)?;
    let runs = runs_csv(&results);
    print!("{runs}");
    if let Some(dir) = &a.out_dir {
        write_file(&dir.join("runs.csv"), &runs)?;
        write_file(&dir.join("summary.csv"), &summary_csv(&summary))?;
        write_file(
            &dir.join("verdict.json"),
            &serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?,
        )?;
    }
    eprint!("{}", summary_csv(&summary));
    eprintln!("{}", v.line());
    Ok(EXIT_OK)
}
