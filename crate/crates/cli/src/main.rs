//! `fr3e`: generate task suites, train, analyze run logs, compare runs.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
//! configuration error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use fr3e_core::mdp::{read_suite, write_suite, TaskInstance};
use fr3e_core::policy::write_checkpoint;
use fr3e_core::runlog::{read_log, step_entries, summarize, write_entry, LogEntry};
use fr3e_core::telemetry::{compare, export, read_history, FINAL_WINDOW_FRACTION};
use fr3e_core::trainer::{PartialRun, Precision, RunSink, StepReport};
use fr3e_core::{generate_task_suite, run_training, PolicyParams, Scalar, TrainConfig};

const CONFIG_SNAPSHOT: &str = "config.toml";
const RUN_LOG: &str = "run_log.jsonl";
const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Parser)]
#[command(name = "fr3e", version, about = "Entropy-guided exploration laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a JSONL task suite.
    GenTasks {
        /// chain-sum, chain-sum-easy, chain-sum-medium or chain-sum-hard
        kind: String,
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        suite: PathBuf,
        /// Evaluation suite; the training suite when omitted.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the exploration records of a run log.
    Analyze { run_log: PathBuf },
    /// Compare two run directories.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Where to write the full table; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult = Result<(), Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenTasks { kind, n, seed, out } => gen_tasks(&kind, n, seed, out.as_deref()),
        Command::Train {
            config,
            suite,
            eval,
            out,
        } => train(&config, &suite, eval.as_deref(), &out),
        Command::Analyze { run_log } => analyze(&run_log),
        Command::Compare { run_a, run_b, out } => compare_runs(&run_a, &run_b, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn gen_tasks(kind: &str, n: usize, seed: u64, out: Option<&Path>) -> CmdResult {
    let suite = generate_task_suite(kind, n, seed).map_err(usage)?;
    match out {
        Some(path) => {
            let file = File::create(path)
                .with_context(|| format!("creating {}", path.display()))
                .map_err(runtime)?;
            let mut w = BufWriter::new(file);
            write_suite(&mut w, &suite).map_err(runtime)?;
            w.flush().map_err(runtime)?;
        }
        None => write_suite(io::stdout().lock(), &suite).map_err(runtime)?,
    }
    let mut mix: BTreeMap<String, usize> = BTreeMap::new();
    for t in &suite {
        *mix.entry(t.difficulty.to_string()).or_default() += 1;
    }
    let mix: Vec<String> = mix.iter().map(|(d, c)| format!("{d}={c}")).collect();
    eprintln!("{} tasks ({})", suite.len(), mix.join(", "));
    Ok(())
}

fn load_suite(path: &Path) -> Result<Vec<TaskInstance>, Failure> {
    let file = File::open(path)
        .with_context(|| format!("opening suite {}", path.display()))
        .map_err(usage)?;
    read_suite(BufReader::new(file))
        .with_context(|| format!("reading suite {}", path.display()))
        .map_err(usage)
}

/// Writes checkpoints and the run log into a run directory.
struct DirSink {
    dir: PathBuf,
    log: BufWriter<File>,
    log_records_every: u64,
}

impl<T: Scalar> RunSink<T> for DirSink {
    fn checkpoint(&mut self, step: u64, params: &PolicyParams<T>) -> fr3e_core::Result<()> {
        let path = self.dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}.ckpt"));
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, params, step)?;
        w.flush()?;
        Ok(())
    }

    fn step(&mut self, report: &StepReport<T>) -> fr3e_core::Result<()> {
        let every = self.log_records_every;
        let with_records = every > 0 && report.stats.step.is_multiple_of(every);
        for entry in step_entries(report, with_records)? {
            write_entry(&mut self.log, &entry)?;
        }
        self.log.flush()?;
        Ok(())
    }
}

fn train(config: &Path, suite: &Path, eval: Option<&Path>, out: &Path) -> CmdResult {
    let text = fs::read_to_string(config)
        .with_context(|| format!("reading config {}", config.display()))
        .map_err(usage)?;
    let cfg = TrainConfig::from_toml(&text)
        .with_context(|| format!("parsing config {}", config.display()))
        .map_err(usage)?;
    let train_suite = load_suite(suite)?;
    let eval_suite = match eval {
        Some(p) => load_suite(p)?,
        None => train_suite.clone(),
    };

    fs::create_dir_all(out.join(CHECKPOINT_DIR))
        .with_context(|| format!("creating run directory {}", out.display()))
        .map_err(runtime)?;
    fs::write(out.join(CONFIG_SNAPSHOT), cfg.to_toml()).map_err(runtime)?;
    let log = File::create(out.join(RUN_LOG)).map_err(runtime)?;
    let mut sink = DirSink {
        dir: out.to_path_buf(),
        log: BufWriter::new(log),
        log_records_every: cfg.log_records_every,
    };
    let result = match cfg.precision {
        Precision::F64 => run_training::<f64>(&cfg, &train_suite, &eval_suite, &mut sink),
        Precision::F32 => run_training::<f32>(&cfg, &train_suite, &eval_suite, &mut sink),
    };
    match result {
        Ok(history) => {
            if !history.is_empty() {
                export(&history, out).map_err(runtime)?;
            }
            let rate = history
                .final_solve_rate()
                .map_or_else(|| "n/a".to_string(), |r| format!("{r:.4}"));
            println!(
                "{} steps of {} (seed {}), final greedy solve rate {rate}",
                history.len(),
                cfg.algorithm,
                cfg.seed
            );
            Ok(())
        }
        Err(PartialRun { history, error }) => {
            if !history.is_empty() {
                export(&history, out).map_err(runtime)?;
            }
            let completed = history.len();
            Err(runtime(anyhow!(error).context(format!(
                "training aborted after {completed} completed steps; partial outputs kept in {}",
                out.display()
            ))))
        }
    }
}

fn fmt_list(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn analyze(path: &Path) -> CmdResult {
    let file = File::open(path)
        .with_context(|| format!("opening run log {}", path.display()))
        .map_err(usage)?;
    let (entries, bad) = read_log(BufReader::new(file)).map_err(runtime)?;
    for b in &bad {
        eprintln!("{}:{}: skipped corrupt entry: {}", path.display(), b.line, b.error);
    }
    let mut out = io::stdout().lock();
    let mut report = |text: String| writeln!(out, "{text}").map_err(runtime);
    for e in &entries {
        if let LogEntry::Exploration { step, record } = e {
            let blocks: Vec<usize> = record.blocks.iter().map(|b| b.tokens.len()).collect();
            let recomputed: Vec<f64> = std::iter::once(1.0)
                .chain(record.values.windows(2).map(|w| (w[0] - w[1]).exp()))
                .collect();
            let max_err = record
                .alphas
                .iter()
                .zip(&recomputed)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let right = record.exploration_groups().filter(|g| g.is_all_right()).count();
            let wrong = record.exploration_groups().filter(|g| g.is_all_wrong()).count();
            report(format!("step {step} task {}", record.task_id))?;
            report(format!("  K={} positions={:?}", record.k(), record.positions.indices))?;
            report(format!("  block lengths={blocks:?}"))?;
            report(format!("  V ladder={}", fmt_list(&record.values)))?;
            report(format!("  alpha={}", fmt_list(&record.alphas)))?;
            report(format!("  alpha recomputed max error={max_err:.3e}"))?;
            report(format!("  all-right={right} all-wrong={wrong}"))?;
        }
    }
    let s = summarize(&entries);
    report(format!(
        "{} step entries, {} exploration records, {} exploration groups: all-right={} all-wrong={}",
        s.steps, s.records, s.exploration_groups, s.all_right, s.all_wrong
    ))?;
    if s.records > 0 {
        report(format!(
            "alpha check: max |alpha - exp(V_prev - V)| = {:.3e}, direction consistent: {}",
            s.max_alpha_error, s.alpha_consistent
        ))?;
    }
    if !bad.is_empty() {
        report(format!("{} corrupt lines skipped", bad.len()))?;
    }
    Ok(())
}

fn compare_runs(a: &Path, b: &Path, out: Option<&Path>) -> CmdResult {
    let load = |p: &Path| {
        read_history(p)
            .with_context(|| format!("reading run directory {}", p.display()))
            .map_err(usage)
    };
    let (ha, hb) = (load(a)?, load(b)?);
    let cmp = compare(&ha, &hb);
    let table = cmp.render();
    match out {
        Some(path) => fs::write(path, &table)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime)?,
        None => print!("{table}"),
    }
    for w in &cmp.fairness_warnings {
        eprintln!("warning: {w}");
    }
    if out.is_some() {
        println!(
            "final-window means (last {:.0}% of steps)  a={}  b={}",
            FINAL_WINDOW_FRACTION * 100.0,
            cmp.label_a,
            cmp.label_b
        );
        for s in &cmp.final_window {
            let cell = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            println!(
                "{:<22} {:>14} {:>14} {:>14}",
                s.column,
                cell(s.a),
                cell(s.b),
                cell(s.delta())
            );
        }
    }
    Ok(())
}
