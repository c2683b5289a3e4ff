use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use delegate::commands;
use delegate::io::write_json;
use delegate::RunConfig;
use delegate_core::arith::{DEFAULT_INTERMEDIATE_MAX, DEFAULT_MAX_OPS, DEFAULT_OPERAND_MAX};
use delegate_core::credit::TrainerMetadata;
use delegate_core::gradlab::DEFAULT_POLICY_SEED;
use delegate_core::{GateKind, GenConfig};

#[derive(Parser)]
#[command(
    name = "delegate",
    version,
    about = "Clone-delegation episodes: datasets, evaluation, export, gradient checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic arithmetic dataset plus a manifest.
    GenDataset {
        #[arg(long, default_value_t = 1000)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MAX_OPS)]
        max_ops: u32,
        #[arg(long, default_value_t = DEFAULT_OPERAND_MAX)]
        operand_max: u64,
        #[arg(long, default_value_t = DEFAULT_INTERMEDIATE_MAX)]
        intermediate_max: u64,
        #[arg(long, short, default_value = "dataset.jsonl")]
        out: PathBuf,
    },
    /// Run G episodes per task and write trajectories, advantages and a report.
    RunEval(RunArgs),
    /// Majority vote over k tool-free samples per task.
    SelfConsistency {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 8)]
        k: u32,
    },
    /// Turn grouped trajectories into a trainer batch with per-token weights.
    ExportBatch {
        #[arg(required = true)]
        trajectories: Vec<PathBuf>,
        #[arg(long, default_value = "none")]
        gate: GateKind,
        #[arg(long, short)]
        out: PathBuf,
        /// TOML file with trainer settings copied into the header.
        #[arg(long)]
        trainer: Option<PathBuf>,
    },
    /// Exact policy-gradient checks on the micro environments.
    Gradlab {
        /// Environment name; repeat for several. Defaults to all.
        #[arg(long = "env")]
        envs: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_POLICY_SEED)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Aggregate trajectory or export files.
    Metrics {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Directory for metrics.json and budget_curve.csv; stdout otherwise.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print the default run configuration as TOML.
    ConfigTemplate,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    context_store: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// scripted, random, toy-softmax or remote.
    #[arg(long)]
    backend: Option<String>,
    /// Scripted policy name.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    gate: Option<GateKind>,
    #[arg(long)]
    group_size: Option<u32>,
    #[arg(long)]
    episodes_per_task: Option<u32>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    clone_threads: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
}

impl RunArgs {
    fn resolve(self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set! {
            dataset => c.dataset,
            output_dir => c.output_dir,
            seed => c.seed,
            backend => c.policy.backend,
            policy => c.policy.name,
            model => c.policy.remote.model,
            base_url => c.policy.remote.base_url,
            gate => c.gate,
            group_size => c.group_size,
            episodes_per_task => c.episodes_per_task,
            workers => c.workers,
            clone_threads => c.clone_threads,
        }
        if self.context_store.is_some() {
            c.context_store = self.context_store;
        }
        if self.limit.is_some() {
            c.limit = self.limit;
        }
        Ok(c)
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenDataset {
            n,
            seed,
            max_ops,
            operand_max,
            intermediate_max,
            out,
        } => {
            let cfg = GenConfig {
                max_ops,
                operand_max,
                intermediate_max,
                seed,
                ..GenConfig::default()
            };
            let m = commands::gen_dataset(&cfg, n, &out)?;
            eprintln!("wrote {n} problems to {} ({})", out.display(), m.files[0].sha256);
        }
        Command::RunEval(args) => {
            let cfg = args.resolve()?;
            let outcome = commands::run_eval(&cfg)?;
            print_json(&outcome.report)?;
            if !outcome.unscored.is_empty() {
                eprintln!("warning: {} episode(s) unscored", outcome.unscored.len());
            }
        }
        Command::SelfConsistency { run, k } => {
            let cfg = run.resolve()?;
            print_json(&commands::self_consistency(&cfg, k)?)?;
        }
        Command::ExportBatch {
            trajectories,
            gate,
            out,
            trainer,
        } => {
            let meta: TrainerMetadata = match trainer {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => TrainerMetadata::default(),
            };
            print_json(&commands::export_batch(&trajectories, gate, &meta, &out)?)?;
        }
        Command::Gradlab { envs, seed, out } => {
            let report = commands::gradlab_report(&envs, seed)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report)?,
            }
            if !report.all_pass {
                eprintln!("gradlab: some checks failed");
                return Ok(false);
            }
        }
        Command::Metrics { files, out } => {
            let report = commands::metrics(&files)?;
            match out {
                Some(dir) => {
                    write_json(&dir.join("metrics.json"), &report)?;
                    std::fs::write(Path::new(&dir).join("budget_curve.csv"), report.budget_csv())?;
                }
                None => print_json(&report)?,
            }
        }
        Command::ConfigTemplate => {
            let text = RunConfig::default().to_toml()?;
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
