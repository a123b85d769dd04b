//! `panm` — train, evaluate, and report on pointer-augmented memory
//! models and their baselines.
//!
//! Three subcommands:
//!
//! * `run`    — execute a manifest (or a single inline experiment) and
//!              append records to the results directory;
//! * `report` — aggregate a results directory into tables, CSV sidecars,
//!              and accuracy-versus-length / ablation plots;
//! * `verify` — gradient checks, geometry invariants, generator-oracle
//!              sweeps, and the corrupted-softmax negative control.
//!
//! Exit codes: 0 success, 1 usage error, 2 run failure, 3 verification
//! failure.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use panm_cli::manifest::{expand, inline_manifest, parse_manifest};
use panm_cli::profiles::RunSpec;
use panm_cli::report::cmd_report;
use panm_cli::runner::{execute_plan, print_summary};
use panm_cli::verify::cmd_verify;
use panm_cli::{usage, Failure};

#[derive(Parser)]
#[command(name = "panm", version, about = "pointer-augmented memory experiments")]
struct Cli {
    /// Suppress per-step progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and evaluate one experiment or a whole manifest.
    Run(RunArgs),
    /// Aggregate a results directory into tables and plots.
    Report(ReportArgs),
    /// Run the self-verification suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Manifest file describing a batch of runs.
    #[arg(long, conflicts_with_all = ["task", "model"])]
    manifest: Option<PathBuf>,
    /// Task name: copy, reverse, mix, drecall, psort, idsort, or dyck2.
    #[arg(long)]
    task: Option<String>,
    /// Model variant: panm, lstm_s2s, or content_attention.
    #[arg(long)]
    model: Option<String>,
    /// Number of address-attention heads.
    #[arg(long = "Ha")]
    ha: Option<usize>,
    /// Number of content-attention heads.
    #[arg(long = "Hc")]
    hc: Option<usize>,
    /// Address width in bits.
    #[arg(long)]
    bits: Option<usize>,
    /// Training length.
    #[arg(long = "L")]
    len: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Controller width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Seeds to run, comma separated.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Size profile: quick, smoke, or paper.
    #[arg(long, default_value = "smoke")]
    profile: String,
    /// Results directory (default: $PANM_OUT, then ./results).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Save model checkpoints next to the records.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory (default: $PANM_OUT, then ./results).
    dir: Option<PathBuf>,
    /// Where to write the report (default: <dir>/report).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller sweeps for a fast signal.
    #[arg(long)]
    fast: bool,
}

fn default_out(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("PANM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn cmd_run(args: RunArgs, quiet: bool) -> Result<(), Failure> {
    let manifest = match &args.manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read manifest {}: {e}", path.display())))?;
            parse_manifest(&text)?
        }
        None => {
            let task = args
                .task
                .clone()
                .ok_or_else(|| usage("either --manifest or both --task and --model"))?;
            let model = args
                .model
                .clone()
                .ok_or_else(|| usage("--model is required alongside --task"))?;
            let spec = RunSpec {
                task,
                model,
                ha: args.ha,
                hc: args.hc,
                bits: args.bits,
                train_len: args.len,
                steps: args.steps,
                hidden: args.hidden,
                batch: args.batch,
                seeds: if args.seed.is_empty() { vec![1] } else { args.seed.clone() },
            };
            inline_manifest(spec, &args.profile)?
        }
    };
    let out = default_out(args.out.clone().or_else(|| manifest.out.clone()));
    let configs = expand(&manifest)?;
    if !quiet {
        println!(
            "{} run(s) under profile '{}' -> {}",
            configs.len(),
            manifest.profile.name,
            out.display()
        );
    }
    let save_ckpt = args.checkpoints || manifest.checkpoints;
    let outcome = execute_plan(&configs, &out, &manifest.hash, args.jobs, save_ckpt, quiet)?;
    if !quiet {
        println!("{} executed, {} reused from disk", outcome.executed, outcome.reused);
    }
    print_summary(&outcome.records);
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Run(args) => cmd_run(args, cli.quiet),
        Cmd::Report(args) => {
            let dir = default_out(args.dir.clone());
            cmd_report(&dir, args.out.as_deref()).map(|_| ())
        }
        Cmd::Verify(args) => cmd_verify(args.fast),
    };
    if let Err(failure) = result {
        eprintln!("error: {failure}");
        std::process::exit(failure.code);
    }
}
