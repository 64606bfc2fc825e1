//! `stb-asv`: simulate, train, evaluate and verify from one entry point.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stb_core::config::RunConfig;
use stb_core::eval::EvalReport;
use stb_core::pipeline::{self, Layout, TrainSummary};
use stb_core::verify::{self, VerifyReport};
use stb_core::{Error, Kernel};

const EXIT_USAGE: u8 = 1;
const EXIT_MISSING: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

const VERIFY_REPORT: &str = "verify_report.json";

#[derive(Debug, Parser)]
#[command(name = "stb-asv", version, about = "Multi-channel speaker verification with spatio-temporal attention blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the ad-hoc array dataset into <out>/data.
    Simulate(RunArgs),
    /// Train the single-channel model on clean speech.
    Pretrain(RunArgs),
    /// Fine-tune the blocks once per configured normalizer.
    Finetune(RunArgs),
    /// Score the fine-tuned models at every configured channel count.
    Eval(RunArgs),
    /// Score the single-channel model on the closest microphone.
    Oracle(RunArgs),
    /// Run the gradient, projection, permutation and EER property suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run config; omitted sections and keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Replace outputs of an earlier run.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Only the seed is read from the config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
    /// Sign-flip one kernel's gradient rule to check the suites catch it.
    #[arg(long, hide = true, value_name = "KERNEL")]
    inject_fault: Option<String>,
    #[arg(long, hide = true, default_value_t = verify::GRADCHECK_POINTS)]
    gradcheck_points: usize,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::MissingArtifact(_) => EXIT_MISSING,
            Error::Contract(_) | Error::Validation(_) => EXIT_PROPERTY,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    // an unreadable config is a usage problem, not a missing pipeline artifact
    let mut config = RunConfig::load(path).map_err(|e| match e {
        Error::MissingArtifact(_) => usage(format!("config file {} not found", path.display())),
        other => usage(other.to_string()),
    })?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(config)
}

fn print_training(summary: &TrainSummary) {
    let name = summary.normalizer.map_or_else(|| "pretrain".to_string(), |n| format!("finetune/{}", n.name()));
    println!(
        "{name}: {} steps, loss {:.4} -> {:.4}, accuracy {:.3}, {} trainable scalars",
        summary.steps, summary.first_loss, summary.final_loss, summary.final_accuracy, summary.trainable_scalars
    );
}

fn print_report(report: &EvalReport) {
    println!("{}: EER {:.2}% over {} trials", report.system, 100.0 * report.eer, report.num_trials);
    for c in &report.conditions {
        println!("  {:>2} channels  EER {:6.2}%", c.channels, 100.0 * c.eer);
    }
    if let Some(sweep) = &report.per_channel_rank {
        let ranks: Vec<String> = sweep.ranks.iter().map(|r| format!("{:.2}", 100.0 * r.eer)).collect();
        println!(
            "  by distance rank: {} (%){}",
            ranks.join(" "),
            if sweep.monotone { ", monotone" } else { "" }
        );
    }
}

fn print_verify(report: &VerifyReport) {
    println!("{:<24} {:>6} {:>6} {:>12} {:>10} {:>8}", "suite", "cases", "fail", "max error", "tolerance", "seconds");
    for s in &report.suites {
        println!(
            "{:<24} {:>6} {:>6} {:>12.3e} {:>10.0e} {:>8.2}  {}",
            s.name,
            s.cases,
            s.failures,
            s.max_error,
            s.tolerance,
            s.seconds,
            if s.passed() { "PASS" } else { "FAIL" }
        );
        if !s.failing.is_empty() {
            println!("    failing: {}", s.failing.join(", "));
        }
    }
}

fn run_stage(command: &Command, args: &RunArgs) -> Result<(), Failure> {
    let config = load_config(&args.config, args.seed)?;
    let layout = Layout::new(&args.out);
    match command {
        Command::Simulate(_) => {
            let s = pipeline::simulate(&config, &layout, args.force)?;
            let total: usize = s.utterances.values().sum();
            println!(
                "dataset at {}: {} speakers, {total} utterances, C={}, T={}, F={}",
                layout.data().display(),
                s.speakers,
                s.channels,
                s.frames,
                s.feature_dim
            );
            for (split, n) in &s.utterances {
                println!("  {split:<9} {n} utterances");
            }
        }
        Command::Pretrain(_) => print_training(&pipeline::run_pretrain(&config, &layout, args.force)?),
        Command::Finetune(_) => pipeline::run_finetune(&config, &layout, args.force)?.iter().for_each(print_training),
        Command::Eval(_) => pipeline::run_eval(&config, &layout, args.force)?.iter().for_each(print_report),
        Command::Oracle(_) => print_report(&pipeline::run_oracle(&config, &layout, args.force)?),
        Command::Verify(_) => unreachable!("verify has its own arguments"),
    }
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<(), Failure> {
    let seed = match (&args.config, args.seed) {
        (_, Some(seed)) => seed,
        (Some(path), None) => load_config(path, None)?.seed,
        (None, None) => RunConfig::default().seed,
    };
    let fault = match &args.inject_fault {
        None => None,
        Some(name) => Some(Kernel::from_name(name).ok_or_else(|| {
            let known: Vec<&str> = Kernel::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            usage(format!("unknown kernel {name:?}; expected one of {}", known.join(", ")))
        })?),
    };
    let report_path = args.out.as_ref().map(|dir| dir.join(VERIFY_REPORT));
    if let Some(path) = &report_path {
        if path.exists() && !args.force {
            return Err(Error::Overwrite(path.clone()).into());
        }
    }
    let report = verify::run_suites(seed, args.gradcheck_points, fault)?;
    print_verify(&report);
    if let (Some(dir), Some(path)) = (&args.out, &report_path) {
        fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
        pipeline::write_json(path, &report)?;
    }
    if report.passed() {
        println!("all suites passed");
        Ok(())
    } else {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
        Err(Failure {
            code: EXIT_PROPERTY,
            message: format!("property failure in {}", failed.join(", ")),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Verify(args) => run_verify(args),
        Command::Simulate(args)
        | Command::Pretrain(args)
        | Command::Finetune(args)
        | Command::Eval(args)
        | Command::Oracle(args) => run_stage(&cli.command, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
