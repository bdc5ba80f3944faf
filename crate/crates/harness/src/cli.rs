//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::HarnessError;
use crate::experiments::{run_experiment, RunOptions, RunReport};

/// Environment variable naming the output directory when `--out` is absent.
pub const OUT_ENV: &str = "LORACOMP_OUT";

#[derive(Debug, Parser)]
#[command(name = "loracomp", version, about = "Run adapter-composition experiments on the analytic testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample with gated composition and the naive baseline; report moment errors.
    ComposeRun(CommonArgs),
    /// Tabulate adapter-to-base similarities per condition.
    SimilarityProbe(CommonArgs),
    /// Run gated sampling over a grid of guidance settings.
    Sweep(CommonArgs),
    /// Load every adapter and compare top-k gating with merging.
    DynamicSelect(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run with this single seed instead of the configured ones.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: the config's output.dir, else runs/<name>].
    #[arg(long, value_name = "DIR", env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Store wall-clock timings in the manifest (makes it run-dependent).
    #[arg(long)]
    record_timings: bool,
}

fn execute(kind: ExperimentKind, args: CommonArgs) -> Result<RunReport, HarnessError> {
    let config = ExperimentConfig::from_path(&args.config)?;
    let out_dir = args
        .out
        .or_else(|| config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.experiment.name));
    let opts = RunOptions {
        out_dir,
        seed: args.seed,
        jobs: args.jobs,
        record_timings: args.record_timings,
    };
    run_experiment(kind, &config, &args.config.display().to_string(), &opts)
        .inspect(|report| print_summary(report, &opts.out_dir))
}

fn print_summary(report: &RunReport, out_dir: &std::path::Path) {
    let r = &report.results;
    for m in &r.metrics {
        println!(
            "{:<12} seed {:<6} mean_error {:.6}  cov_error {:.6}",
            m.method, m.seed, m.mean_error, m.cov_error
        );
    }
    for s in &r.similarity {
        let cond = s.condition.map_or("uncond".to_string(), |c| format!("c{c}"));
        println!("{:<12} {:<8} {:.6}", s.adapter, cond, s.mean_similarity);
    }
    for s in &r.sweep {
        println!(
            "d={:<3} global={:<5} tau={:<12} lambda={:<4} mean_error {:.6}",
            s.patch_size, s.global_mode, s.temperature, s.lambda, s.mean_error
        );
    }
    println!(
        "wrote {} files and {} to {}",
        report.manifest.files.len(),
        crate::artifacts::MANIFEST_NAME,
        out_dir.display()
    );
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let (kind, args) = match cli.command {
        Command::ComposeRun(a) => (ExperimentKind::ComposeRun, a),
        Command::SimilarityProbe(a) => (ExperimentKind::SimilarityProbe, a),
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
        Command::DynamicSelect(a) => (ExperimentKind::DynamicSelect, a),
    };
    match execute(kind, args) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
