use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relctl::{cmd_bench, cmd_check, cmd_forward, cmd_masks, configure_threads, CheckTarget, RunReport};

/// Relational attention masks, checks and benchmarks.
///
/// Exit status: 0 when every check passes, 1 when a check fails, 2 on
/// usage, I/O or layout errors. `RELATTN_THREADS` caps kernel threads.
#[derive(Parser)]
#[command(name = "relctl", version)]
struct Cli {
    /// Print the report as JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export CSAM, MCAM, rotary positions and attention blocks for a layout.
    Masks {
        spec: PathBuf,
        #[arg(short = 'o', long = "out")]
        out_dir: PathBuf,
    },
    /// Run the invariant suite on one layout or on the built-in corpus.
    Check {
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        corpus: bool,
        spec: Option<PathBuf>,
    },
    /// Time the naive and block-sparse self-attention kernels.
    Bench {
        spec: PathBuf,
        #[arg(long, default_value_t = 64)]
        head_dim: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// One seeded block forward with its velocity loss.
    Forward {
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        r: f32,
        #[arg(long, default_value_t = 8)]
        d: usize,
    },
}

fn emit(report: &RunReport, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
    } else {
        print!("{}", report.render_text());
        eprintln!("wall time: {:.3} s", report.wall_time_s);
    }
    for f in report.failures() {
        eprintln!("failed check: {} on {}", f.name, f.layout);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Masks { spec, out_dir } => cmd_masks(spec, out_dir),
        Command::Check { corpus: true, .. } => cmd_check(CheckTarget::Corpus),
        Command::Check { spec, .. } => cmd_check(CheckTarget::Spec(spec.as_deref().expect("clap requires a spec"))),
        Command::Bench { spec, head_dim, reps } => cmd_bench(spec, *head_dim, *reps),
        Command::Forward { spec, seed, r, d } => cmd_forward(spec, *seed, *r, *d),
    };
    match result {
        Ok(report) => {
            emit(&report, cli.json);
            if report.all_passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
