use clap::{Args, Parser, Subcommand as ClapSubcommand};
use fracsource::cli::{run, MlOverrides, RunOptions, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Forward solves, source reconstruction and stability experiments for
/// time-fractional diffusion on a cylinder.
#[derive(Parser)]
#[command(name = "fracsource", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory (overrides run.out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// worker threads, 0 = all cores (overrides run.threads)
    #[arg(long)]
    threads: Option<usize>,
    /// RNG seed (overrides run.seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Tabulate E_{alpha,beta}(-x)
    MlTable {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        xmin: Option<f64>,
        #[arg(long)]
        xmax: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Solve the forward problem and write modes, face traces and residuals
    Forward {
        #[command(flatten)]
        common: Common,
    },
    /// Recover f from the face trace by fixed-point iteration
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// measured trace (t,x,value) on the inversion grid; synthesized if absent
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Source-to-flux stability ratios over a random ensemble
    Stability {
        #[command(flatten)]
        common: Common,
    },
    /// Potential-difference estimate across perturbation sizes
    Coeff {
        #[command(flatten)]
        common: Common,
    },
    /// Bump source whose solution leaves no boundary trace
    Obstruction {
        #[command(flatten)]
        common: Common,
    },
}

fn options(c: Common) -> RunOptions {
    RunOptions { config: c.config, out: c.out, threads: c.threads, seed: c.seed, ..RunOptions::default() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, opts) = match cli.command {
        Command::MlTable { common, alpha, beta, xmin, xmax, points } => (
            Subcommand::MlTable,
            RunOptions { ml: MlOverrides { alpha, beta, x_min: xmin, x_max: xmax, points }, ..options(common) },
        ),
        Command::Forward { common } => (Subcommand::Forward, options(common)),
        Command::Reconstruct { common, data } => (Subcommand::Reconstruct, RunOptions { data, ..options(common) }),
        Command::Stability { common } => (Subcommand::Stability, options(common)),
        Command::Coeff { common } => (Subcommand::Coeff, options(common)),
        Command::Obstruction { common } => (Subcommand::Obstruction, options(common)),
    };
    match run(cmd, &opts) {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {} = {:e} ({} {:e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.relation, c.limit);
            }
            for t in &report.timings {
                eprintln!("time {}: {:.3} s", t.phase, t.seconds);
            }
            println!("config {} -> {}", report.config_hash, report.out_dir.display());
            if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
