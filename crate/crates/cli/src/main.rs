use cdg_cli::commands;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cdg-lab", version, about = "Continual diffusion generation lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one continual training run and write its artifacts.
    Train {
        /// Run configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for run.json, CSVs, and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute the fidelity row of a saved checkpoint.
    Eval {
        /// Checkpoint written by `train` (ckpt_task*.bin).
        #[arg(long)]
        ckpt: PathBuf,
        /// The run configuration the checkpoint came from.
        #[arg(long)]
        config: PathBuf,
        /// Optional directory for eval.json (results always print).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per grid point over the consistency weights.
    Sweep {
        /// Base configuration; must set method "ccd".
        #[arg(long)]
        config: PathBuf,
        /// Axes like "kappa=1e-7,1e-5;lambda=1e-5;eta=1e-5". Missing axes
        /// stay at the default center point.
        #[arg(long)]
        grid: String,
        /// Output root; one point_NNN directory per grid point.
        #[arg(long)]
        out: PathBuf,
    },
    /// Component study: the replay base plus consistency terms stacked one
    /// at a time, all with the shared config seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate finished runs into a comparison table and forgetting-curve
    /// plot data.
    Report {
        /// Directory scanned recursively for run.json files.
        #[arg(long)]
        runs: PathBuf,
        /// Where to write report.md and CSVs (defaults to --runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Train { config, out, seed } => commands::cmd_train(&config, &out, seed),
        Cmd::Eval { ckpt, config, out } => commands::cmd_eval(&ckpt, &config, out.as_deref()),
        Cmd::Sweep { config, grid, out } => commands::cmd_sweep(&config, &grid, &out),
        Cmd::Ablate { config, out } => commands::cmd_ablate(&config, &out),
        Cmd::Report { runs, out } => commands::cmd_report(&runs, out.as_deref()),
    };
    std::process::exit(code);
}
