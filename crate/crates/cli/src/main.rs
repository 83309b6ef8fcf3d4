use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedsurg_cli::{cmd_ablation, cmd_run, cmd_suite, AblationArgs, Overrides};
use fedsurg_core::suite::AblationKind;

#[derive(Parser)]
#[command(name = "fedsurg", version, about = "Federated multi-label training with per-class head aggregation")]
struct Cli {
    /// Replace every scenario and training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Train clients of a round on this many threads; results are identical.
    #[arg(long, global = true, default_value_t = 1)]
    parallel_clients: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        #[arg(long, env = "FEDSURG_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Run every member of a suite file and compare them.
    Suite {
        file: PathBuf,
        #[arg(long, env = "FEDSURG_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Walk the number-of-clients or number-of-shared-classes ladder.
    Ablation {
        /// `clients` or `shared_classes`.
        kind: AblationKind,
        #[arg(long, env = "FEDSURG_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Config supplying hyperparameters; its scenario and method are ignored.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total epochs T.
        #[arg(long)]
        epochs: Option<usize>,
        /// Learning rate for warm-up and training.
        #[arg(long)]
        lr: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        parallel_clients: cli.parallel_clients,
    };
    let result = match cli.command {
        Command::Run { config, out } => cmd_run(&config, &out, &overrides).map(|s| {
            let auroc = s.mean_auroc.map_or("NA".to_string(), |v| format!("{v:.4}"));
            println!(
                "{}: best round {}, mean AUROC {auroc}",
                out.display(),
                s.best_round
            );
        }),
        Command::Suite { file, out } => cmd_suite(&file, &out, &overrides).map(|t| {
            println!("{}: {} rows", out.join("comparison.csv").display(), t.rows.len());
        }),
        Command::Ablation {
            kind,
            out,
            repeats,
            config,
            epochs,
            lr,
        } => {
            let args = AblationArgs {
                kind,
                repeats,
                template: config,
                total_epochs: epochs,
                lr,
            };
            cmd_ablation(&args, &out, &overrides).map(|r| {
                println!("{}: {} rungs", out.join("summary.csv").display(), r.len());
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsurg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
