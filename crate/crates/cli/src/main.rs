use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmp::app;

#[derive(Parser)]
#[command(name = "dmp", version, about = "Train networks with learnable pruning gates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the prune report of a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "which")]
struct Which {
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    all: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    which: Which,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Append a check with a deliberately broken backward rule.
    #[arg(long, hide = true)]
    include_fault: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> dmp::Result<bool> {
    match command {
        Command::Train { config, seed } => {
            let run = app::cmd_train(&config, seed)?;
            if let Some(m) = run.metrics.last() {
                let err = m
                    .test_error
                    .map(|e| format!(", test error {:.4}", e))
                    .unwrap_or_default();
                let ppl = m
                    .test_perplexity
                    .map(|p| format!(", test perplexity {:.3}", p))
                    .unwrap_or_default();
                println!("epoch {} objective {:.5}{err}{ppl}", m.epoch, m.objective);
            }
            print!("{}", run.report.render());
            println!("outputs in {}", run.output_dir.display());
            Ok(true)
        }
        Command::Gradcheck(args) => {
            let ops: Vec<String> = args.which.op.into_iter().collect();
            let run = app::cmd_gradcheck(&ops, args.tolerance, args.include_fault)?;
            print!("{}", run.render());
            let failed = run.failures();
            if failed.is_empty() {
                println!("all {} checks below {:e}", run.results.len(), run.tolerance);
                Ok(true)
            } else {
                eprintln!("gradient check failed: {}", failed.join(", "));
                Ok(false)
            }
        }
        Command::Report { checkpoint } => {
            print!("{}", app::cmd_report(&checkpoint)?.render());
            Ok(true)
        }
    }
}
