use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "jumpbsde",
    about = "Monte Carlo and quadrature schemes for decoupled FBSDEs with a single jump"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a TOML config (or a manifest.json from a previous run).
    Run { config: PathBuf },
    /// List built-in models and their parameter schemas.
    Models,
}

fn main() -> ExitCode {
    // JUMPBSDE_THREADS caps the worker count; it affects speed, never results.
    if let Ok(v) = std::env::var("JUMPBSDE_THREADS") {
        if let Ok(k) = v.parse::<usize>() {
            if k >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
            }
        }
    }
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => match jumpbsde::cli::run(&config) {
            Ok(files) => {
                for f in files {
                    println!("wrote {f}");
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Models => {
            print!("{}", jumpbsde::model::describe_builtins());
            ExitCode::SUCCESS
        }
    }
}
