use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nlfkpp_cli::commands::{self, OracleKind};
use nlfkpp_cli::CliError;

#[derive(Parser)]
#[command(name = "nlfkpp", version, about = "Radial non-local Fisher-KPP blow-up experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write trace, snapshots and report.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to outputs.dir from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cross product of the [sweep] axes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Reference solutions: the homogeneous ODE or the frozen-coefficient run.
    Oracle {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory of a non-local run to compare against (local only).
        #[arg(long)]
        paired: Option<PathBuf>,
    },
    /// Rebuild report.json from a trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the regime of (N, p, beta).
    Classify {
        #[arg(long = "N")]
        n: u32,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        beta: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ode,
    Local,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out } => {
            let s = commands::simulate(&config, out.as_deref())?;
            println!("{} at t = {:e}", s.status, s.report.t_final);
        }
        Command::Sweep { config, out, workers } => {
            let rows = commands::sweep(&config, out.as_deref(), workers)?;
            println!("{} sweep points", rows.len());
        }
        Command::Oracle {
            kind,
            config,
            out,
            paired,
        } => {
            let kind = match kind {
                Kind::Ode => OracleKind::Ode,
                Kind::Local => OracleKind::Local,
            };
            if paired.is_some() && kind == OracleKind::Ode {
                return Err(CliError::ConfigParse("--paired only applies to --kind local".into()));
            }
            commands::oracle(kind, &config, out.as_deref(), paired.as_deref())?;
        }
        Command::Analyze { trace, out } => {
            let r = commands::analyze(&trace, &out)?;
            match r.t_est {
                Some(t) => println!("{} T_est = {t:e}", r.status),
                None => println!("{} T_est unavailable", r.status),
            }
        }
        Command::Classify { n, p, beta } => {
            let r = commands::classify(n, p, beta)?;
            println!(
                "{} bound_global={} bound_blowup={} q={}",
                r.tag, r.bound_global, r.bound_blowup, r.q
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
