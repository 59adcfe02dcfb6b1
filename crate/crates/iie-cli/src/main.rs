use clap::{Args, Parser, Subcommand};
use iie_cli::commands::{self, Manifest};
use iie_cli::{CliError, CliResult, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

/// Interventional indirect effects through one of two binary mediators.
#[derive(Parser)]
#[command(name = "iie", version)]
struct Cli {
    /// Worker threads; falls back to IIE_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override any key, e.g. `--set simulate.reps=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory (overrides data.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WithData {
    #[command(flatten)]
    common: Common,

    /// Dataset CSV with header `y,a,m1,m2,x1[,x2,...]` (overrides data.path).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo table on the simulation design.
    Simulate(Common),
    /// One-step, projection and DR-Learner estimates on a dataset.
    Estimate(WithData),
    /// Sensitivity bounds over a grid of tau values.
    Bounds(WithData),
    /// Exact remainder and centering checks on random discrete laws.
    Verify(Common),
    /// Scaled RMSE against sample size under rate-controlled nuisances.
    Convergence(Common),
}

fn threads(flag: Option<usize>) -> CliResult<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("IIE_THREADS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("IIE_THREADS='{s}' is not a thread count")))?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(rayon::current_num_threads())
}

fn run(cli: Cli) -> CliResult<()> {
    let start = Instant::now();
    let threads = threads(cli.threads)?;
    let (name, common, data) = match &cli.command {
        Command::Simulate(c) => ("simulate", c, None),
        Command::Estimate(w) => ("estimate", &w.common, w.data.as_ref()),
        Command::Bounds(w) => ("bounds", &w.common, w.data.as_ref()),
        Command::Verify(c) => ("verify", c, None),
        Command::Convergence(c) => ("convergence", c, None),
    };
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(d) = data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.data.out_dir = o.clone();
    }
    let out = cfg.data.out_dir.clone();
    let result = match &cli.command {
        Command::Simulate(_) => commands::simulate(&cfg, &out),
        Command::Estimate(_) => commands::estimate(&cfg, &out),
        Command::Bounds(_) => commands::bounds(&cfg, &out),
        Command::Verify(_) => commands::verify(&cfg, &out),
        Command::Convergence(_) => commands::convergence(&cfg, &out),
    };
    if let Err(CliError::Positivity { rows, .. }) = &result {
        // stderr shows a preview; the file lists every offending row.
        commands::write_positivity_rows(&out, rows)?;
    }
    let outputs = result?;
    commands::write_manifest(
        &out,
        &Manifest {
            version: env!("CARGO_PKG_VERSION"),
            command: name.into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            threads,
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs,
        },
    )?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.id());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
