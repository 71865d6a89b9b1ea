use std::path::PathBuf;
use std::process::ExitCode;

use abft_cli::{
    cmd_model, cmd_run, cmd_stress, cmd_verify, default_stress_fault, exit_for, load_params, ExitKind, FileConfig,
    RunConfig,
};
use abft_core::FaultPlan;
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "abft", version, about = "Fault tolerant SUMMA on a simulated process grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Multiply two random matrices, optionally under a fault plan.
    Run(Common),
    /// Repeat runs under a random process killer.
    Stress(Common),
    /// Emit model tables as CSV.
    Model {
        /// Local matrix size of the weak-scaling tables.
        #[arg(long)]
        nloc: Option<usize>,
        /// Machine and recovery constants, `key = value` per line.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Directory for the CSV files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the experiment described by a manifest and compare.
    Verify {
        /// A manifest.txt written by `run`.
        manifest: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Global matrix size.
    #[arg(long, conflicts_with = "nloc")]
    n: Option<usize>,
    /// Per-process block size; the global size is (q-1) * nloc.
    #[arg(long)]
    nloc: Option<usize>,
    /// Grid side, checksum row and column included (q >= 2).
    #[arg(long)]
    q: Option<usize>,
    /// Algorithmic block size [default: 64].
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `none`, `rank=R,C@step=K[+OFFSET]`, `rank=R,C@clock=N` or
    /// `random:rate=F,seed=S`; several joined with `;`.
    #[arg(long)]
    fault: Option<String>,
    /// Stress iterations [default: 30].
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory for manifests and logs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with any of the options above; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn merged(&self) -> Result<FileConfig> {
        let flags = FileConfig {
            n: self.n,
            nloc: self.nloc,
            q: self.q,
            nb: self.nb,
            seed: self.seed,
            fault: self.fault.clone(),
            iterations: self.iterations,
            params: None,
            out: self.out.clone(),
        };
        Ok(match &self.config {
            Some(path) => flags.or(FileConfig::load(path)?),
            None => flags,
        })
    }
}

fn dispatch(cli: Cli) -> Result<ExitKind> {
    let outcome = match cli.command {
        Command::Run(c) => cmd_run(&RunConfig::resolve(&c.merged()?, FaultPlan::none())?)?,
        Command::Stress(c) => {
            let merged = c.merged()?;
            let fault = default_stress_fault(merged.seed.unwrap_or(0));
            cmd_stress(&RunConfig::resolve(&merged, fault)?)?.0
        }
        Command::Model { nloc, params, out } => cmd_model(&load_params(params.as_deref())?, nloc, out.as_deref())?,
        Command::Verify { manifest } => cmd_verify(&manifest)?,
    };
    print!("{}", outcome.stdout);
    Ok(outcome.exit)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exit = dispatch(cli).unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        exit_for(&e)
    });
    ExitCode::from(exit.code() as u8)
}
