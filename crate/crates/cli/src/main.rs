//! `hcp`: routing, graph building, execution, passes, SCM extraction,
//! meta-evolution and the acceptance suite from the command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Environment variable that may set the output root.
pub const OUT_ENV: &str = "HCP_OUT";

#[derive(Parser, Debug)]
#[command(name = "hcp", version, about = "Typed causal primitives, routing and execution graphs")]
pub struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; commands write to `<out>/<command>/`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Route the library and emit the fused matrix with diagnostics.
    Route,
    /// Build a causal execution graph from the routing matrix.
    Build,
    /// Execute a graph mirroring the world's structure on world samples.
    Exec {
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Prune, merge and abstract a graph, then check the equivalence bound.
    Passes {
        /// Graph JSON; a seeded random DAG when absent.
        #[arg(long)]
        ceg: Option<PathBuf>,
    },
    /// Recover the world's structure and extract an SCM.
    ExtractScm,
    /// Attention operation counts across library sizes.
    BenchRouting {
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 256, 1024])]
        sizes: Vec<usize>,
    },
    /// Run the meta-evolution episode loop.
    MetaRun,
    /// Mine a primitive from residuals of the withheld mechanism family.
    Discover,
    /// Run the acceptance suite.
    Verify {
        /// Only this criterion (1 to 13).
        #[arg(long)]
        criterion: Option<u8>,
    },
    /// Export a graph as DOT, JSON and a trace CSV.
    Export {
        /// Graph JSON; the routed library graph when absent.
        #[arg(long)]
        ceg: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Route => "route",
            Command::Build => "build",
            Command::Exec { .. } => "exec",
            Command::Passes { .. } => "passes",
            Command::ExtractScm => "extract-scm",
            Command::BenchRouting { .. } => "bench-routing",
            Command::MetaRun => "meta-run",
            Command::Discover => "discover",
            Command::Verify { .. } => "verify",
            Command::Export { .. } => "export",
        }
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    } else if let Some(o) = std::env::var_os(OUT_ENV) {
        cfg.out = PathBuf::from(o);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|cfg| commands::run(&cli.command, &cfg, cli.quiet));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}: checks failed", cli.command.name());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
