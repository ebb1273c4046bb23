mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protoda::trainer::Profile;
use protoda::{Error, Scalar};

use crate::commands::{Invocation, Layout};
use crate::config::{Overrides, Precision};

/// Exit code for a missing upstream checkpoint.
const EXIT_MISSING: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "protoda", version, about = "Prototype explanations of what a domain-adaptation model transfers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file overriding the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory [default: $PROTODA_CACHE/runs/<profile>, or .protoda/runs/<profile>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed; required by the training commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// synthetic, office-home or domainnet-126.
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base adaptation model.
    TrainBase {
        /// Retrain even if a checkpoint exists.
        #[arg(long)]
        force: bool,
    },
    /// Train prototypes and head against the frozen base model; resumes from the latest round.
    TrainInterp {
        /// Discard existing rounds and start over.
        #[arg(long)]
        force: bool,
    },
    /// Render prototype cards, cross-domain matches and category panels.
    Explain(Downstream),
    /// Prototype-removal curves and rank correlations.
    Inspect {
        #[command(flatten)]
        downstream: Downstream,
        /// Mask only the current step's prototypes instead of all ranked so far.
        #[arg(long)]
        non_cumulative: bool,
        /// Restrict to these categories (name or index); repeatable.
        #[arg(long = "category")]
        categories: Vec<String>,
        /// Also retrain with gamma = 0 and compare.
        #[arg(long)]
        ablation: bool,
    },
    /// Agreement, fidelity and accuracies of the interpretive model.
    Eval(Downstream),
}

#[derive(Debug, Args)]
struct Downstream {
    /// Interpretive checkpoint [default: <out>/interp/latest.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn default_out(profile: Profile) -> PathBuf {
    let root = std::env::var_os("PROTODA_CACHE").map_or_else(|| PathBuf::from(".protoda"), PathBuf::from);
    root.join("runs").join(profile.as_str())
}

fn dispatch<T: Scalar>(command: &Command, inv: &Invocation) -> anyhow::Result<()> {
    match command {
        Command::TrainBase { .. } => commands::train_base_cmd::<T>(inv),
        Command::TrainInterp { .. } => commands::train_interp_cmd::<T>(inv),
        Command::Explain(_) => commands::explain_cmd::<T>(inv),
        Command::Inspect { .. } => commands::inspect_cmd::<T>(inv),
        Command::Eval(_) => commands::eval_cmd::<T>(inv),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut flags = Overrides {
        profile: cli.common.profile,
        seed: cli.common.seed,
        ..Default::default()
    };
    if let Some(Command::Inspect {
        non_cumulative,
        categories,
        ablation,
        ..
    }) = &cli.command
    {
        flags.non_cumulative = *non_cumulative;
        flags.categories = categories.clone();
        flags.ablation = *ablation;
    }
    let cfg = config::resolve(cli.common.config.as_deref(), &flags)?;
    if cli.common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = &cli.command else {
        return Err(Error::InvalidArgument("no command given (see --help)".into()).into());
    };
    let (force, checkpoint) = match command {
        Command::TrainBase { force } | Command::TrainInterp { force } => (*force, None),
        Command::Explain(d) | Command::Eval(d) | Command::Inspect { downstream: d, .. } => (false, d.checkpoint.clone()),
    };
    let inv = Invocation {
        layout: Layout {
            root: cli.common.out.clone().unwrap_or_else(|| default_out(cfg.profile)),
        },
        cfg,
        argv: std::env::args().collect(),
        force,
        checkpoint,
    };
    match inv.cfg.precision {
        Precision::F32 => dispatch::<f32>(command, &inv),
        Precision::F64 => dispatch::<f64>(command, &inv),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::MissingArtifact(_)) => EXIT_MISSING,
        Some(Error::InvalidConfig(_) | Error::InvalidArgument(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
