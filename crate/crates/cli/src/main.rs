//! `mvl` command line: thin front end over the experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvl_core::energy::EnergyModel;
use mvl_core::harness::{self, ExperimentConfig, ExperimentKind};
use mvl_core::Error;

#[derive(Parser, Debug)]
#[command(name = "mvl", version, about = "Minimum-velocity score matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config `output_dir`, else $MVL_OUTPUT_ROOT/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an energy model on the configured target.
    Train(Common),
    /// Squared bias and variance of the stochastic estimators over a step-size grid.
    SweepBiasVariance {
        #[command(flatten)]
        common: Common,
        /// Use this model instead of training one.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Normalized log density of a circle/sphere model on the quadrature grid.
    Density {
        #[command(flatten)]
        common: Common,
        /// Model JSON; a model is trained from the config when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Toy implicit VAE / WAE with a circle latent.
    DemoAe(Common),
    /// CD-1 with and without control variate against the exact objective.
    Cd1Compare(Common),
}

fn load_config(common: &Common, kind: ExperimentKind) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<EnergyModel, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read model {}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    EnergyModel::from_json(&v).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Error> {
    let (common, kind, model) = match &cli.command {
        Command::Train(c) => (c, ExperimentKind::Train, None),
        Command::SweepBiasVariance { common, model } => (common, ExperimentKind::SweepBiasVariance, model.as_ref()),
        Command::Density { common, model, .. } => (common, ExperimentKind::Density, model.as_ref()),
        Command::DemoAe(c) => (c, ExperimentKind::DemoAe, None),
        Command::Cd1Compare(c) => (c, ExperimentKind::Cd1Compare, None),
    };
    let mut cfg = load_config(common, kind)?;
    if let Command::Density {
        resolution: Some(r), ..
    } = &cli.command
    {
        cfg.density.resolution = *r;
        cfg.validate()?;
    }
    let model = model.map(|p| load_model(p)).transpose()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir());
    harness::run_experiment(&cfg, &out, model.as_ref())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
