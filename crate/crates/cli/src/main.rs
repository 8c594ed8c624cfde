mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::Patch;
use dcssl::composite::HTransform;

pub const VERSION: &str = concat!("dcssl ", env!("CARGO_PKG_VERSION"));

#[derive(Parser)]
#[command(name = "dcssl", version, about = "Semi-supervised estimation for doubly censored event times")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one cohort and write it as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Fit SL and SSL estimators to a cohort CSV and write JSON.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Cohort CSV.
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Monte Carlo study: writes summary.csv and replications.json into --output.
    Mc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        fit: FitArgs,
        #[arg(long)]
        reps: Option<usize>,
        /// Worker threads; results do not depend on this.
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Transformation index of the outcome model.
    #[arg(long)]
    r: Option<f64>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Transformation index of the surrogate.
    #[arg(long)]
    r_star: Option<f64>,
    /// Labeled sample size.
    #[arg(long)]
    n: Option<usize>,
    /// Unlabeled subjects per labeled subject.
    #[arg(long)]
    n_mult: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HArg {
    Log,
    Identity,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long, overrides_with = "no_model4")]
    model4: bool,
    #[arg(long)]
    no_model4: bool,
    #[arg(long, overrides_with = "no_model5")]
    model5: bool,
    #[arg(long)]
    no_model5: bool,
    /// SL and SSL1 only.
    #[arg(long, conflicts_with_all = ["model5", "no_model4"])]
    model4_only: bool,
    /// Transform of the window start in the composite working model.
    #[arg(long, value_enum)]
    h: Option<HArg>,
    /// EM convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// EM iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
}

impl Common {
    fn patches(&self, out: &mut Vec<Patch>) {
        if let Some(p) = &self.output {
            out.push(Patch::new("output", p));
        }
        if let Some(r) = self.r {
            out.push(Patch::new("sim.r", r));
            out.push(Patch::new("ssl.r", r));
        }
    }
}

impl SimArgs {
    fn patches(&self, out: &mut Vec<Patch>) {
        if let Some(v) = self.seed {
            out.push(Patch::new("sim.seed", v));
        }
        if let Some(v) = self.r_star {
            out.push(Patch::new("sim.r_star", v));
        }
        if let Some(v) = self.n {
            out.push(Patch::new("sim.n", v));
        }
        if let Some(v) = self.n_mult {
            out.push(Patch::new("sim.n_mult", v));
        }
    }
}

impl FitArgs {
    fn patches(&self, out: &mut Vec<Patch>) {
        if self.model4 {
            out.push(Patch::new("ssl.use_model4", true));
        }
        if self.no_model4 {
            out.push(Patch::new("ssl.use_model4", false));
        }
        if self.model5 {
            out.push(Patch::new("ssl.use_model5", true));
        }
        if self.no_model5 {
            out.push(Patch::new("ssl.use_model5", false));
        }
        if self.model4_only {
            out.push(Patch::new("ssl.use_model4", true));
            out.push(Patch::new("ssl.use_model5", false));
        }
        if let Some(h) = self.h {
            let h = match h {
                HArg::Log => HTransform::Log,
                HArg::Identity => HTransform::Identity,
            };
            out.push(Patch::new("ssl.h", h));
        }
        if let Some(v) = self.tol {
            out.push(Patch::new("ssl.em.tol", v));
        }
        if let Some(v) = self.max_iter {
            out.push(Patch::new("ssl.em.max_iter", v));
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut patches = Vec::new();
    match cli.command {
        Command::Simulate { common, sim } => {
            common.patches(&mut patches);
            sim.patches(&mut patches);
            let cfg = config::resolve(common.config.as_deref(), &patches)?;
            commands::simulate(&cfg)
        }
        Command::Fit { common, input, fit } => {
            common.patches(&mut patches);
            fit.patches(&mut patches);
            if let Some(p) = &input {
                patches.push(Patch::new("input", p));
            }
            let cfg = config::resolve(common.config.as_deref(), &patches)?;
            commands::fit(&cfg)
        }
        Command::Mc { common, sim, fit, reps, threads } => {
            common.patches(&mut patches);
            sim.patches(&mut patches);
            fit.patches(&mut patches);
            if let Some(v) = reps {
                patches.push(Patch::new("sim.reps", v));
            }
            if let Some(v) = threads {
                patches.push(Patch::new("threads", v));
            }
            let cfg = config::resolve(common.config.as_deref(), &patches)?;
            commands::mc(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
