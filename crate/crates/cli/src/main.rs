use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use stochflow_cli::config::ControlExperiment;
use stochflow_cli::{load_config, run, validate, Experiment, ExperimentConfig, Outcome, RunOptions};

#[derive(Parser)]
#[command(name = "stochflow", version, about = "Spectral stochastic-fluid experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Configuration file (TOML); may also be given positionally.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(value_name = "CONFIG")]
    positional: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trajectory-parallel stages.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from `checkpoint.json` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many checkpoints.
    #[arg(long, hide = true)]
    halt_after: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct Endpoints {
    /// Start position, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    v0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x1: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    v1: Option<Vec<f64>>,
    /// Gains for the Jacobian-growth demo.
    #[arg(long, value_delimiter = ',')]
    growth: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run whatever experiment the configuration describes.
    Run(Common),
    /// Fluid time series.
    Simulate(Common),
    /// Lyapunov spectrum of the Lagrangian cocycle.
    Lyapunov(Common),
    /// Stationary passive-scalar balance, optionally over a κ-sweep.
    Scalar(Common),
    /// Structure functions, Yaglom compensated flux and KHM residual.
    Yaglom(Common),
    /// Bracket spanning or closure check.
    HormanderCheck(Common),
    /// Explicit controls with endpoint errors.
    ControlDemo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ends: Endpoints,
    },
    /// Static checks of a configuration.
    Validate(Common),
}

impl Common {
    fn config_path(&self) -> Option<&PathBuf> {
        self.config.as_ref().or(self.positional.as_ref())
    }

    fn load(&self) -> Result<ExperimentConfig> {
        let path = self.config_path().context("a configuration file is required (--config or positional)")?;
        let mut cfg = load_config(path)?;
        self.apply(&mut cfg);
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            resume: self.resume,
            halt_after: self.halt_after,
        }
    }
}

fn control_config(common: &Common, ends: &Endpoints) -> Result<ExperimentConfig> {
    let mut cfg = match common.config_path() {
        Some(_) => common.load()?,
        None => {
            let (Some(x0), Some(v0), Some(x1), Some(v1)) = (&ends.x0, &ends.v0, &ends.x1, &ends.v1) else {
                bail!("control-demo needs a configuration or all of --x0 --v0 --x1 --v1");
            };
            let text = format!(
                "[experiment.control]\nx0 = {x0:?}\nv0 = {v0:?}\nx1 = {x1:?}\nv1 = {v1:?}\n"
            );
            let mut cfg = stochflow_cli::parse_config(&text)?;
            common.apply(&mut cfg);
            cfg
        }
    };
    let Experiment::Control(c) = &mut cfg.experiment else {
        bail!("control-demo expects an [experiment.control] configuration");
    };
    let c: &mut ControlExperiment = c;
    for (slot, v) in [
        (&mut c.x0, &ends.x0),
        (&mut c.v0, &ends.v0),
        (&mut c.x1, &ends.x1),
        (&mut c.v1, &ends.v1),
        (&mut c.jacobian_growth, &ends.growth),
    ] {
        if let Some(v) = v {
            *slot = v.clone();
        }
    }
    Ok(cfg)
}

fn execute(cfg: ExperimentConfig, expected: Option<&str>, common: &Common) -> Result<ExitCode> {
    if let Some(kind) = expected {
        if cfg.experiment.kind() != kind {
            bail!(
                "this subcommand runs `{kind}` experiments but the configuration describes `{}`",
                cfg.experiment.kind()
            );
        }
    }
    let res = run(&cfg, &common.options())?;
    println!("{}", serde_json::to_string_pretty(&res.manifest)?);
    Ok(match res.outcome {
        Outcome::Completed => ExitCode::SUCCESS,
        Outcome::Interrupted => {
            eprintln!("stopped at a checkpoint; rerun with --resume to continue");
            ExitCode::from(3)
        }
    })
}

fn main_inner() -> Result<ExitCode> {
    let cli = Cli::parse();
    let threads = match &cli.command {
        Command::ControlDemo { common, .. } => common.threads,
        Command::Run(c)
        | Command::Simulate(c)
        | Command::Lyapunov(c)
        | Command::Scalar(c)
        | Command::Yaglom(c)
        | Command::HormanderCheck(c)
        | Command::Validate(c) => c.threads,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Run(c) => execute(c.load()?, None, c),
        Command::Simulate(c) => execute(c.load()?, Some("simulate"), c),
        Command::Lyapunov(c) => execute(c.load()?, Some("lyapunov"), c),
        Command::Scalar(c) => execute(c.load()?, Some("scalar"), c),
        Command::Yaglom(c) => execute(c.load()?, Some("yaglom"), c),
        Command::HormanderCheck(c) => execute(c.load()?, Some("hormander"), c),
        Command::ControlDemo { common, ends } => execute(control_config(common, ends)?, Some("control"), common),
        Command::Validate(c) => {
            let report = validate(&c.load()?);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
