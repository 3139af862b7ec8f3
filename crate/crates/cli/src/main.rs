//! `hzdlab`: gait synthesis, walking simulation, DDPG training, Poincare
//! analysis and untrained-gait evaluation from one binary.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ControllerKind, ExperimentConfig};

/// Bad input from the user: unreadable or invalid configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser, Debug)]
#[command(name = "hzdlab", version, about = "Five-link biped walking with a learned linearization correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Make a gait periodic under the nominal controller and save it.
    GaitGen {
        #[command(flatten)]
        common: Common,
        /// Stance-knee offset applied before the search.
        #[arg(long, allow_negative_numbers = true)]
        hip_offset: Option<f64>,
    },
    /// Walk the robot and write a sample log plus a summary.
    Simulate(Common),
    /// Train the learned correction with DDPG.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "HZDLAB_EPISODES")]
        episodes: Option<usize>,
    },
    /// Fixed point and eigenvalues of the step-to-step map.
    Analyze(Common),
    /// Run a fixed policy on other gaits.
    EvalGaits {
        #[command(flatten)]
        common: Common,
        /// Additional gait files.
        #[arg(long, num_args = 1..)]
        gaits: Vec<PathBuf>,
        /// Hip-height variants of the training gait, comma separated.
        #[arg(long, allow_negative_numbers = true, value_delimiter = ',')]
        hip_offsets: Vec<f64>,
    },
}

/// Flags shared by every command; each one overrides the config file.
#[derive(Args, Debug, Default)]
struct Common {
    /// TOML experiment file.
    #[arg(long, short, env = "HZDLAB_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "HZDLAB_SCALE")]
    scale: Option<f64>,
    /// Symmetric torque limit in N m.
    #[arg(long, env = "HZDLAB_SAT")]
    sat: Option<f64>,
    #[arg(long, env = "HZDLAB_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "HZDLAB_STEPS")]
    steps: Option<usize>,
    #[arg(long, value_enum, env = "HZDLAB_CONTROLLER")]
    controller: Option<ControllerKind>,
    #[arg(long, env = "HZDLAB_POLICY")]
    policy: Option<PathBuf>,
    #[arg(long, env = "HZDLAB_GAIT")]
    gait: Option<PathBuf>,
    #[arg(long, env = "HZDLAB_PARAMS")]
    params: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, env = "HZDLAB_OUT")]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.scale {
            cfg.robot.scale = v;
        }
        if let Some(v) = self.sat {
            cfg.controller.u_max = Some(v);
        }
        if let Some(v) = self.seed {
            cfg.experiment.seed = v;
        }
        if let Some(v) = self.steps {
            cfg.experiment.steps = v;
        }
        if let Some(v) = self.controller {
            cfg.controller.kind = v;
        }
        if let Some(v) = &self.policy {
            cfg.controller.policy = Some(v.clone());
        }
        if let Some(v) = &self.gait {
            cfg.gait.path = Some(v.clone());
        }
        if let Some(v) = &self.params {
            cfg.robot.params = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.experiment.output_dir = v.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GaitGen { common, hip_offset } => {
            let mut cfg = common.resolve()?;
            if let Some(h) = hip_offset {
                cfg.gait.hip_offset = h;
            }
            cfg.validate()?;
            commands::gait_gen(&cfg)
        }
        Command::Simulate(common) => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            commands::simulate(&cfg)
        }
        Command::Train { common, episodes } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = episodes {
                cfg.ddpg.episodes = e;
            }
            cfg.validate()?;
            commands::train(&cfg)
        }
        Command::Analyze(common) => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            commands::analyze(&cfg)
        }
        Command::EvalGaits { common, gaits, hip_offsets } => {
            let mut cfg = common.resolve()?;
            cfg.experiment.eval_gaits.extend(gaits);
            cfg.experiment.eval_hip_offsets.extend(hip_offsets);
            cfg.validate()?;
            commands::eval_gaits(&cfg)
        }
    }
}

/// 2 config, 3 simulation failure, 4 training infeasible, 5 non-convergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    use hzdlab_core::Error as E;
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::Config(_) | E::Domain(_) | E::Io(_) | E::Json(_)) => 2,
        Some(E::TrainingInfeasible(_)) => 4,
        Some(E::NonConvergence { .. } | E::SectionEscape(_)) => 5,
        Some(_) => 3,
        None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
