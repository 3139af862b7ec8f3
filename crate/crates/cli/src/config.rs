use std::path::{Path, PathBuf};

use hzdlab_core::control::FiniteTimeParams;
use hzdlab_core::learn::DdpgConfig;
use hzdlab_core::sim::SimConfig;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Original,
    Rl,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RobotSection {
    /// TOML robot parameter file; built-in values when absent.
    pub params: Option<PathBuf>,
    /// Mass and inertia multiplier of the plant. The controller's model
    /// always uses the unscaled parameters.
    pub scale: f64,
}

impl Default for RobotSection {
    fn default() -> Self {
        Self { params: None, scale: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GaitSection {
    /// Gait JSON; the built-in seed gait when absent.
    pub path: Option<PathBuf>,
    /// Stance-knee offset applied by `gait-gen` before the periodicity search.
    pub hip_offset: f64,
    pub tolerance: f64,
    pub max_evals: usize,
}

impl Default for GaitSection {
    fn default() -> Self {
        Self { path: None, hip_offset: 0.0, tolerance: 1e-6, max_evals: 400 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub kind: ControllerKind,
    pub a: f64,
    pub epsilon: f64,
    /// Symmetric torque limit in N m.
    pub u_max: Option<f64>,
    /// Whether `u_max` also clips the original controller.
    pub saturate_original: bool,
    pub policy: Option<PathBuf>,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let ft = FiniteTimeParams::default();
        Self { kind: ControllerKind::Original, a: ft.a, epsilon: ft.epsilon, u_max: None, saturate_original: true, policy: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub steps: usize,
    pub output_dir: PathBuf,
    /// Finite-difference step for the return-map Jacobian.
    pub perturbation: f64,
    /// Extra gait files for `eval-gaits`.
    pub eval_gaits: Vec<PathBuf>,
    /// Hip-height variants of the training gait for `eval-gaits`.
    pub eval_hip_offsets: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 10,
            output_dir: PathBuf::from("out"),
            perturbation: 1e-5,
            eval_gaits: Vec::new(),
            eval_hip_offsets: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub robot: RobotSection,
    pub gait: GaitSection,
    pub controller: ControllerSection,
    pub sim: SimConfig,
    pub ddpg: DdpgConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    /// Parse a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.robot.params.as_mut().map(rebase);
        cfg.gait.path.as_mut().map(rebase);
        cfg.controller.policy.as_mut().map(rebase);
        cfg.experiment.eval_gaits.iter_mut().for_each(rebase);
        rebase(&mut cfg.experiment.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if !(self.robot.scale.is_finite() && self.robot.scale > 0.0) {
            return err(format!("robot.scale must be positive, got {}", self.robot.scale));
        }
        if let Some(u) = self.controller.u_max {
            if !(u.is_finite() && u > 0.0) {
                return err(format!("controller.u_max must be positive, got {u}"));
            }
        }
        if self.experiment.steps == 0 {
            return err("experiment.steps must be at least 1".into());
        }
        if !(self.experiment.perturbation > 0.0) {
            return err("experiment.perturbation must be positive".into());
        }
        FiniteTimeParams::new(self.controller.a, self.controller.epsilon).map_err(|e| ConfigError(e.to_string()))?;
        self.sim.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.ddpg.validate().map_err(|e| ConfigError(e.to_string()))?;
        let files = self.robot.params.iter().chain(&self.gait.path).chain(&self.experiment.eval_gaits);
        for f in files {
            if !f.exists() {
                return err(format!("referenced file {} does not exist", f.display()));
            }
        }
        Ok(())
    }

    pub fn finite_time(&self) -> FiniteTimeParams {
        FiniteTimeParams { a: self.controller.a, epsilon: self.controller.epsilon }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn sections_parse_and_unknown_keys_are_rejected() {
        let cfg: ExperimentConfig = toml::from_str(
            "[robot]\nscale = 1.5\n[controller]\nkind = \"rl\"\nu_max = 105.0\n[ddpg]\ngamma = 0.9\n[experiment]\nseed = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.robot.scale, 1.5);
        assert_eq!(cfg.controller.kind, ControllerKind::Rl);
        assert_eq!(cfg.ddpg.gamma, 0.9);
        assert_eq!(cfg.experiment.seed, 3);
        assert!(toml::from_str::<ExperimentConfig>("[robot]\nmass = 2.0\n").is_err());
    }

    #[test]
    fn bad_values_fail_validation() {
        let mut cfg = ExperimentConfig::default();
        cfg.robot.scale = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.gait.path = Some("/definitely/missing.json".into());
        assert!(cfg.validate().is_err());
    }
}
