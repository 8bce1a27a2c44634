use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::EnsembleReduction;
use crate::{Error, Result};

/// Which Hamiltonian a scenario evolves under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HamiltonianKind {
    /// `chi J_x^2`.
    Oat,
    /// `chi (J_x J_y + J_y J_x)`.
    Tat,
    /// `(chi/4)(J_x^2 + J_x J_y + J_y J_x)`.
    DrAveraged,
    /// `chi J_x^2` plus the continuous control field.
    DrivenDd,
}

impl HamiltonianKind {
    pub fn name(&self) -> &'static str {
        match self {
            HamiltonianKind::Oat => "oat",
            HamiltonianKind::Tat => "tat",
            HamiltonianKind::DrAveraged => "dr-averaged",
            HamiltonianKind::DrivenDd => "driven-dd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oat" => Ok(HamiltonianKind::Oat),
            "tat" => Ok(HamiltonianKind::Tat),
            "dr-averaged" | "dr" => Ok(HamiltonianKind::DrAveraged),
            "driven-dd" => Ok(HamiltonianKind::DrivenDd),
            _ => Err(Error::Usage(format!(
                "unknown hamiltonian '{s}' (expected oat, tat, dr-averaged or driven-dd)"
            ))),
        }
    }
}

impl fmt::Display for HamiltonianKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub n_x: i32,
    pub n_y: i32,
    /// Control periods per optimal squeezing time: `t_c = t_min / n_cyc`.
    pub n_cyc: u32,
    /// Optimal squeezing time of the averaged DR Hamiltonian. Computed when
    /// absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<f64>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            n_x: 2,
            n_y: 1,
            n_cyc: 20,
            t_min: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionConfig {
    #[default]
    Moments,
    PerPathXi,
}

impl From<ReductionConfig> for EnsembleReduction {
    fn from(r: ReductionConfig) -> Self {
        match r {
            ReductionConfig::Moments => EnsembleReduction::Moments,
            ReductionConfig::PerPathXi => EnsembleReduction::PerPathXi,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub alpha: f64,
    pub sigma_sq: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    pub reduction: ReductionConfig,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            sigma_sq: 20.0,
            n_paths: 2000,
            master_seed: 20_240_601,
            reduction: ReductionConfig::Moments,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Every grid point (every substep for driven runs).
    #[default]
    All,
    /// Multiples of the control period only.
    Stroboscopic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    pub t_end: f64,
    /// Sampling step for time-independent Hamiltonians, and the noise grid
    /// when no control block is given.
    pub dt: f64,
    pub substeps_per_period: usize,
    pub sampling: Sampling,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            dt: 1e-3,
            substeps_per_period: 128,
            sampling: Sampling::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyDdConfig {
    pub pairs: Vec<[i32; 2]>,
    /// Spin number used for the residual operators.
    pub n_spins: u32,
}

impl Default for VerifyDdConfig {
    fn default() -> Self {
        Self {
            pairs: vec![[2, 1], [3, 1], [5, 3], [4, 2], [1, 1]],
            n_spins: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub n_values: Vec<u32>,
    pub hamiltonians: Vec<HamiltonianKind>,
    /// Samples in the coarse scan window.
    pub grid_points: usize,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            n_values: vec![10, 20, 50, 100, 200, 500],
            hamiltonians: vec![
                HamiltonianKind::Oat,
                HamiltonianKind::DrAveraged,
                HamiltonianKind::Tat,
            ],
            grid_points: 400,
        }
    }
}

/// Everything a run needs. Loaded from TOML; every key is optional and
/// falls back to [`ScenarioConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub n_spins: u32,
    pub hamiltonian: HamiltonianKind,
    pub chi: f64,
    /// Where the CSV goes. Not echoed into file headers, so the same run
    /// written to two places produces identical files.
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    pub time: TimeConfig,
    pub verify_dd: VerifyDdConfig,
    pub scaling: ScalingConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_spins: 10,
            hamiltonian: HamiltonianKind::DrAveraged,
            chi: 1.0,
            output: None,
            control: None,
            noise: None,
            time: TimeConfig::default(),
            verify_dd: VerifyDdConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the cross-field invariants shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.n_spins == 0 {
            return Err(Error::Config("n_spins must be at least 1".into()));
        }
        if !(self.chi.is_finite() && self.chi != 0.0) {
            return Err(Error::Config(format!("chi must be finite and nonzero, got {}", self.chi)));
        }
        if self.hamiltonian == HamiltonianKind::DrivenDd && self.control.is_none() {
            return Err(Error::Config("hamiltonian = driven-dd needs a [control] table".into()));
        }
        if let Some(c) = &self.control {
            if c.n_cyc == 0 {
                return Err(Error::Config("control.n_cyc must be at least 1".into()));
            }
            if c.n_x == 0 || c.n_y == 0 {
                return Err(Error::Config("control windings must be nonzero".into()));
            }
            if c.n_x == c.n_y {
                return Err(Error::Config(format!(
                    "control needs n_x != n_y, got ({}, {})",
                    c.n_x, c.n_y
                )));
            }
            if let Some(t) = c.t_min {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::Config(format!("control.t_min must be positive, got {t}")));
                }
            }
        }
        if let Some(n) = &self.noise {
            if n.n_paths == 0 {
                return Err(Error::Usage("noise.n_paths must be at least 1".into()));
            }
        }
        let t = &self.time;
        if !(t.t_end > 0.0 && t.t_end.is_finite()) {
            return Err(Error::Config(format!("time.t_end must be positive, got {}", t.t_end)));
        }
        if !(t.dt > 0.0 && t.dt.is_finite()) {
            return Err(Error::Config(format!("time.dt must be positive, got {}", t.dt)));
        }
        if t.substeps_per_period < crate::dynamics::MIN_SUBSTEPS {
            return Err(Error::Config(format!(
                "time.substeps_per_period must be at least {}",
                crate::dynamics::MIN_SUBSTEPS
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ScenarioConfig::from_toml_str("").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = ScenarioConfig {
            hamiltonian: HamiltonianKind::DrivenDd,
            control: Some(ControlConfig {
                t_min: Some(0.491),
                ..ControlConfig::default()
            }),
            noise: Some(NoiseConfig::default()),
            ..ScenarioConfig::default()
        };
        c.time.sampling = Sampling::Stroboscopic;
        let back = ScenarioConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parses_nested_tables() {
        let c = ScenarioConfig::from_toml_str(
            r#"
n_spins = 100
hamiltonian = "driven-dd"

[control]
n_x = 2
n_y = 1
n_cyc = 30

[noise]
sigma_sq = 100.0
n_paths = 100
reduction = "per-path-xi"
"#,
        )
        .unwrap();
        assert_eq!(c.n_spins, 100);
        assert_eq!(c.control.as_ref().unwrap().n_cyc, 30);
        let n = c.noise.as_ref().unwrap();
        assert_eq!((n.alpha, n.sigma_sq, n.n_paths), (2.0, 100.0, 100));
        assert_eq!(n.reduction, ReductionConfig::PerPathXi);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ScenarioConfig::from_toml_str("n_spinz = 3"),
            Err(Error::Config(_))
        ));
        let c = ScenarioConfig {
            hamiltonian: HamiltonianKind::DrivenDd,
            ..ScenarioConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            control: Some(ControlConfig {
                n_cyc: 0,
                ..ControlConfig::default()
            }),
            ..ScenarioConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ScenarioConfig {
            noise: Some(NoiseConfig {
                n_paths: 0,
                ..NoiseConfig::default()
            }),
            ..ScenarioConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Usage(_))));
    }
}
