//! JSON experiment specifications.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dual::{SolveMode, SolverConfig};
use crate::error::{Error, Result};
use crate::model::{ChannelModel, DistortionFunction, RateModel, ShannonRate, SystemConfig};
use crate::policies::PolicyKind;

/// A per-user parameter given either once for everyone or per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerUser {
    Shared(f64),
    Each(Vec<f64>),
}

impl PerUser {
    pub fn expand(&self, m: usize, name: &str) -> Result<Vec<f64>> {
        match self {
            PerUser::Shared(x) => Ok(vec![*x; m]),
            PerUser::Each(v) if v.len() == m => Ok(v.clone()),
            PerUser::Each(v) => Err(Error::Config(format!("{name} lists {} values for {m} users", v.len()))),
        }
    }
}

/// Channel description: one shared alphabet with a uniform pmf, or explicit
/// per-user alphabets and pmfs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelSpec {
    Shared { gains: Vec<f64> },
    Explicit(ChannelModel),
}

fn default_bandwidth() -> f64 {
    1.0
}

/// Serializable form of [`SystemConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub num_users: usize,
    pub arrival_prob: PerUser,
    pub weight: PerUser,
    pub power_bound: PerUser,
    pub distortion_bound: PerUser,
    pub r_max: u32,
    pub channel: ChannelSpec,
    #[serde(default)]
    pub distortion: DistortionFunction,
    /// `B` in `g(x) = B log2(1 + x)`.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
}

impl SystemSpec {
    pub fn build(&self) -> Result<SystemConfig> {
        let m = self.num_users;
        let channel = match &self.channel {
            ChannelSpec::Shared { gains } => ChannelModel::uniform(m, gains),
            ChannelSpec::Explicit(c) => c.clone(),
        };
        if !(self.bandwidth > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        let cfg = SystemConfig {
            num_users: m,
            arrival_prob: self.arrival_prob.expand(m, "arrival_prob")?,
            weight: self.weight.expand(m, "weight")?,
            power_bound: self.power_bound.expand(m, "power_bound")?,
            distortion_bound: self.distortion_bound.expand(m, "distortion_bound")?,
            r_max: self.r_max,
            rate: RateModel::Shannon(ShannonRate { bandwidth: self.bandwidth }),
            distortion: self.distortion.clone(),
            channel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Short stable digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("system specs always serialize");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    PowerBound,
    DistortionBound,
    ArrivalProb,
    /// `w_1 = value`, the other users share `1 - value` equally.
    Weight,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::PowerBound => "power_bound",
            SweepVariable::DistortionBound => "distortion_bound",
            SweepVariable::ArrivalProb => "arrival_prob",
            SweepVariable::Weight => "weight",
        }
    }

    /// Copy of `base` with the variable set to `value` for every user.
    pub fn apply(self, base: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let mut cfg = base.clone();
        let m = cfg.num_users;
        match self {
            SweepVariable::PowerBound => cfg.power_bound = vec![value; m],
            SweepVariable::DistortionBound => cfg.distortion_bound = vec![value; m],
            SweepVariable::ArrivalProb => cfg.arrival_prob = vec![value; m],
            SweepVariable::Weight => {
                if m < 2 {
                    return Err(Error::Spec("a weight sweep needs at least two users".into()));
                }
                cfg.weight = vec![(1.0 - value) / (m - 1) as f64; m];
                cfg.weight[0] = value;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

/// Monte Carlo settings; `slots = 0` skips simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub slots: u64,
    pub paths: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec { slots: 500_000, paths: 10 }
    }
}

/// One `(distortion function, bound)` family of the single-user study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionCase {
    pub label: String,
    pub function: DistortionFunction,
    pub bounds: Vec<f64>,
}

/// Everything one experiment needs. Which fields matter depends on the
/// subcommand; unused ones may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub system: SystemSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    /// `(w_1, w_2)` pairs for region tracing.
    #[serde(default)]
    pub weight_pairs: Vec<[f64; 2]>,
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyKind>,
    #[serde(default = "default_modes")]
    pub modes: Vec<SolveMode>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub distortion_cases: Vec<DistortionCase>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_policies() -> Vec<PolicyKind> {
    vec![PolicyKind::Srp]
}

fn default_modes() -> Vec<SolveMode> {
    vec![SolveMode::NOMA_PA]
}

fn default_seed() -> u64 {
    1
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.system.build()?;
        self.solver.validate()?;
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(Error::Spec("sweep grid is empty".into()));
            }
        }
        for &[a, b] in &self.weight_pairs {
            if !(a >= 0.0 && b >= 0.0) || (a + b - 1.0).abs() > 1e-9 {
                return Err(Error::Spec(format!("weight pair ({a}, {b}) must be nonnegative and sum to 1")));
            }
        }
        if self.policies.is_empty() {
            return Err(Error::Spec("policy list is empty".into()));
        }
        if self.policies.contains(&PolicyKind::Srp) && self.modes.is_empty() {
            return Err(Error::Spec("the stationary policy needs at least one solve mode".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> Result<SystemConfig> {
        self.system.build()
    }
}
