//! The run configuration file: one TOML document describing the platoon,
//! data collection, controller tuning and scenario, validated as a whole
//! before anything runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{ControllerParams, PastOutputHandling};
use crate::data::{minimum_data_length, CollectionSpec};
use crate::error::{Error, Result};
use crate::scenario::{brake_scenario, eudc_like_scenario, BrakeShape, EudcShape, FuelCoefficients, Scenario};
use crate::vehicle::{OvmParams, PlatoonConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub platoon: PlatoonSection,
    pub collection: CollectionSection,
    pub controller: ControllerSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub fuel: FuelSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatoonSection {
    pub n: usize,
    pub cav_set: Vec<usize>,
    pub dt_control: f64,
    pub dt_sim: f64,
    pub noise_amplitude: f64,
    #[serde(default = "default_cav_eq_spacing")]
    pub cav_eq_spacing: f64,
    #[serde(default = "OvmParams::nominal")]
    pub ovm: OvmParams,
    #[serde(default)]
    pub heterogeneity: HeterogeneitySection,
}

fn default_cav_eq_spacing() -> f64 {
    20.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneitySection {
    pub enabled: bool,
    pub spread: f64,
    pub seed: u64,
}

impl Default for HeterogeneitySection {
    fn default() -> Self {
        HeterogeneitySection {
            enabled: true,
            spread: 0.2,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionSection {
    pub samples: usize,
    pub excitation: f64,
    pub v_star: f64,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub hdv_noise: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub tini: usize,
    pub horizon: usize,
    pub weight_velocity: f64,
    pub weight_spacing: f64,
    pub weight_input: f64,
    pub lambda_g: f64,
    pub lambda_y: f64,
    pub spacing_error_min: f64,
    pub spacing_error_max: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    #[serde(default = "default_qp_max_iter")]
    pub qp_max_iter: usize,
    #[serde(default)]
    pub qp_polish: bool,
}

fn default_qp_tol() -> f64 {
    1e-6
}

fn default_qp_max_iter() -> usize {
    20_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// "eudc" or "brake".
    pub profile: String,
    pub seed: u64,
    #[serde(default)]
    pub eudc: Option<EudcShape>,
    #[serde(default)]
    pub brake: Option<BrakeShape>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuelSection {
    #[serde(default)]
    pub coefficients: Option<FuelCoefficients>,
    /// Vehicle indices scored by the fuel metric; defaults to 3..=n.
    #[serde(default)]
    pub vehicles: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Cross-section consistency checks; run before any side effect.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let platoon = self.platoon_config()?;
        platoon.validate()?;
        if platoon.m() == 0 {
            return Err(Error::InvalidConfig(
                "cav_set must name at least one CAV".into(),
            ));
        }
        self.controller_params().validate(self.platoon.n)?;

        let min_t = minimum_data_length(
            platoon.m(),
            self.controller.tini,
            self.controller.horizon,
            self.platoon.n,
        );
        if self.collection.samples < min_t {
            return Err(Error::InvalidConfig(format!(
                "collection.samples = {} is below the persistent-excitation bound {min_t} \
                 for (m, tini, horizon, n) = ({}, {}, {}, {})",
                self.collection.samples,
                platoon.m(),
                self.controller.tini,
                self.controller.horizon,
                self.platoon.n
            )));
        }
        if self.collection.samples < self.controller.tini + self.controller.horizon {
            return Err(Error::InvalidConfig(
                "collection shorter than tini + horizon".into(),
            ));
        }
        if self.collection.v_star <= 0.0 || self.collection.v_star >= self.platoon.ovm.v_max {
            return Err(Error::InvalidConfig(format!(
                "collection.v_star = {} outside (0, v_max)",
                self.collection.v_star
            )));
        }
        match self.scenario.profile.as_str() {
            "eudc" | "brake" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scenario profile '{other}' (expected 'eudc' or 'brake')"
                )))
            }
        }
        self.scenario_def()?;
        if let Some(vehicles) = &self.fuel.vehicles {
            for &v in vehicles {
                if v == 0 || v > self.platoon.n {
                    return Err(Error::InvalidConfig(format!(
                        "fuel scoring vehicle {v} outside 1..={}",
                        self.platoon.n
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn platoon_config(&self) -> Result<PlatoonConfig> {
        let p = &self.platoon;
        let mut cfg = if p.heterogeneity.enabled {
            PlatoonConfig::heterogeneous(
                p.n,
                p.cav_set.clone(),
                p.ovm,
                p.heterogeneity.spread,
                p.heterogeneity.seed,
                p.dt_control,
                p.dt_sim,
                p.noise_amplitude,
            )?
        } else {
            PlatoonConfig::uniform(
                p.n,
                p.cav_set.clone(),
                p.ovm,
                p.dt_control,
                p.dt_sim,
                p.noise_amplitude,
            )?
        };
        cfg.cav_eq_spacing = p.cav_eq_spacing;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn collection_spec(&self) -> CollectionSpec {
        CollectionSpec {
            v_star: self.collection.v_star,
            samples: self.collection.samples,
            excitation: self.collection.excitation,
            seed: self.collection.seed,
            hdv_noise: self.collection.hdv_noise,
            tini: self.controller.tini,
            horizon: self.controller.horizon,
        }
    }

    pub fn controller_params(&self) -> ControllerParams {
        let c = &self.controller;
        ControllerParams {
            tini: c.tini,
            horizon: c.horizon,
            weight_velocity: c.weight_velocity,
            weight_spacing: c.weight_spacing,
            weight_input: c.weight_input,
            lambda_g: c.lambda_g,
            lambda_y: c.lambda_y,
            spacing_error_min: c.spacing_error_min,
            spacing_error_max: c.spacing_error_max,
            accel_min: c.accel_min,
            accel_max: c.accel_max,
            qp_tol: c.qp_tol,
            qp_max_iter: c.qp_max_iter,
            qp_polish: c.qp_polish,
            past_output: PastOutputHandling::Slack,
        }
    }

    pub fn scenario_def(&self) -> Result<Scenario> {
        match self.scenario.profile.as_str() {
            "eudc" => eudc_like_scenario(&self.scenario.eudc.unwrap_or_default()),
            "brake" => brake_scenario(&self.scenario.brake.unwrap_or_default()),
            other => Err(Error::InvalidConfig(format!("unknown profile '{other}'"))),
        }
    }

    pub fn fuel_coefficients(&self) -> FuelCoefficients {
        self.fuel.coefficients.unwrap_or_default()
    }

    pub fn fuel_vehicles(&self) -> Vec<usize> {
        self.fuel
            .vehicles
            .clone()
            .unwrap_or_else(|| crate::scenario::default_scoring_vehicles(self.platoon.n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
schema_version = 1

[platoon]
n = 8
cav_set = [3, 6]
dt_control = 0.05
dt_sim = 0.01
noise_amplitude = 0.1

[platoon.heterogeneity]
enabled = true
spread = 0.2
seed = 42

[collection]
samples = 600
excitation = 1.0
v_star = 15.0
seed = 7

[controller]
tini = 20
horizon = 50
weight_velocity = 1.0
weight_spacing = 0.5
weight_input = 0.1
lambda_g = 100.0
lambda_y = 10000.0
spacing_error_min = -15.0
spacing_error_max = 20.0
accel_min = -5.0
accel_max = 2.0

[scenario]
profile = "brake"
seed = 1

[output]
dir = "runs/demo"
"#;

    #[test]
    fn sample_config_parses_and_validates() {
        let cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.validate().unwrap();
        let platoon = cfg.platoon_config().unwrap();
        assert_eq!(platoon.m(), 2);
        assert_eq!(cfg.fuel_vehicles(), vec![3, 4, 5, 6, 7, 8]);
        let params = cfg.controller_params();
        assert_eq!(params.tini, 20);
        assert_eq!(params.horizon, 50);
    }

    #[test]
    fn short_collection_is_rejected_with_the_bound() {
        let mut cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.collection.samples = 200;
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("persistent-excitation bound"), "{msg}");
        // (m + 1)(tini + horizon + 2n) - 1 = 3 * 86 - 1.
        assert!(msg.contains("257"), "{msg}");
    }

    #[test]
    fn unknown_profile_is_rejected() {
        let mut cfg: RunConfig = toml::from_str(SAMPLE).unwrap();
        cfg.scenario.profile = "city".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SAMPLE.replace("[output]", "[outputs]");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
    }
}
