//! Experiment configuration.
//!
//! A config is one TOML document. Every table and key is optional and falls
//! back to the defaults; unknown keys are rejected. Keys may be written as
//! tables or as flat dotted keys:
//!
//! ```toml
//! experiment.participants = 12
//! haptic_mpc.W = 100
//! scenario.noise_enabled = true
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::Thresholds;
use crate::controllers::{HapticMpcParams, RefMpcParams};
use crate::driver::{CohortDistributions, DriverProfile};
use crate::dynamics::VehicleParams;
use crate::sim::{Condition, NoiseModel, Scenario, SimConfig, Task};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    /// Output subdirectory name.
    pub name: String,
    /// Cohort seed; participant profiles and run RNGs derive from it.
    pub seed: u64,
    pub participants: usize,
    pub tasks: Vec<Task>,
    pub conditions: Vec<Condition>,
    /// Worker threads for cohort runs; 0 uses all cores.
    pub threads: usize,
    /// Output root, overridden by the environment and the command line.
    pub output_root: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 11,
            participants: 26,
            tasks: vec![Task::A, Task::B],
            conditions: vec![Condition::Baseline, Condition::Proposed],
            threads: 0,
            output_root: "out".into(),
        }
    }
}

/// Scenario parameters shared by both tasks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub lane_width: f64,
    pub curve_radius: f64,
    pub lane_offset: f64,
    pub lane_change_duration: f64,
    pub turn_signal_lead: f64,
    pub tor_time: f64,
    pub duration: f64,
    pub post_takeover: f64,
    pub noise_enabled: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let s = Scenario::default();
        Self {
            lane_width: s.lane_width,
            curve_radius: s.curve_radius,
            lane_offset: s.lane_offset,
            lane_change_duration: s.lane_change_duration,
            turn_signal_lead: s.turn_signal_lead,
            tor_time: s.tor_time,
            duration: s.duration,
            post_takeover: s.post_takeover,
            noise_enabled: s.noise_enabled,
        }
    }
}

impl ScenarioConfig {
    pub fn scenario(&self, task: Task) -> Scenario {
        Scenario {
            task,
            lane_width: self.lane_width,
            curve_radius: self.curve_radius,
            lane_offset: self.lane_offset,
            lane_change_duration: self.lane_change_duration,
            turn_signal_lead: self.turn_signal_lead,
            tor_time: self.tor_time,
            duration: self.duration,
            post_takeover: self.post_takeover,
            noise_enabled: self.noise_enabled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    pub plant_dt: f64,
    pub control_dt: f64,
}

impl Default for Timing {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            plant_dt: s.plant_dt,
            control_dt: s.control_dt,
        }
    }
}

/// Per-participant replacements for sampled profile fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reaction_time_constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance_gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reaction_delay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_relaxed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_engaged: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_ramp_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention_recovery_delay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_gain: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_noise_sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_corr_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perception_delay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
}

impl ProfileOverride {
    pub fn apply(&self, p: &mut DriverProfile<f64>) {
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = self.$f { p.$f = v; } )*};
        }
        set!(
            reaction_time_constant,
            guidance_gain,
            reaction_delay,
            k_relaxed,
            k_engaged,
            k_ramp_time,
            attention_recovery_delay,
            baseline_gain,
            baseline_noise_sd,
            noise_corr_time,
            perception_delay,
            rng_seed
        );
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub scenario: ScenarioConfig,
    pub timing: Timing,
    pub vehicle: VehicleParams<f64>,
    pub thresholds: Thresholds<f64>,
    pub ref_mpc: RefMpcParams<f64>,
    pub haptic_mpc: HapticMpcParams<f64>,
    pub noise: NoiseModel,
    pub cohort: CohortDistributions,
    /// Keyed by 1-based participant id.
    pub participant: BTreeMap<String, ProfileOverride>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            vehicle: self.vehicle,
            thresholds: self.thresholds,
            ref_mpc: self.ref_mpc,
            haptic_mpc: self.haptic_mpc,
            noise: self.noise,
            plant_dt: self.timing.plant_dt,
            control_dt: self.timing.control_dt,
        }
    }

    pub fn scenario(&self, task: Task) -> Scenario {
        self.scenario.scenario(task)
    }

    /// Profile of participant `id` (1-based).
    pub fn profile(&self, id: usize) -> DriverProfile<f64> {
        let mut p = self.cohort.sample_one(id, self.experiment.seed);
        if let Some(o) = self.participant.get(&id.to_string()) {
            o.apply(&mut p);
        }
        p
    }

    pub fn participant_ids(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.experiment.participants
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = ConfigError::Invalid;
        let e = &self.experiment;
        if e.name.is_empty() || e.name.contains(['/', '\\']) || e.name == "." || e.name == ".." {
            return Err(bad("experiment.name must be a plain directory name".into()));
        }
        if e.participants == 0 {
            return Err(bad("experiment.participants must be at least 1".into()));
        }
        if e.tasks.is_empty() || e.conditions.is_empty() {
            return Err(bad(
                "experiment.tasks and experiment.conditions must not be empty".into(),
            ));
        }
        self.sim_config().validate().map_err(bad)?;
        for task in &e.tasks {
            self.scenario(*task).validate().map_err(bad)?;
        }
        self.cohort.validate().map_err(bad)?;
        for key in self.participant.keys() {
            match key.parse::<usize>() {
                Ok(id) if (1..=e.participants).contains(&id) => {}
                _ => {
                    return Err(bad(format!(
                        "participant.{key}: ids must be integers in 1..={}",
                        e.participants
                    )))
                }
            }
        }
        for id in self.participant_ids() {
            self.profile(id)
                .validate()
                .map_err(|m| bad(format!("participant {id}: {m}")))?;
        }
        Ok(())
    }
}
