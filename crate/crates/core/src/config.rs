//! Run configuration, read from a single TOML document.
//!
//! Every field has a default, so an empty file is a valid config. The
//! resolved config (defaults expanded) is echoed into every report.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{HardwareProfile, SpikeRule};
use crate::ir::{CalibrationSet, ModuleTag};
use crate::metrics::{ComfortThresholds, DeParams, EnergySign, PenaltyTable, WeightsMode};
use crate::quant::{QuantScheme, LONG_SEQUENCE_THRESHOLD};
use crate::sim::{LatencySource, PolicyParams, RtsConfig, SuiteParams, VehicleParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {reason}")]
    Read { path: String, reason: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// The model variant under evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// The source graph, unchanged.
    #[default]
    Baseline,
    /// The source graph with the given modules removed.
    Pruned(BTreeSet<ModuleTag>),
    /// The default optimization pipeline.
    HardwareOpt,
    /// The default pipeline followed by int8 quantization.
    Quant(QuantScheme),
    /// The default pipeline throttled to at most the given frame rate.
    FpsCap(f64),
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Baseline => write!(f, "baseline"),
            Scheme::Pruned(tags) => {
                let names: Vec<String> = tags.iter().map(ToString::to_string).collect();
                write!(f, "pruned({})", names.join("+"))
            }
            Scheme::HardwareOpt => write!(f, "hardware_opt"),
            Scheme::Quant(q) => write!(f, "quant({q:?})"),
            Scheme::FpsCap(fps) => write!(f, "fps_cap({fps})"),
        }
    }
}

/// Simulator settings; the latency source is derived per route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub dt: f64,
    pub vehicle: VehicleParams,
    pub trigger_range_m: f64,
    pub sensor_range_m: f64,
    pub completion_tolerance_m: f64,
    /// Replaces the graph-derived latency with a constant.
    pub fixed_latency_s: Option<f64>,
}

impl Default for SimSettings {
    fn default() -> Self {
        let r = RtsConfig::default();
        Self {
            dt: r.dt,
            vehicle: r.vehicle,
            trigger_range_m: r.trigger_range_m,
            sensor_range_m: r.sensor_range_m,
            completion_tolerance_m: r.completion_tolerance_m,
            fixed_latency_s: None,
        }
    }
}

impl SimSettings {
    pub fn rts(&self, latency_source: LatencySource) -> RtsConfig {
        RtsConfig {
            dt: self.dt,
            latency_source,
            vehicle: self.vehicle.clone(),
            trigger_range_m: self.trigger_range_m,
            sensor_range_m: self.sensor_range_m,
            completion_tolerance_m: self.completion_tolerance_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergySettings {
    /// Frames per averaging window.
    pub window: usize,
    pub warmup_s: f64,
}

impl Default for EnergySettings {
    fn default() -> Self {
        Self {
            window: 100,
            warmup_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSettings {
    /// Attention products with a longer sequence stay in float.
    pub long_sequence_threshold: usize,
    /// Frames drawn when no calibration file is configured.
    pub calibration_frames: usize,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            long_sequence_threshold: LONG_SEQUENCE_THRESHOLD,
            calibration_frames: CalibrationSet::DEFAULT_FRAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Source graph; the built-in uniad-like model when absent.
    pub graph_path: Option<PathBuf>,
    /// Scenario file or directory; a generated suite when absent.
    pub scenario_suite_path: Option<PathBuf>,
    pub calibration_path: Option<PathBuf>,
    pub scheme: Scheme,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub emit_pass_report: bool,
    pub hardware: HardwareProfile,
    pub spike_rules: Vec<SpikeRule>,
    pub penalties: PenaltyTable,
    pub thresholds: ComfortThresholds,
    pub weights: WeightsMode,
    pub energy_sign: EnergySign,
    pub sim: SimSettings,
    pub policy: PolicyParams,
    pub suite: SuiteParams,
    pub energy: EnergySettings,
    pub quant: QuantSettings,
    pub de: DeParams,
    /// Frames per comfort window.
    pub dc_segment_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            graph_path: None,
            scenario_suite_path: None,
            calibration_path: None,
            scheme: Scheme::Baseline,
            seed: 0,
            output_dir: PathBuf::from("out"),
            emit_pass_report: false,
            hardware: HardwareProfile::default(),
            spike_rules: Vec::new(),
            penalties: PenaltyTable::default(),
            thresholds: ComfortThresholds::default(),
            weights: WeightsMode::Critic,
            energy_sign: EnergySign::Negative,
            sim: SimSettings::default(),
            policy: PolicyParams::default(),
            suite: SuiteParams::default(),
            energy: EnergySettings::default(),
            quant: QuantSettings::default(),
            de: DeParams::default(),
            dc_segment_len: 20,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes relative artifact paths relative to `base`.
    pub fn resolve_relative_to(&mut self, base: &Path) {
        for p in [
            &mut self.graph_path,
            &mut self.scenario_suite_path,
            &mut self.calibration_path,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Scheme::FpsCap(fps) = self.scheme {
            if !(fps.is_finite() && fps > 0.0) {
                return invalid(format!("fps_cap target must be positive, got {fps}"));
            }
        }
        self.hardware
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.penalties
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.thresholds
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let WeightsMode::Fixed(w) = &self.weights {
            w.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        let latency = self
            .sim
            .fixed_latency_s
            .map_or(LatencySource::Fixed(self.sim.dt), LatencySource::Fixed);
        self.sim
            .rts(latency)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.energy.window == 0 || !(self.energy.warmup_s >= 0.0) {
            return invalid("energy window must be positive and warm-up non-negative".into());
        }
        if self.quant.calibration_frames == 0 {
            return invalid("calibration_frames must be positive".into());
        }
        if self.dc_segment_len == 0 || self.de.checkpoints == 0 {
            return invalid("dc_segment_len and de.checkpoints must be positive".into());
        }
        if self.suite.count == 0 || !(self.suite.route_length_m >= 20.0) {
            return invalid("suite needs at least one route of 20 m or more".into());
        }
        Ok(())
    }
}
