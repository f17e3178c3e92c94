//! Run configuration. Files use Hz, seconds and nanoseconds; conversion to
//! angular units happens when the library configurations are built.

use std::path::{Path, PathBuf};

use qudit_core::characterize::{BayesConfig, CalibrationConfig, CollectionConfig, DetConfig};
use qudit_core::controlopt::{OptimizeConfig, DEFAULT_N_STEPS};
use qudit_core::qmodel::hz;
use qudit_core::validate::{AutoTuneConfig, TuneConfig};
use qudit_core::GroundTruth;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Hidden device description; the built-in reference device when absent.
    pub ground_truth_file: Option<PathBuf>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub calibration: CalibrationSettings,
    pub collection: CollectionSettings,
    pub characterization: CharacterizationSettings,
    pub optimization: OptimizationSettings,
    pub tuning: TuningSettings,
    pub validation: ValidationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ground_truth_file: None,
            seed: 0,
            output_dir: PathBuf::from("qudit-run"),
            calibration: CalibrationSettings::default(),
            collection: CollectionSettings::default(),
            characterization: CharacterizationSettings::default(),
            optimization: OptimizationSettings::default(),
            tuning: TuningSettings::default(),
            validation: ValidationSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    pub n_shots: usize,
    pub readout_shots: usize,
    pub max_iterations: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        Self {
            n_shots: c.n_shots,
            readout_shots: c.readout_shots,
            max_iterations: c.max_iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionSettings {
    pub n_shots: usize,
    pub ramsey_detuning_hz: f64,
    pub ramsey_step_ns: f64,
    pub ramsey_max_us: f64,
    pub t1_step_ns: f64,
    pub t1_max_us: [f64; 2],
}

impl Default for CollectionSettings {
    fn default() -> Self {
        Self {
            n_shots: 1000,
            ramsey_detuning_hz: 1e6,
            ramsey_step_ns: 20.0,
            ramsey_max_us: 5.0,
            t1_step_ns: 80.0,
            t1_max_us: [40.0, 20.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CharacterizationSettings {
    pub det_max_iter: usize,
    pub samples: usize,
    pub warmup: usize,
    pub chains: usize,
    pub prior_width_khz: f64,
    pub truncation_khz: f64,
}

impl Default for CharacterizationSettings {
    fn default() -> Self {
        Self {
            det_max_iter: DetConfig::default().max_iter,
            samples: 1000,
            warmup: 1000,
            chains: 4,
            prior_width_khz: 50.0,
            truncation_khz: 125.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationSettings {
    pub duration_ns: f64,
    pub n_steps: usize,
    pub max_iter: usize,
    pub amplitude_bound_mhz: f64,
    /// Posterior rule size as (ω01 nodes, ω12 nodes).
    pub nodes: (usize, usize),
    /// Iteration budget of the warm-started posterior optimization.
    pub posterior_max_iter: usize,
}

impl Default for OptimizationSettings {
    fn default() -> Self {
        Self {
            duration_ns: 256.0,
            n_steps: DEFAULT_N_STEPS,
            max_iter: 300,
            amplitude_bound_mhz: 6.0,
            nodes: (8, 16),
            posterior_max_iter: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSettings {
    /// Shots per grid point; `null` scores the exact populations.
    pub n_shots: Option<usize>,
    pub reps: usize,
}

impl Default for TuningSettings {
    fn default() -> Self {
        let t = TuneConfig::default();
        Self {
            n_shots: t.n_shots,
            reps: t.n_reps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSettings {
    pub reps: usize,
    /// Shots per repetition count; `null` uses the exact populations.
    pub n_shots: Option<usize>,
    pub fidelity_samples: usize,
    pub wall_clock_offset_hours: f64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self {
            reps: 50,
            n_shots: Some(1000),
            fidelity_samples: 10_000,
            wall_clock_offset_hours: 0.0,
        }
    }
}

impl RunConfig {
    /// Reads a configuration file. A relative ground-truth path is taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let (Some(gt), Some(dir)) = (&cfg.ground_truth_file, path.parent()) {
            if gt.is_relative() {
                cfg.ground_truth_file = Some(dir.join(gt));
            }
        }
        Ok(cfg)
    }

    pub fn ground_truth(&self) -> CliResult<GroundTruth> {
        match &self.ground_truth_file {
            None => Ok(GroundTruth::reference(self.seed)),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Config(format!("cannot read ground truth {}: {e}", path.display()))
                })?;
                GroundTruth::from_json(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
        }
    }

    /// Seed of one stage: the run seed salted with the stage name, so that
    /// re-running a single stage reproduces its pipeline output.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(stage.as_bytes())
            .finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            n_shots: self.calibration.n_shots,
            readout_shots: self.calibration.readout_shots,
            max_iterations: self.calibration.max_iterations,
            ..CalibrationConfig::default()
        }
    }

    pub fn collection_config(&self) -> CollectionConfig {
        let c = &self.collection;
        CollectionConfig {
            ramsey_detuning: hz(c.ramsey_detuning_hz),
            ramsey_step: c.ramsey_step_ns / 1e9,
            ramsey_max: c.ramsey_max_us / 1e6,
            t1_step: c.t1_step_ns / 1e9,
            t1_max: [c.t1_max_us[0] / 1e6, c.t1_max_us[1] / 1e6],
            n_shots: c.n_shots,
        }
    }

    pub fn det_config(&self) -> DetConfig {
        DetConfig {
            max_iter: self.characterization.det_max_iter,
            ..DetConfig::default()
        }
    }

    pub fn bayes_config(&self) -> BayesConfig {
        let c = &self.characterization;
        BayesConfig {
            prior_sd: hz(c.prior_width_khz * 1e3),
            truncation: hz(c.truncation_khz * 1e3),
            n_samples: c.samples,
            n_warmup: c.warmup,
            n_chains: c.chains,
            seed: self.stage_seed("characterize-bayes"),
            ..BayesConfig::default()
        }
    }

    pub fn optimize_config(&self, max_iter: usize) -> OptimizeConfig {
        OptimizeConfig {
            max_iter,
            amplitude_bound: hz(self.optimization.amplitude_bound_mhz * 1e6),
            ..OptimizeConfig::default()
        }
    }

    pub fn tune_config(&self) -> AutoTuneConfig {
        let mut cfg = AutoTuneConfig::default();
        cfg.tune.n_shots = self.tuning.n_shots;
        cfg.tune.n_reps = self.tuning.reps;
        if let Some(last) = cfg.stages.last_mut() {
            last.n_reps = self.tuning.reps;
        }
        cfg
    }

    pub fn validate(&self) -> CliResult<()> {
        let positive = [
            ("optimization.duration_ns", self.optimization.duration_ns),
            ("collection.ramsey_step_ns", self.collection.ramsey_step_ns),
            ("collection.t1_step_ns", self.collection.t1_step_ns),
            ("characterization.prior_width_khz", self.characterization.prior_width_khz),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(CliError::Config(format!("{name} must be positive, got {v}")));
        }
        let counts = [
            ("characterization.samples", self.characterization.samples),
            ("characterization.chains", self.characterization.chains),
            ("optimization.n_steps", self.optimization.n_steps),
            ("validation.reps", self.validation.reps),
            ("tuning.reps", self.tuning.reps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("{name} must be at least 1")));
        }
        if self.optimization.nodes.0 == 0 || self.optimization.nodes.1 == 0 {
            return Err(CliError::Config("optimization.nodes must be nonzero".into()));
        }
        Ok(())
    }
}

/// Parses `AxB` node counts such as `8x16`.
pub fn parse_nodes(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got `{s}`"))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| format!("invalid node count `{t}`"))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Parses a wall-clock offset such as `6h`, `90m` or `30s`; a bare number
/// is in hours.
pub fn parse_hours(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let (num, scale) = match s.char_indices().last() {
        Some((i, 'h')) => (&s[..i], 1.0),
        Some((i, 'm')) => (&s[..i], 1.0 / 60.0),
        Some((i, 's')) => (&s[..i], 1.0 / 3600.0),
        _ => (s, 1.0),
    };
    num.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .map(|v| v * scale)
        .ok_or_else(|| format!("invalid duration `{s}`"))
}
