//! Stage outputs on disk.
//!
//! Every JSON artifact is wrapped in an [`Artifact`] envelope that records
//! the SHA-256 of each input file it was computed from and of each side
//! file (CSV, pulse) written with it. Frequencies in files are in Hz.

use std::fs;
use std::path::{Path, PathBuf};

use qudit_core::characterize::DetCharResult;
use qudit_core::qmodel::{hz, to_hz};
use qudit_core::vdevice::{PiCalibration, ReadoutCalibration};
use qudit_core::{ExperimentData, ExperimentKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CALIBRATION: &str = "calibration.json";
pub const READOUT_TRAINING: &str = "readout_training.csv";
pub const DATASETS: &str = "datasets.json";
pub const CHARACTERIZATION_DET: &str = "characterization_det.json";
pub const CHARACTERIZATION_BAYES: &str = "characterization_bayes.json";
pub const POSTERIOR_CHAIN: &str = "posterior_chain.csv";
pub const TUNING: &str = "tuning.json";
pub const PULSE_TUNED: &str = "pulse_tuned.json";
pub const VALIDATION: &str = "validation.json";
pub const GATE_REPETITION: &str = "gate_repetition.csv";
pub const CHI: &str = "chi.json";
pub const FIDELITY: &str = "fidelity.json";
pub const REPORT: &str = "report.json";

pub fn optimization_name(mode: &str) -> String {
    format!("optimize_{mode}.json")
}

pub fn pulse_name(mode: &str) -> String {
    format!("pulse_{mode}.json")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub stage: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub result: T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The output directory of a run.
#[derive(Clone, Debug)]
pub struct Store {
    dir: PathBuf,
}

impl Store {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).is_file()
    }

    /// Files currently in the output directory, sorted.
    pub fn listing(&self) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect())
            .unwrap_or_default();
        files.sort();
        files
    }

    /// Reads an input file, returning its bytes and provenance record.
    /// Missing inputs are configuration errors: an earlier stage has not run.
    pub fn read_bytes(&self, path: &Path) -> CliResult<(Vec<u8>, FileHash)> {
        let bytes = fs::read(path).map_err(|e| {
            CliError::Config(format!("missing input {}: {e}", path.display()))
        })?;
        let hash = FileHash {
            path: self.display_name(path),
            sha256: sha256_hex(&bytes),
        };
        Ok((bytes, hash))
    }

    pub fn read_json<T: DeserializeOwned>(&self, path: &Path) -> CliResult<(T, FileHash)> {
        let (bytes, hash) = self.read_bytes(path)?;
        let value = serde_json::from_slice(&bytes)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((value, hash))
    }

    /// Reads the result of a stage artifact in the output directory.
    pub fn read_result<T: DeserializeOwned>(&self, name: &str) -> CliResult<(T, FileHash)> {
        let (artifact, hash): (Artifact<T>, _) = self.read_json(&self.path(name))?;
        Ok((artifact.result, hash))
    }

    pub fn write_bytes(&self, name: &str, bytes: &[u8]) -> CliResult<FileHash> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| CliError::Stage {
            stage: "write",
            message: format!("{}: {e}", path.display()),
            artifacts: Vec::new(),
        })?;
        Ok(FileHash {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<FileHash> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::stage("write", e))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_artifact<T: Serialize>(
        &self,
        name: &str,
        stage: &str,
        seed: u64,
        inputs: Vec<FileHash>,
        outputs: Vec<FileHash>,
        result: T,
    ) -> CliResult<FileHash> {
        let artifact = Artifact {
            stage: stage.to_string(),
            seed,
            inputs,
            outputs,
            result,
        };
        self.write_json(name, &artifact)
    }

    /// File name relative to the output directory when inside it.
    fn display_name(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }
}

// --- file formats -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiPulseFile {
    pub freq_hz: f64,
    /// Commanded Rabi amplitude divided by 2π.
    pub amplitude_hz: f64,
    pub duration_ns: f64,
}

impl From<&PiCalibration> for PiPulseFile {
    fn from(c: &PiCalibration) -> Self {
        Self {
            freq_hz: to_hz(c.freq),
            amplitude_hz: to_hz(c.amplitude),
            duration_ns: c.duration * 1e9,
        }
    }
}

impl From<&PiPulseFile> for PiCalibration {
    fn from(f: &PiPulseFile) -> Self {
        Self {
            freq: hz(f.freq_hz),
            amplitude: hz(f.amplitude_hz),
            duration: f.duration_ns / 1e9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub pi_pulses: [PiPulseFile; 2],
    pub iterations: [usize; 2],
    /// Readout classifier and the confusion matrix c[i][j] = P(i | j).
    pub readout: ReadoutCalibration,
    pub confusion: Vec<Vec<f64>>,
}

/// One experiment. `grid` is in seconds for delay sweeps and in Hz for
/// frequency sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub kind: ExperimentKind,
    pub level: usize,
    pub drive_freq_hz: f64,
    pub n_shots: usize,
    pub grid: Vec<f64>,
    pub pops: Vec<Vec<f64>>,
    pub pops_clamped: Vec<Vec<f64>>,
}

impl DatasetFile {
    /// Name stem such as `ramsey_12` or `t1_2`. Ramsey and echo
    /// experiments are labeled by the lower level of their transition, T1
    /// experiments by the decaying level.
    pub fn stem(&self) -> String {
        match self.kind {
            ExperimentKind::Ramsey => format!("ramsey_{}{}", self.level, self.level + 1),
            ExperimentKind::T1 => format!("t1_{}", self.level),
            ExperimentKind::Echo => format!("echo_{}{}", self.level, self.level + 1),
            ExperimentKind::FreqSweep => format!("freq_sweep_{}", self.level),
            ExperimentKind::AmpSweep => format!("amp_sweep_{}", self.level),
            ExperimentKind::GateRep => format!("gate_rep_{}", self.level),
        }
    }
}

fn grid_scale(kind: ExperimentKind) -> f64 {
    if kind == ExperimentKind::FreqSweep {
        hz(1.0)
    } else {
        1.0
    }
}

impl From<&ExperimentData> for DatasetFile {
    fn from(d: &ExperimentData) -> Self {
        let s = grid_scale(d.kind);
        Self {
            kind: d.kind,
            level: d.level,
            drive_freq_hz: to_hz(d.drive_freq),
            n_shots: d.n_shots,
            grid: d.grid.iter().map(|x| x / s).collect(),
            pops: d.pops.clone(),
            pops_clamped: d.pops_clamped.clone(),
        }
    }
}

impl From<&DatasetFile> for ExperimentData {
    fn from(f: &DatasetFile) -> Self {
        let s = grid_scale(f.kind);
        Self {
            kind: f.kind,
            level: f.level,
            grid: f.grid.iter().map(|x| x * s).collect(),
            pops: f.pops.clone(),
            pops_clamped: f.pops_clamped.clone(),
            n_shots: f.n_shots,
            drive_freq: hz(f.drive_freq_hz),
            raw_iq: None,
        }
    }
}

/// Deterministic characterization: (ω01, ω⁺12, ω⁻12) in Hz and the decay
/// and dephasing rates (γ1,1, γ1,2, γ2,1, γ2,2) in 1/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetFile {
    pub frequencies_hz: [f64; 3],
    pub rates_per_s: [f64; 4],
    pub t1_s: [f64; 2],
    pub t2_s: [f64; 2],
    pub bounds: BoundsFile,
    pub objective_value: f64,
    pub initial_objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub message: String,
}

/// Box for the deterministic fit, as read from `--bounds-file`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsFile {
    pub frequencies_hz: [[f64; 2]; 3],
    #[serde(default)]
    pub rates_per_s: Option<[[f64; 2]; 4]>,
}

impl BoundsFile {
    pub fn from_bounds(b: &[(f64, f64)]) -> Self {
        Self {
            frequencies_hz: std::array::from_fn(|i| [to_hz(b[i].0), to_hz(b[i].1)]),
            rates_per_s: Some(std::array::from_fn(|i| [b[3 + i].0, b[3 + i].1])),
        }
    }

    /// Overrides `bounds` with the entries given in this file.
    pub fn apply(&self, bounds: &mut [(f64, f64)]) -> CliResult<()> {
        let check = |lo: f64, hi: f64| {
            if lo.is_finite() && hi.is_finite() && lo < hi {
                Ok((lo, hi))
            } else {
                Err(CliError::Config(format!("invalid bound [{lo}, {hi}]")))
            }
        };
        for (i, [lo, hi]) in self.frequencies_hz.iter().enumerate() {
            bounds[i] = check(hz(*lo), hz(*hi))?;
        }
        if let Some(rates) = &self.rates_per_s {
            for (i, [lo, hi]) in rates.iter().enumerate() {
                bounds[3 + i] = check(*lo, *hi)?;
            }
        }
        Ok(())
    }
}

impl From<&DetCharResult> for DetFile {
    fn from(r: &DetCharResult) -> Self {
        Self {
            frequencies_hz: std::array::from_fn(|i| to_hz(r.y[i])),
            rates_per_s: std::array::from_fn(|i| r.y[3 + i]),
            t1_s: r.t1(),
            t2_s: r.t2(),
            bounds: BoundsFile::from_bounds(&r.bounds),
            objective_value: r.objective_value,
            initial_objective: r.initial_objective,
            converged: r.converged,
            iterations: r.iterations,
            evaluations: r.evaluations,
            message: r.message.clone(),
        }
    }
}

impl DetFile {
    pub fn to_result(&self) -> CliResult<DetCharResult> {
        let mut bounds = vec![(0.0, 0.0); 7];
        self.bounds.apply(&mut bounds)?;
        let mut y: Vec<f64> = self.frequencies_hz.iter().map(|f| hz(*f)).collect();
        y.extend(self.rates_per_s);
        Ok(DetCharResult {
            y,
            bounds,
            objective_value: self.objective_value,
            initial_objective: self.initial_objective,
            converged: self.converged,
            iterations: self.iterations,
            evaluations: self.evaluations,
            message: self.message.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesFile {
    pub parameters: Vec<String>,
    /// Frequencies in Hz; the noise levels σ in population units.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub rhat: Vec<f64>,
    pub acceptance_rate: f64,
    pub prior_mean_hz: [f64; 3],
    pub prior_width_hz: f64,
    pub n_chains: usize,
    pub samples_per_chain: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub j1: f64,
    pub j2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationFile {
    pub gate: String,
    pub mode: String,
    pub nodes: usize,
    pub duration_ns: f64,
    pub n_steps: usize,
    pub warm_start: Option<String>,
    pub j1: f64,
    pub j2: f64,
    pub fidelity: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub flagged: bool,
    pub message: String,
    pub trace: Vec<TraceRow>,
    /// Model the control was optimized for (Hz, seconds).
    pub model: qudit_core::qmodel::DeviceParamsFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningFile {
    pub source_pulse: String,
    pub r_c: f64,
    pub a_c: f64,
    /// |2⟩ population after the final stage's repetitions.
    pub population: f64,
    pub reps: usize,
    pub per_r: Vec<qudit_core::validate::TunePoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationFile {
    pub pulse: String,
    pub reps: usize,
    pub n_shots: Option<usize>,
    pub wall_clock_offset_hours: f64,
    /// |2⟩ population after one gate from |0⟩.
    pub p2_after_one: f64,
    /// |0⟩ population after one gate from |2⟩.
    pub p0_after_one_from_2: f64,
    pub tomography: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiFile {
    /// Operator basis index order as used by the fit.
    pub basis_size: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityFile {
    pub gate: f64,
    pub gate_stderr: f64,
    pub entanglement: f64,
    pub entanglement_stderr: f64,
    pub n_samples: usize,
    pub fit_sse: f64,
    pub completion_residual: f64,
    pub penalty_stages: usize,
    pub converged: bool,
}
