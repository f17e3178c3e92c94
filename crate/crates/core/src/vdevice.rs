//! Virtual qudit testbed.
//!
//! A [`VirtualDevice`] owns hidden ground-truth parameters and plays pulse
//! schedules against them: every pulse passes through the transmission line
//! (a per-carrier gain), the four-level Lindblad model is solved for both
//! charge parities, and each shot draws its own parity, collapses to a level
//! and lands as an I-Q point in that level's readout cluster. Shots are then
//! classified with the trained mixture model and mitigated with the inverse
//! confusion matrix, exactly as an experimenter would process them.
//!
//! Solving once per parity and sampling shots from the two population
//! vectors is distributionally identical to a per-shot solve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::classify::{
    estimate_confusion, mitigate, train_gmm, ConfusionMatrix, GmmModel, IqPoint,
};
use crate::dynamics::{populations, DensityMatrix, LindbladModel};
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::pulses::{constant_pulse, Pulse};
use crate::qmodel::{hz, to_hz, DeviceParams, Parity};
use crate::sequence::{Schedule, ScheduleSimulator, Step};

/// Duration of the calibrated π pulses (π/2 pulses use half of it).
pub const PI_DURATION: f64 = 152e-9;
/// Number of back-to-back pulses in an amplitude-sweep point.
pub const AMP_SWEEP_REPS: usize = 5;
/// Carriers are matched to a configured gain within this distance (rad/s).
pub const GAIN_MATCH_WINDOW: f64 = 2.0 * std::f64::consts::PI * 50e6;
/// Readout clusters distinguishable by the classifier; level 3 reads as 2.
pub const READOUT_STATES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutCluster {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl ReadoutCluster {
    pub fn isotropic(mean: [f64; 2], sigma: f64) -> Self {
        Self {
            mean,
            cov: [[sigma * sigma, 0.0], [0.0, sigma * sigma]],
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> IqPoint {
        let [[a, b], [_, d]] = self.cov;
        let l11 = a.sqrt();
        let l21 = b / l11;
        let l22 = (d - l21 * l21).max(0.0).sqrt();
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        [self.mean[0] + l11 * z1, self.mean[1] + l21 * z1 + l22 * z2]
    }

    fn spread(&self) -> f64 {
        0.5 * (self.cov[0][0] + self.cov[1][1])
    }
}

/// Multiplicative gain of the transmission line near one lab frequency,
/// optionally drifting linearly with wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransmissionGain {
    pub freq_hz: f64,
    pub gain: f64,
    #[serde(default)]
    pub drift_per_hour: f64,
}

impl TransmissionGain {
    pub fn at(&self, hours: f64) -> f64 {
        self.gain * (1.0 + self.drift_per_hour * hours)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub params: DeviceParams,
    pub readout_clusters: Vec<ReadoutCluster>,
    pub transmission_gain: Vec<TransmissionGain>,
    pub rng_seed: u64,
}

impl GroundTruth {
    /// The reference transmon with default readout geometry and a
    /// transmission line that attenuates the 1-2 carrier relative to 0-1.
    pub fn reference(seed: u64) -> Self {
        let params = DeviceParams::reference();
        Self {
            transmission_gain: vec![
                TransmissionGain {
                    freq_hz: to_hz(params.omega01),
                    gain: 1.0,
                    drift_per_hour: 0.0,
                },
                TransmissionGain {
                    freq_hz: to_hz(params.omega12_bar),
                    gain: 1.0 / 0.626,
                    drift_per_hour: -0.005,
                },
            ],
            params,
            readout_clusters: default_clusters(),
            rng_seed: seed,
        }
    }

    /// Replaces the gains (in the order 0-1, 1-2) keeping frequencies.
    pub fn with_gains(mut self, gains: &[f64]) -> Self {
        for (entry, &g) in self.transmission_gain.iter_mut().zip(gains) {
            entry.gain = g;
        }
        self
    }

    pub fn with_params(mut self, params: DeviceParams) -> Self {
        self.params = params;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.readout_clusters.len() != READOUT_STATES {
            return Err(Error::Dimension {
                expected: READOUT_STATES,
                found: self.readout_clusters.len(),
            });
        }
        for c in &self.readout_clusters {
            let [[a, b], [b2, d]] = c.cov;
            if !(a > 0.0 && d > 0.0 && a * d - b * b2 > 0.0 && b == b2) {
                return Err(Error::Config(
                    "readout covariance must be symmetric positive definite".into(),
                ));
            }
        }
        for i in 0..READOUT_STATES {
            for j in 0..i {
                let (ci, cj) = (&self.readout_clusters[i], &self.readout_clusters[j]);
                let dist =
                    ((ci.mean[0] - cj.mean[0]).powi(2) + (ci.mean[1] - cj.mean[1]).powi(2)).sqrt();
                let pooled = (0.5 * (ci.spread() + cj.spread())).sqrt();
                if dist < 3.0 * pooled {
                    return Err(Error::Config(format!(
                        "readout clusters {j} and {i} overlap"
                    )));
                }
            }
        }
        for g in &self.transmission_gain {
            if !(g.gain > 0.0 && g.gain <= 2.0) {
                return Err(Error::OutOfRange {
                    what: "transmission gain",
                    value: g.gain,
                });
            }
        }
        Ok(())
    }

    /// Gain seen by a tone at lab frequency `freq` (rad/s) after `hours`.
    pub fn gain_at(&self, freq: f64, hours: f64) -> Result<f64> {
        self.transmission_gain
            .iter()
            .map(|g| (g, (hz(g.freq_hz) - freq).abs()))
            .filter(|(_, d)| *d <= GAIN_MATCH_WINDOW)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(g, _)| g.at(hours))
            .ok_or(Error::MissingGain(to_hz(freq)))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let gt: GroundTruth = serde_json::from_str(text)?;
        gt.validate()?;
        Ok(gt)
    }
}

/// Isotropic clusters with widths 1, 1.3 and 1.7 on an uneven triangle,
/// giving a confusion diagonal near (0.99, 0.97, 0.97).
pub fn default_clusters() -> Vec<ReadoutCluster> {
    vec![
        ReadoutCluster::isotropic([0.0, 0.0], 1.0),
        ReadoutCluster::isotropic([6.8, 0.0], 1.3),
        ReadoutCluster::isotropic([3.8, 5.6], 1.7),
    ]
}

/// Scales every carrier of `pulse` by the gain at its lab frequency.
pub fn apply_transmission(gt: &GroundTruth, pulse: &Pulse) -> Result<Pulse> {
    apply_transmission_at(gt, pulse, 0.0)
}

/// As [`apply_transmission`], with gains evaluated `hours` after tuning.
pub fn apply_transmission_at(gt: &GroundTruth, pulse: &Pulse, hours: f64) -> Result<Pulse> {
    let gains = pulse
        .carriers
        .iter()
        .map(|&omega| gt.gain_at(pulse.drive_freq + omega, hours))
        .collect::<Result<Vec<f64>>>()?;
    pulse.scale_carriers(&gains)
}

/// Draws `n_shots` readout points from ρ: a level from its populations, then
/// a point from that level's cluster.
pub fn measure_shots<R: Rng>(
    gt: &GroundTruth,
    rho: &DensityMatrix,
    n_shots: usize,
    rng: &mut R,
) -> Vec<IqPoint> {
    let pops = populations(rho);
    (0..n_shots).map(|_| shot(gt, &pops, rng)).collect()
}

fn draw_level<R: Rng>(pops: &[f64], rng: &mut R) -> usize {
    let total: f64 = pops.iter().map(|p| p.max(0.0)).sum();
    let mut u = rng.random::<f64>() * total;
    for (k, p) in pops.iter().enumerate() {
        u -= p.max(0.0);
        if u < 0.0 {
            return k;
        }
    }
    pops.len() - 1
}

fn shot<R: Rng>(gt: &GroundTruth, pops: &[f64], rng: &mut R) -> IqPoint {
    let level = draw_level(pops, rng).min(READOUT_STATES - 1);
    gt.readout_clusters[level].sample(rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    T1,
    Ramsey,
    Echo,
    FreqSweep,
    AmpSweep,
    GateRep,
}

impl ExperimentKind {
    /// Column name of the swept variable in CSV output.
    pub fn grid_label(self) -> &'static str {
        match self {
            ExperimentKind::T1 | ExperimentKind::Ramsey | ExperimentKind::Echo => "delay_s",
            ExperimentKind::FreqSweep => "drive_freq_hz",
            ExperimentKind::AmpSweep => "amplitude_rad_s",
            ExperimentKind::GateRep => "repetitions",
        }
    }
}

/// Processed outcome of one experiment.
///
/// `grid` holds the swept variable: delays (s), drive frequencies (rad/s),
/// commanded amplitudes (rad/s) or repetition counts. `pops` are the
/// mitigated populations before clamping; they sum to one exactly but can
/// leave [0, 1] under shot noise. `pops_clamped` is the display version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentData {
    pub kind: ExperimentKind,
    pub level: usize,
    pub grid: Vec<f64>,
    pub pops: Vec<Vec<f64>>,
    pub pops_clamped: Vec<Vec<f64>>,
    pub n_shots: usize,
    /// Drive frequency of the characterized transition (rad/s).
    pub drive_freq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_iq: Option<Vec<Vec<IqPoint>>>,
}

impl ExperimentData {
    /// Population of `state` along the grid.
    pub fn series(&self, state: usize) -> Vec<f64> {
        self.pops.iter().map(|row| row[state]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},p0,p1,p2,n_shots\n", self.kind.grid_label());
        for (x, row) in self.grid.iter().zip(&self.pops) {
            let x = if self.kind == ExperimentKind::FreqSweep {
                to_hz(*x)
            } else {
                *x
            };
            let _ = writeln!(
                out,
                "{x:e},{:.6},{:.6},{:.6},{}",
                row[0], row[1], row[2], self.n_shots
            );
        }
        out
    }

    /// Shot-level readout points, one row per shot.
    pub fn iq_csv(&self) -> Option<String> {
        let shots = self.raw_iq.as_ref()?;
        let mut out = String::from("point,shot,i,q\n");
        for (p, list) in shots.iter().enumerate() {
            for (s, q) in list.iter().enumerate() {
                let _ = writeln!(out, "{p},{s},{:.6},{:.6}", q[0], q[1]);
            }
        }
        Some(out)
    }
}

/// The experimenter's current constant-envelope π pulse for one transition:
/// commanded amplitude (before the transmission line) and drive frequency.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiCalibration {
    pub freq: f64,
    pub amplitude: f64,
    pub duration: f64,
}

impl PiCalibration {
    pub fn pulse(&self, half: bool) -> Result<Pulse> {
        let d = if half {
            0.5 * self.duration
        } else {
            self.duration
        };
        constant_pulse(self.freq, C64::new(self.amplitude, 0.0), d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutCalibration {
    pub model: GmmModel,
    pub confusion: ConfusionMatrix,
    /// Training shots with their preparation labels.
    #[serde(skip)]
    pub training: Vec<(usize, IqPoint)>,
}

impl ReadoutCalibration {
    pub fn training_csv(&self) -> String {
        let mut out = String::from("shot,i,q,prepared_state\n");
        for (s, (label, q)) in self.training.iter().enumerate() {
            let _ = writeln!(out, "{s},{:.6},{:.6},{label}", q[0], q[1]);
        }
        out
    }
}

/// Offsets of the device's initial ("yesterday's") π calibration from the
/// truth: frequency (rad/s) and relative amplitude error.
const ROUGH_FREQ_OFFSET: [f64; 2] = [
    2.0 * std::f64::consts::PI * 120e3,
    -2.0 * std::f64::consts::PI * 180e3,
];
const ROUGH_AMP_FACTOR: [f64; 2] = [1.05, 0.96];

pub struct VirtualDevice {
    truth: GroundTruth,
    rng: ChaCha8Rng,
    models: [LindbladModel; 2],
    pi: [PiCalibration; 2],
    readout: Option<ReadoutCalibration>,
    wall_clock_hours: f64,
    keep_iq: bool,
}

impl VirtualDevice {
    pub fn new(truth: GroundTruth) -> Result<Self> {
        truth.validate()?;
        let p = &truth.params;
        let models = [
            LindbladModel::new(p, Parity::Plus)?,
            LindbladModel::new(p, Parity::Minus)?,
        ];
        let mut pi = [PiCalibration {
            freq: 0.0,
            amplitude: 0.0,
            duration: PI_DURATION,
        }; 2];
        for (k, freq) in [p.omega01, p.omega12_bar].into_iter().enumerate() {
            let gain = truth.gain_at(freq, 0.0)?;
            let ideal = crate::pulses::pi_amplitude(k, PI_DURATION) / gain;
            pi[k] = PiCalibration {
                freq: freq + ROUGH_FREQ_OFFSET[k],
                amplitude: ideal * ROUGH_AMP_FACTOR[k],
                duration: PI_DURATION,
            };
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(truth.rng_seed),
            truth,
            models,
            pi,
            readout: None,
            wall_clock_hours: 0.0,
            keep_iq: false,
        })
    }

    /// Hidden parameters; only tests and `--reveal-truth` should look.
    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn pi_calibration(&self, transition: usize) -> Result<PiCalibration> {
        self.pi
            .get(transition)
            .copied()
            .ok_or(Error::InvalidTransition(transition))
    }

    pub fn set_pi_calibration(&mut self, transition: usize, cal: PiCalibration) -> Result<()> {
        let slot = self
            .pi
            .get_mut(transition)
            .ok_or(Error::InvalidTransition(transition))?;
        *slot = cal;
        Ok(())
    }

    pub fn set_wall_clock_hours(&mut self, hours: f64) {
        self.wall_clock_hours = hours;
    }

    /// Keep shot-level I-Q points in subsequent experiment data.
    pub fn set_keep_iq(&mut self, keep: bool) {
        self.keep_iq = keep;
    }

    pub fn readout(&self) -> Option<&ReadoutCalibration> {
        self.readout.as_ref()
    }

    /// Installs a previously trained classifier, e.g. one loaded from disk.
    pub fn set_readout(&mut self, readout: ReadoutCalibration) {
        self.readout = Some(readout);
    }

    /// Prepares |0⟩, |1⟩ and |2⟩ with the current π pulses, records
    /// `n_per_state` labeled shots of each and fits the classifier.
    pub fn train_readout(&mut self, n_per_state: usize) -> Result<&ReadoutCalibration> {
        let mut labeled: Vec<Vec<IqPoint>> = Vec::with_capacity(READOUT_STATES);
        for level in 0..READOUT_STATES {
            let schedule = Schedule::new(self.prep_steps(level)?);
            let [plus, minus] = self.simulate(&schedule, &[0.0])?;
            let shots = (0..n_per_state)
                .map(|_| {
                    let pops = if self.rng.random::<bool>() {
                        &plus[0]
                    } else {
                        &minus[0]
                    };
                    shot(&self.truth, pops, &mut self.rng)
                })
                .collect();
            labeled.push(shots);
        }
        let anchors: Vec<IqPoint> = labeled
            .iter()
            .map(|s| {
                let n = s.len().max(1) as f64;
                s.iter()
                    .fold([0.0, 0.0], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n])
            })
            .collect();
        let all: Vec<IqPoint> = labeled.concat();
        let model = train_gmm(&all, READOUT_STATES, &anchors)?;
        let confusion = estimate_confusion(&model, &labeled)?;
        let training = labeled
            .iter()
            .enumerate()
            .flat_map(|(j, s)| s.iter().map(move |&q| (j, q)))
            .collect();
        self.readout = Some(ReadoutCalibration {
            model,
            confusion,
            training,
        });
        Ok(self.readout.as_ref().expect("just set"))
    }

    /// π-pulse chain taking |0⟩ to |level⟩.
    pub fn prep_steps(&self, level: usize) -> Result<Vec<Step>> {
        if level >= READOUT_STATES {
            return Err(Error::Unpreparable(level));
        }
        (0..level)
            .map(|k| Ok(Step::Pulse(self.pi[k].pulse(false)?)))
            .collect()
    }

    /// Protocol: prepare |k⟩, wait, measure.
    pub fn run_t1(
        &mut self,
        level: usize,
        delays: &[f64],
        n_shots: usize,
    ) -> Result<ExperimentData> {
        if !(1..READOUT_STATES).contains(&level) {
            return Err(Error::Unpreparable(level));
        }
        check_delays(delays)?;
        let mut steps = self.prep_steps(level)?;
        steps.push(Step::VariableDelay);
        let drive = self.pi[level - 1].freq;
        self.acquire(
            ExperimentKind::T1,
            level,
            &Schedule::new(steps),
            delays,
            n_shots,
            drive,
        )
    }

    /// Prepare |k⟩, π/2 on k↔k+1 at `drive_freq`, wait, π/2 again, measure.
    pub fn run_ramsey(
        &mut self,
        level: usize,
        drive_freq: f64,
        delays: &[f64],
        n_shots: usize,
    ) -> Result<ExperimentData> {
        let cal = self.transition(level)?;
        check_delays(delays)?;
        let half = PiCalibration {
            freq: drive_freq,
            ..cal
        }
        .pulse(true)?;
        let mut steps = self.prep_steps(level)?;
        steps.extend([
            Step::Pulse(half.clone()),
            Step::VariableDelay,
            Step::Pulse(half),
        ]);
        self.acquire(
            ExperimentKind::Ramsey,
            level,
            &Schedule::new(steps),
            delays,
            n_shots,
            drive_freq,
        )
    }

    /// Hahn echo: π/2, wait, π, wait, π/2 at the calibrated frequency.
    pub fn run_echo(
        &mut self,
        level: usize,
        delays: &[f64],
        n_shots: usize,
    ) -> Result<ExperimentData> {
        let cal = self.transition(level)?;
        check_delays(delays)?;
        let (half, full) = (cal.pulse(true)?, cal.pulse(false)?);
        let mut steps = self.prep_steps(level)?;
        steps.extend([
            Step::Pulse(half.clone()),
            Step::VariableDelay,
            Step::Pulse(full),
            Step::VariableDelay,
            Step::Pulse(half),
        ]);
        self.acquire(
            ExperimentKind::Echo,
            level,
            &Schedule::new(steps),
            delays,
            n_shots,
            cal.freq,
        )
    }

    /// One π pulse on k↔k+1 at each candidate drive frequency.
    pub fn run_freq_sweep(
        &mut self,
        level: usize,
        freqs: &[f64],
        n_shots: usize,
    ) -> Result<ExperimentData> {
        let cal = self.transition(level)?;
        nonempty(freqs)?;
        let prep = self.prep_steps(level)?;
        let mut rows = Vec::with_capacity(freqs.len());
        for &f in freqs {
            let mut steps = prep.clone();
            steps.push(Step::Pulse(PiCalibration { freq: f, ..cal }.pulse(false)?));
            rows.push(
                self.simulate(&Schedule::new(steps), &[0.0])?
                    .map(|mut v| v.remove(0)),
            );
        }
        self.finish(
            ExperimentKind::FreqSweep,
            level,
            freqs,
            rows,
            n_shots,
            cal.freq,
        )
    }

    /// Five back-to-back π pulses at each candidate commanded amplitude.
    pub fn run_amp_sweep(
        &mut self,
        level: usize,
        amps: &[f64],
        n_shots: usize,
    ) -> Result<ExperimentData> {
        let cal = self.transition(level)?;
        nonempty(amps)?;
        let prep = self.prep_steps(level)?;
        let mut rows = Vec::with_capacity(amps.len());
        for &a in amps {
            let pulse = PiCalibration {
                amplitude: a,
                ..cal
            }
            .pulse(false)?;
            let mut steps = prep.clone();
            steps.extend(std::iter::repeat_n(Step::Pulse(pulse), AMP_SWEEP_REPS));
            rows.push(
                self.simulate(&Schedule::new(steps), &[0.0])?
                    .map(|mut v| v.remove(0)),
            );
        }
        self.finish(
            ExperimentKind::AmpSweep,
            level,
            amps,
            rows,
            n_shots,
            cal.freq,
        )
    }

    /// Applies `pulse` up to `n_reps` times after preparing |init⟩, measuring
    /// a fresh shot ensemble after each application.
    pub fn run_gate_repetition(
        &mut self,
        pulse: &Pulse,
        init: usize,
        n_reps: usize,
        n_shots: usize,
    ) -> Result<ExperimentData> {
        if n_reps == 0 {
            return Err(Error::OutOfRange {
                what: "n_reps",
                value: 0.0,
            });
        }
        let [plus, minus] = self.gate_populations(pulse, init, n_reps)?;
        let grid: Vec<f64> = (1..=n_reps).map(|r| r as f64).collect();
        let rows = plus.into_iter().zip(minus).map(|(p, m)| [p, m]).collect();
        self.finish(
            ExperimentKind::GateRep,
            init,
            &grid,
            rows,
            n_shots,
            pulse.drive_freq,
        )
    }

    /// Exact (shot-noise free) populations after 1..=n_reps applications,
    /// per parity `[plus, minus]`.
    pub fn gate_populations(
        &self,
        pulse: &Pulse,
        init: usize,
        n_reps: usize,
    ) -> Result<[Vec<Vec<f64>>; 2]> {
        let mut steps = self.prep_steps(init)?;
        let skip = steps.len();
        steps.extend(std::iter::repeat_n(Step::Pulse(pulse.clone()), n_reps));
        let schedule = self.distort(&Schedule::new(steps))?;
        let rho0 = DensityMatrix::basis(self.truth.params.n_levels, 0);
        let run = |model: &LindbladModel| -> Result<Vec<Vec<f64>>> {
            let states = ScheduleSimulator::new(model).trajectory(&schedule, &rho0)?;
            Ok(states[skip..].iter().map(populations).collect())
        };
        Ok([run(&self.models[0])?, run(&self.models[1])?])
    }

    /// Noise-free parity-averaged populations of a schedule (after the
    /// transmission line) over a delay sweep.
    pub fn exact_populations(&self, schedule: &Schedule, delays: &[f64]) -> Result<Vec<Vec<f64>>> {
        let [plus, minus] = self.simulate(schedule, delays)?;
        Ok(plus
            .iter()
            .zip(&minus)
            .map(|(p, m)| p.iter().zip(m).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect())
    }

    fn transition(&self, level: usize) -> Result<PiCalibration> {
        if level >= 2 {
            return Err(Error::Unpreparable(level + 1));
        }
        Ok(self.pi[level])
    }

    fn distort(&self, schedule: &Schedule) -> Result<Schedule> {
        let steps = schedule
            .steps
            .iter()
            .map(|s| match s {
                Step::Pulse(p) => Ok(Step::Pulse(apply_transmission_at(
                    &self.truth,
                    p,
                    self.wall_clock_hours,
                )?)),
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Schedule::new(steps))
    }

    /// Per-parity level populations for each delay.
    fn simulate(&self, schedule: &Schedule, delays: &[f64]) -> Result<[Vec<Vec<f64>>; 2]> {
        let schedule = self.distort(schedule)?;
        let rho0 = DensityMatrix::basis(self.truth.params.n_levels, 0);
        let run = |model: &LindbladModel| -> Result<Vec<Vec<f64>>> {
            ScheduleSimulator::new(model).sweep_populations(&schedule, delays, &rho0)
        };
        Ok([run(&self.models[0])?, run(&self.models[1])?])
    }

    fn acquire(
        &mut self,
        kind: ExperimentKind,
        level: usize,
        schedule: &Schedule,
        delays: &[f64],
        n_shots: usize,
        drive_freq: f64,
    ) -> Result<ExperimentData> {
        let [plus, minus] = self.simulate(schedule, delays)?;
        let rows = plus.into_iter().zip(minus).map(|(p, m)| [p, m]).collect();
        self.finish(kind, level, delays, rows, n_shots, drive_freq)
    }

    /// Shot sampling, classification and mitigation for every grid point.
    fn finish(
        &mut self,
        kind: ExperimentKind,
        level: usize,
        grid: &[f64],
        rows: Vec<[Vec<f64>; 2]>,
        n_shots: usize,
        drive_freq: f64,
    ) -> Result<ExperimentData> {
        if n_shots == 0 {
            return Err(Error::OutOfRange {
                what: "n_shots",
                value: 0.0,
            });
        }
        let readout = self.readout.as_ref().ok_or(Error::ReadoutNotCalibrated)?;
        let mut pops = Vec::with_capacity(rows.len());
        let mut clamped = Vec::with_capacity(rows.len());
        let mut raw_iq = self.keep_iq.then(Vec::new);
        for [plus, minus] in &rows {
            let mut measured = vec![0.0; READOUT_STATES];
            let mut points = Vec::new();
            for _ in 0..n_shots {
                let pops = if self.rng.random::<bool>() {
                    plus
                } else {
                    minus
                };
                let q = shot(&self.truth, pops, &mut self.rng);
                for (m, r) in measured.iter_mut().zip(readout.model.responsibilities(q)) {
                    *m += r;
                }
                if raw_iq.is_some() {
                    points.push(q);
                }
            }
            measured.iter_mut().for_each(|m| *m /= n_shots as f64);
            let mitigated = mitigate(&readout.confusion, &measured)?;
            pops.push(mitigated.raw);
            clamped.push(mitigated.clamped);
            if let Some(list) = raw_iq.as_mut() {
                list.push(points);
            }
        }
        Ok(ExperimentData {
            kind,
            level,
            grid: grid.to_vec(),
            pops,
            pops_clamped: clamped,
            n_shots,
            drive_freq,
            raw_iq,
        })
    }
}

fn nonempty(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InsufficientData("empty sweep grid".into()));
    }
    Ok(())
}

fn check_delays(delays: &[f64]) -> Result<()> {
    nonempty(delays)?;
    if let Some(&d) = delays.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::OutOfRange {
            what: "delay",
            value: d,
        });
    }
    Ok(())
}

/// Uniform grid `0, step, …, max` (inclusive, rounded to whole steps).
pub fn delay_grid(step: f64, max: f64) -> Vec<f64> {
    let n = (max / step).round() as usize;
    (0..=n).map(|j| j as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulses::pi_amplitude;

    fn closed_truth(seed: u64) -> GroundTruth {
        let mut gt = GroundTruth::reference(seed);
        gt.params.t1 = vec![1e6; 3];
        gt.params.t2 = vec![1e6; 3];
        gt
    }

    fn calibrated(mut dev: VirtualDevice) -> VirtualDevice {
        let p = dev.truth().params.clone();
        for (k, f) in [p.omega01, p.omega12_bar].into_iter().enumerate() {
            let g = dev.truth().gain_at(f, 0.0).unwrap();
            dev.set_pi_calibration(
                k,
                PiCalibration {
                    freq: f,
                    amplitude: pi_amplitude(k, PI_DURATION) / g,
                    duration: PI_DURATION,
                },
            )
            .unwrap();
        }
        dev.train_readout(4000).unwrap();
        dev
    }

    #[test]
    fn reference_truth_is_valid() {
        GroundTruth::reference(1).validate().unwrap();
        let mut bad = GroundTruth::reference(1);
        bad.readout_clusters[1].mean = [0.5, 0.0];
        assert!(bad.validate().is_err());
        let bad = GroundTruth::reference(1).with_gains(&[1.0, 2.5]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn transmission_identity_and_composition() {
        let gt = GroundTruth::reference(1).with_gains(&[1.0, 1.0]);
        let p = DeviceParams::reference();
        let basis = crate::pulses::BSplineBasis::new(5, 100e-9).unwrap();
        let mut control = crate::pulses::ControlVector::zeros(2, 5);
        control.alpha_p[0] = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        control.alpha_q[1] = vec![-1.0, 0.5, 0.0, 2.0, 1.0];
        let pulse = Pulse::new(
            basis,
            vec![0.0, p.omega12_bar - p.omega01],
            control,
            p.omega01,
        )
        .unwrap();
        assert_eq!(apply_transmission(&gt, &pulse).unwrap(), pulse);

        let gt = GroundTruth::reference(1).with_gains(&[1.0, 0.6]);
        let pre = crate::pulses::rescale(&pulse, 1.0 / 0.6, 1.0).unwrap();
        let out = apply_transmission(&gt, &pre).unwrap();
        for (a, b) in out.control.alpha_q[1].iter().zip(&pulse.control.alpha_q[1]) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let twice = apply_transmission(&gt, &apply_transmission(&gt, &pulse).unwrap()).unwrap();
        assert!((twice.control.alpha_q[1][1] - 0.36 * 0.5).abs() < 1e-15);

        let far = constant_pulse(hz(5e9), C64::new(1.0, 0.0), 10e-9).unwrap();
        assert!(matches!(
            apply_transmission(&gt, &far),
            Err(Error::MissingGain(_))
        ));
    }

    #[test]
    fn drift_scales_gain() {
        let gt = GroundTruth::reference(1);
        let f = gt.params.omega12_bar;
        let g0 = gt.gain_at(f, 0.0).unwrap();
        let g6 = gt.gain_at(f, 6.0).unwrap();
        assert!((g6 / g0 - 0.97).abs() < 1e-12);
    }

    #[test]
    fn measure_ground_state_and_mixed_counts() {
        let mut gt = GroundTruth::reference(3);
        gt.readout_clusters = vec![
            ReadoutCluster::isotropic([0.0, 0.0], 0.01),
            ReadoutCluster::isotropic([10.0, 0.0], 0.01),
            ReadoutCluster::isotropic([0.0, 10.0], 0.01),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = measure_shots(&gt, &DensityMatrix::basis(4, 0), 100, &mut rng);
        assert!(pts.iter().all(|q| q[0].abs() < 0.1 && q[1].abs() < 0.1));

        let n = 80_000;
        let pts = measure_shots(&gt, &DensityMatrix::maximally_mixed(3), n, &mut rng);
        let mut counts = [0usize; 3];
        for q in pts {
            let k = if q[0] > 5.0 {
                1
            } else if q[1] > 5.0 {
                2
            } else {
                0
            };
            counts[k] += 1;
        }
        let (mean, sd) = (
            n as f64 / 3.0,
            (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt(),
        );
        assert!(
            counts.iter().all(|&c| (c as f64 - mean).abs() < 3.0 * sd),
            "{counts:?}"
        );
    }

    #[test]
    fn experiments_need_readout() {
        let mut dev = VirtualDevice::new(GroundTruth::reference(1)).unwrap();
        assert!(matches!(
            dev.run_t1(1, &[0.0], 10),
            Err(Error::ReadoutNotCalibrated)
        ));
        assert!(matches!(
            dev.run_t1(3, &[0.0], 10),
            Err(Error::Unpreparable(3))
        ));
    }

    #[test]
    fn t1_without_decay_keeps_population() {
        let mut dev = calibrated(VirtualDevice::new(closed_truth(5)).unwrap());
        let data = dev.run_t1(1, &[0.0, 10e-6, 20e-6], 2000).unwrap();
        for row in &data.pops {
            assert!((row[1] - 1.0).abs() < 0.05, "{row:?}");
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_amplitude_leaves_ground_state() {
        let mut dev = calibrated(VirtualDevice::new(closed_truth(6)).unwrap());
        let data = dev.run_amp_sweep(0, &[0.0], 2000).unwrap();
        assert!((data.pops[0][0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn reproducible_with_seed() {
        let run = || {
            let mut dev = VirtualDevice::new(GroundTruth::reference(11)).unwrap();
            dev.train_readout(1000).unwrap();
            dev.run_t1(1, &delay_grid(1e-6, 5e-6), 200).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gate_repetition_of_ideal_swap() {
        // the π01 pulse as the repeated gate; off-resonant leakage into the
        // upper levels is the only deviation from exact alternation
        let dev = calibrated(VirtualDevice::new(closed_truth(7).with_gains(&[1.0, 1.0])).unwrap());
        let pulse = dev.pi_calibration(0).unwrap().pulse(false).unwrap();
        let [plus, _] = dev.gate_populations(&pulse, 0, 4).unwrap();
        for (r, row) in plus.iter().enumerate() {
            let want = if r % 2 == 0 { 1 } else { 0 };
            assert!((row[want] - 1.0).abs() < 1e-3, "{r} {row:?}");
        }
    }

    #[test]
    fn csv_headers() {
        let mut dev = calibrated(VirtualDevice::new(closed_truth(8)).unwrap());
        dev.set_keep_iq(true);
        let data = dev.run_t1(1, &[0.0, 1e-6], 5).unwrap();
        assert!(data.to_csv().starts_with("delay_s,p0,p1,p2,n_shots\n"));
        assert_eq!(data.iq_csv().unwrap().lines().count(), 11);
        assert_eq!(
            dev.readout().unwrap().training_csv().lines().count(),
            3 * 4000 + 1
        );
    }
}
