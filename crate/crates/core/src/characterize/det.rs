//! Deterministic characterization: least-squares matching of simulated and
//! measured Ramsey and T1 populations.

use serde::{Deserialize, Serialize};

use super::fit::{fit_beating_sinusoid, fit_decaying_sinusoid, fit_exponential};
use crate::dynamics::{DensityMatrix, LindbladModel};
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::optim::{fd_gradient, minimize_box, BoxOptions};
use crate::pulses::{constant_pulse, pi_amplitude};
use crate::qmodel::{gamma2_from_t2, hz, t2_from_gamma2, DeviceParams, Rates};
use crate::sequence::{Schedule, ScheduleSimulator, Step};
use crate::vdevice::{delay_grid, ExperimentData, ExperimentKind, VirtualDevice};

/// Length of the parameter vector
/// y = (ω01, ω⁺12, ω⁻12, γ1,1, γ1,2, γ2,1, γ2,2).
pub const N_PARAMS: usize = 7;
/// Levels in the characterization model: three characterized levels and
/// a guard level that only contributes off-resonant shifts.
pub const MODEL_LEVELS: usize = 4;
/// Populations reported per grid point; the guard level reads out as |2⟩.
pub const MEASURED_LEVELS: usize = 3;
/// Unit of the normalized frequency coordinates.
pub const FREQ_UNIT: f64 = 2.0 * std::f64::consts::PI * 10e3;

/// What the experimenter knows about the control pulses used to take the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationSetup {
    /// Calibrated π-pulse frequencies of 0↔1 and 1↔2.
    pub pi_freqs: [f64; 2],
    pub pi_duration: f64,
    /// Assumed 2↔3 frequency of the guard level.
    pub guard_omega23: f64,
}

impl CharacterizationSetup {
    pub fn from_device(device: &VirtualDevice) -> Result<Self> {
        let (c0, c1) = (device.pi_calibration(0)?, device.pi_calibration(1)?);
        Ok(Self::new([c0.freq, c1.freq], c0.duration))
    }

    /// Setup with the guard frequency extrapolated along the transmon
    /// ladder, ω23 ≈ 2ω12 − ω01.
    pub fn new(pi_freqs: [f64; 2], pi_duration: f64) -> Self {
        Self {
            pi_freqs,
            pi_duration,
            guard_omega23: 2.0 * pi_freqs[1] - pi_freqs[0],
        }
    }

    fn pi_pulse(&self, k: usize, freq: f64, half: bool) -> Result<Step> {
        let dur = if half {
            0.5 * self.pi_duration
        } else {
            self.pi_duration
        };
        Ok(Step::Pulse(constant_pulse(
            freq,
            C64::new(pi_amplitude(k, self.pi_duration), 0.0),
            dur,
        )?))
    }

    /// Model schedule reproducing the experiment that produced `data`.
    pub fn schedule(&self, data: &ExperimentData) -> Result<Schedule> {
        let k = data.level;
        let mut steps = (0..k.min(2))
            .map(|j| self.pi_pulse(j, self.pi_freqs[j], false))
            .collect::<Result<Vec<_>>>()?;
        match data.kind {
            ExperimentKind::T1 if (1..=2).contains(&k) => steps.push(Step::VariableDelay),
            ExperimentKind::Ramsey if k <= 1 => {
                let half = self.pi_pulse(k, data.drive_freq, true)?;
                steps.extend([half.clone(), Step::VariableDelay, half]);
            }
            _ => {
                return Err(Error::Config(format!(
                    "{:?} data on level {k} is not used for characterization",
                    data.kind
                )))
            }
        }
        Ok(Schedule::new(steps))
    }
}

/// The guard level borrows the decay time and dephasing time of level 2.
fn model(y: &[f64], parity: usize, setup: &CharacterizationSetup) -> Result<LindbladModel> {
    let omega12 = if parity == 0 { y[1] } else { y[2] };
    let e2 = y[0] + omega12;
    let (r1, r2) = (y[5].max(0.0).sqrt(), y[6].max(0.0).sqrt());
    let r3 = r2 + (r2 - r1).abs();
    let rates = Rates {
        gamma1: vec![y[3], y[4], y[4]],
        gamma2: vec![y[5], y[6], r3 * r3],
    };
    LindbladModel::from_parts(vec![0.0, y[0], e2, e2 + setup.guard_omega23], &rates)
}

/// Parity-averaged measured populations (|0⟩, |1⟩, |2⟩ or above) on the
/// grid of `data`.
pub fn simulate_dataset(
    y: &[f64],
    data: &ExperimentData,
    setup: &CharacterizationSetup,
) -> Result<Vec<Vec<f64>>> {
    if y.len() != N_PARAMS {
        return Err(Error::Dimension {
            expected: N_PARAMS,
            found: y.len(),
        });
    }
    let schedule = setup.schedule(data)?;
    let rho0 = DensityMatrix::basis(MODEL_LEVELS, 0);
    let mut avg = vec![vec![0.0; MEASURED_LEVELS]; data.grid.len()];
    for parity in 0..2 {
        let m = model(y, parity, setup)?;
        let pops = ScheduleSimulator::new(&m).sweep_populations(&schedule, &data.grid, &rho0)?;
        for (row, p) in avg.iter_mut().zip(&pops) {
            for (k, v) in p.iter().enumerate() {
                row[k.min(MEASURED_LEVELS - 1)] += 0.5 * v;
            }
        }
    }
    Ok(avg)
}

/// Sum of squared population residuals of one dataset (no weighting).
pub fn dataset_sse(y: &[f64], data: &ExperimentData, setup: &CharacterizationSetup) -> Result<f64> {
    let sim = simulate_dataset(y, data, setup)?;
    Ok(sim
        .iter()
        .zip(&data.pops)
        .map(|(s, m)| s.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum())
}

fn grid_spacing(grid: &[f64]) -> f64 {
    if grid.len() < 2 {
        1.0
    } else {
        (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64
    }
}

/// J(y) = Σ_e Δt_e Σ_states Σ_delays (P̂ − P)² with Δt_e in seconds.
pub fn det_objective(
    y: &[f64],
    datasets: &[ExperimentData],
    setup: &CharacterizationSetup,
) -> Result<f64> {
    if datasets.is_empty() {
        return Err(Error::InsufficientData("no datasets".into()));
    }
    datasets
        .iter()
        .map(|d| Ok(grid_spacing(&d.grid) * dataset_sse(y, d, setup)?))
        .sum()
}

/// Single-curve estimates used to seed and bound the least-squares fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoughEstimates {
    pub t1: [f64; 2],
    pub t2star: [f64; 2],
    pub t2: [f64; 2],
    /// Ramsey frequency of 0↔1 and the two parity branches of 1↔2.
    pub omega01: f64,
    pub omega12: [f64; 2],
}

impl RoughEstimates {
    pub fn rates(&self) -> Result<[f64; 4]> {
        let g2 = gamma2_from_t2(&self.t2)?;
        Ok([1.0 / self.t1[0], 1.0 / self.t1[1], g2[0], g2[1]])
    }
}

fn find(
    datasets: &[ExperimentData],
    kind: ExperimentKind,
    level: usize,
) -> Result<&ExperimentData> {
    datasets
        .iter()
        .find(|d| d.kind == kind && d.level == level)
        .ok_or_else(|| Error::InsufficientData(format!("missing {kind:?} data for level {level}")))
}

/// Exponential fits of the T1 curves, a decaying sinusoid for Ramsey 0↔1
/// and a beating sinusoid for Ramsey 1↔2, with T2 from 1/T2* = 1/(2T1) + 1/T2
/// generalized to the 1↔2 coherence.
pub fn rough_estimates(datasets: &[ExperimentData], split_guess: f64) -> Result<RoughEstimates> {
    let mut t1 = [0.0; 2];
    for (k, slot) in t1.iter_mut().enumerate() {
        let d = find(datasets, ExperimentKind::T1, k + 1)?;
        *slot = positive_time(
            fit_exponential(&d.grid, &d.series(k + 1))?.params[1],
            &d.grid,
        );
    }
    let r01 = find(datasets, ExperimentKind::Ramsey, 0)?;
    let f01 = fit_decaying_sinusoid(&r01.grid, &r01.series(1))?;
    let r12 = find(datasets, ExperimentKind::Ramsey, 1)?;
    let base = f01.params[2].max(hz(100e3));
    let guess = [base - split_guess, base + split_guess];
    let f12 = fit_beating_sinusoid(&r12.grid, &r12.series(2), guess)?;
    let t2star = [
        positive_time(f01.params[1], &r01.grid),
        positive_time(f12.params[1], &r12.grid),
    ];
    let inv01 = 1.0 / t2star[0] - 0.5 / t1[0];
    let inv12 = 1.0 / t2star[1] - 0.5 * (1.0 / t1[0] + 1.0 / t1[1]);
    let t2 = [
        1.0 / inv01.max(0.1 / t2star[0]),
        1.0 / inv12.max(0.1 / t2star[1]),
    ];
    Ok(RoughEstimates {
        t1,
        t2star,
        t2,
        omega01: r01.drive_freq + f01.params[2],
        omega12: [
            r12.drive_freq + f12.params[3],
            r12.drive_freq + f12.params[2],
        ],
    })
}

/// Unresolved decays come back infinite; cap them at 100 grid lengths.
fn positive_time(t: f64, grid: &[f64]) -> f64 {
    let span = grid.last().copied().unwrap_or(1.0).max(1e-12);
    if t.is_finite() && t > 0.0 {
        t.min(100.0 * span)
    } else {
        100.0 * span
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetConfig {
    /// Frequency bounds are this far either side of the calibrated values.
    pub freq_window: f64,
    /// Rate bounds are [γ/f, γ·f] around the rough estimates.
    pub rate_factor: f64,
    /// Initial half splitting of the parity branches.
    pub split_guess: f64,
    /// Finite-difference step in normalized coordinates.
    pub fd_step: f64,
    pub max_iter: usize,
    pub gtol: f64,
    pub ftol: f64,
}

impl Default for DetConfig {
    fn default() -> Self {
        Self {
            freq_window: hz(1e6),
            rate_factor: 10.0,
            split_guess: hz(150e3),
            fd_step: 1e-4,
            max_iter: 300,
            gtol: 1e-7,
            ftol: 1e-12,
        }
    }
}

/// Initial guess and box for [`det_characterize`]: frequencies from the
/// calibration (1↔2 split by ± the configured guess), rates from
/// [`rough_estimates`].
pub fn initial_guess(
    datasets: &[ExperimentData],
    setup: &CharacterizationSetup,
    cfg: &DetConfig,
) -> Result<(Vec<f64>, Vec<(f64, f64)>, RoughEstimates)> {
    let rough = rough_estimates(datasets, cfg.split_guess)?;
    let rates = rough.rates()?;
    let [w01, w12] = setup.pi_freqs;
    let mut y0 = vec![w01, w12 + cfg.split_guess, w12 - cfg.split_guess];
    y0.extend(rates);
    let mut bounds: Vec<(f64, f64)> = [w01, w12, w12]
        .iter()
        .map(|&w| (w - cfg.freq_window, w + cfg.freq_window))
        .collect();
    bounds.extend(
        rates
            .iter()
            .map(|&g| (g / cfg.rate_factor, g * cfg.rate_factor)),
    );
    Ok((y0, bounds, rough))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetCharResult {
    pub y: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub objective_value: f64,
    pub initial_objective: f64,
    pub converged: bool,
    pub iterations: usize,
    pub evaluations: usize,
    pub message: String,
}

impl DetCharResult {
    pub fn t1(&self) -> [f64; 2] {
        [1.0 / self.y[3], 1.0 / self.y[4]]
    }

    pub fn t2(&self) -> [f64; 2] {
        let t = t2_from_gamma2(&self.y[5..7]);
        [t[0], t[1]]
    }

    pub fn rates(&self) -> Rates {
        Rates {
            gamma1: self.y[3..5].to_vec(),
            gamma2: self.y[5..7].to_vec(),
        }
    }

    /// `base` with the characterized frequencies and times substituted; the
    /// guard level (ω23, T1,3, T2,3) and level count are kept from `base`.
    pub fn device_params(&self, base: &DeviceParams) -> DeviceParams {
        let mut p = base.clone();
        p.omega01 = self.y[0];
        p.omega12_bar = 0.5 * (self.y[1] + self.y[2]);
        p.epsilon12 = 0.5 * (self.y[1] - self.y[2]).abs();
        for (k, (t1, t2)) in self.t1().into_iter().zip(self.t2()).enumerate() {
            if k < p.t1.len() {
                p.t1[k] = t1;
                p.t2[k] = t2;
            }
        }
        p
    }
}

/// Maps physical parameters to O(1) coordinates: frequency offsets from the
/// middle of their window in units of 2π·10 kHz, log rates relative to the
/// geometric middle of their window.
struct Normalizer {
    center: Vec<f64>,
}

impl Normalizer {
    fn new(bounds: &[(f64, f64)]) -> Self {
        let center = bounds
            .iter()
            .enumerate()
            .map(|(i, &(l, u))| if i < 3 { 0.5 * (l + u) } else { (l * u).sqrt() })
            .collect();
        Self { center }
    }

    fn to_x(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, &v)| {
                if i < 3 {
                    (v - self.center[i]) / FREQ_UNIT
                } else {
                    (v / self.center[i]).ln()
                }
            })
            .collect()
    }

    fn to_y(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                if i < 3 {
                    self.center[i] + v * FREQ_UNIT
                } else {
                    self.center[i] * v.exp()
                }
            })
            .collect()
    }
}

/// Box-constrained minimization of [`det_objective`] from `y0`.
///
/// The optimizer runs in normalized coordinates on J/J(y0) with a central
/// finite-difference gradient. The parity branches are reported with
/// ω⁺12 ≥ ω⁻12.
pub fn det_characterize(
    datasets: &[ExperimentData],
    bounds: &[(f64, f64)],
    y0: &[f64],
    setup: &CharacterizationSetup,
    cfg: &DetConfig,
) -> Result<DetCharResult> {
    if y0.len() != N_PARAMS || bounds.len() != N_PARAMS {
        return Err(Error::Dimension {
            expected: N_PARAMS,
            found: y0.len().min(bounds.len()),
        });
    }
    for (i, (&v, &(l, u))) in y0.iter().zip(bounds).enumerate() {
        if !(l <= v && v <= u) || (i >= 3 && l <= 0.0) {
            return Err(Error::OutOfRange {
                what: "initial guess outside its bounds",
                value: v,
            });
        }
    }
    let norm = Normalizer::new(bounds);
    let lower = norm.to_x(&bounds.iter().map(|b| b.0).collect::<Vec<_>>());
    let upper = norm.to_x(&bounds.iter().map(|b| b.1).collect::<Vec<_>>());
    let x0: Vec<f64> = norm
        .to_x(y0)
        .iter()
        .zip(lower.iter().zip(&upper))
        .map(|(v, (l, u))| v.clamp(*l, *u))
        .collect();

    let j0 = det_objective(&norm.to_y(&x0), datasets, setup)?;
    let scale = if j0 > 0.0 { 1.0 / j0 } else { 1.0 };
    let mut failure: Option<Error> = None;
    let mut eval = |x: &[f64]| -> f64 {
        match det_objective(&norm.to_y(x), datasets, setup) {
            Ok(v) => v * scale,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let opts = BoxOptions {
        max_iter: cfg.max_iter,
        gtol: cfg.gtol,
        ftol: cfg.ftol,
        first_step: 1.0,
        ..Default::default()
    };
    let h = cfg.fd_step;
    let res = minimize_box(
        |x: &[f64], g: &mut [f64]| {
            let f = eval(x);
            g.copy_from_slice(&fd_gradient(&mut eval, x, h));
            f
        },
        &x0,
        &lower,
        &upper,
        &opts,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut y = norm.to_y(&res.x);
    for (v, &(l, u)) in y.iter_mut().zip(bounds) {
        *v = v.clamp(l, u);
    }
    if y[1] < y[2] {
        y.swap(1, 2);
    }
    Ok(DetCharResult {
        objective_value: res.f / scale,
        initial_objective: j0,
        converged: res.converged,
        iterations: res.iterations,
        evaluations: res.evaluations,
        message: res.message.to_string(),
        bounds: bounds.to_vec(),
        y,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectionConfig {
    /// Ramsey experiments drive this far below the calibrated frequency.
    pub ramsey_detuning: f64,
    pub ramsey_step: f64,
    pub ramsey_max: f64,
    pub t1_step: f64,
    /// Longest T1 delay for levels 1 and 2.
    pub t1_max: [f64; 2],
    pub n_shots: usize,
}

impl Default for CollectionConfig {
    fn default() -> Self {
        Self {
            ramsey_detuning: hz(1e6),
            ramsey_step: 20e-9,
            ramsey_max: 5e-6,
            t1_step: 80e-9,
            t1_max: [40e-6, 20e-6],
            n_shots: 1000,
        }
    }
}

/// Ramsey 0↔1, Ramsey 1↔2, T1 of level 1 and T1 of level 2, in that order.
pub fn collect_datasets(
    device: &mut VirtualDevice,
    cfg: &CollectionConfig,
) -> Result<Vec<ExperimentData>> {
    let ramsey = delay_grid(cfg.ramsey_step, cfg.ramsey_max);
    let mut out = Vec::with_capacity(4);
    for k in 0..2 {
        let drive = device.pi_calibration(k)?.freq - cfg.ramsey_detuning;
        out.push(device.run_ramsey(k, drive, &ramsey, cfg.n_shots)?);
    }
    for k in 0..2 {
        out.push(device.run_t1(k + 1, &delay_grid(cfg.t1_step, cfg.t1_max[k]), cfg.n_shots)?);
    }
    Ok(out)
}
