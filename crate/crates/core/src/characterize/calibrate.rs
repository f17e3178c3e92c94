//! Closed-loop π-pulse calibration against a virtual device.

use serde::{Deserialize, Serialize};

use super::fit::{
    check_nyquist, cosine_maxima, fit_amplitude_cos, fit_decaying_sinusoid, fit_lorentzian,
};
use crate::error::{Error, Result};
use crate::qmodel::hz;
use crate::vdevice::{delay_grid, PiCalibration, VirtualDevice, AMP_SWEEP_REPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Half width of the frequency sweep around the current estimate (rad/s).
    pub freq_span: f64,
    pub freq_points: usize,
    /// Amplitude sweep range as fractions of the current amplitude.
    pub amp_range: (f64, f64),
    pub amp_points: usize,
    /// The short Ramsey experiment drives this far below the estimate.
    pub ramsey_detuning: f64,
    pub ramsey_step: f64,
    pub ramsey_max: f64,
    /// Convergence threshold on the change of the frequency estimate.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub n_shots: usize,
    /// Labeled shots per state used to retrain the readout afterwards.
    pub readout_shots: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            freq_span: hz(3e6),
            freq_points: 61,
            amp_range: (0.6, 1.4),
            amp_points: 41,
            ramsey_detuning: hz(1e6),
            ramsey_step: 20e-9,
            ramsey_max: 2e-6,
            tolerance: hz(10e3),
            max_iterations: 10,
            n_shots: 1000,
            readout_shots: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub transition: usize,
    pub freq: f64,
    pub amplitude: f64,
    /// Amplitude-sweep/Ramsey rounds performed.
    pub iterations: usize,
    /// `(freq, amplitude)` after the frequency sweep and after each round.
    pub history: Vec<(f64, f64)>,
}

/// Calibrates the π pulse of transition `k` (0 for 0↔1, 1 for 1↔2) and
/// stores it on the device.
///
/// A frequency sweep gives the first frequency estimate. Then amplitude
/// sweeps with repeated π pulses and short Ramsey experiments alternate
/// until the Ramsey frequency moves by less than the tolerance.
pub fn calibrate_pi(
    device: &mut VirtualDevice,
    transition: usize,
    cfg: &CalibrationConfig,
) -> Result<CalibrationResult> {
    if transition > 1 {
        return Err(Error::InvalidTransition(transition));
    }
    if device.readout().is_none() {
        device.train_readout(cfg.readout_shots)?;
    }
    let target = transition + 1;
    let mut cal = device.pi_calibration(transition)?;

    let freqs: Vec<f64> = linspace(
        cal.freq - cfg.freq_span,
        cal.freq + cfg.freq_span,
        cfg.freq_points,
    );
    let sweep = device.run_freq_sweep(transition, &freqs, cfg.n_shots)?;
    let lorentz = fit_lorentzian(&freqs, &sweep.series(target))?;
    // The sweep only locates the line to within its grid spacing; finer
    // corrections are left to the Ramsey rounds.
    let spacing = 2.0 * cfg.freq_span / (cfg.freq_points.max(2) - 1) as f64;
    if !lorentz.is_flagged()
        && lorentz.params[0] > 0.0
        && (lorentz.params[1] - cal.freq).abs() > spacing
    {
        cal.freq = lorentz.params[1];
    }
    device.set_pi_calibration(transition, cal)?;
    let mut history = vec![(cal.freq, cal.amplitude)];

    let delays = delay_grid(cfg.ramsey_step, cfg.ramsey_max);
    check_nyquist(&delays, cfg.ramsey_detuning)?;
    for iteration in 1..=cfg.max_iterations {
        cal.amplitude = amplitude_round(device, transition, cal, cfg)?;
        device.set_pi_calibration(transition, cal)?;

        let drive = cal.freq - cfg.ramsey_detuning;
        let ramsey = device.run_ramsey(transition, drive, &delays, cfg.n_shots)?;
        let fit = fit_decaying_sinusoid(&delays, &ramsey.series(target))?;
        let new_freq = drive + fit.params[2];
        let change = (new_freq - cal.freq).abs();
        cal.freq = new_freq;
        device.set_pi_calibration(transition, cal)?;
        history.push((cal.freq, cal.amplitude));
        if change < cfg.tolerance {
            device.train_readout(cfg.readout_shots)?;
            return Ok(CalibrationResult {
                transition,
                freq: cal.freq,
                amplitude: cal.amplitude,
                iterations: iteration,
                history,
            });
        }
    }
    Err(Error::CalibrationDiverged {
        transition,
        iterations: cfg.max_iterations,
    })
}

/// One amplitude sweep; returns the amplitude at which the repeated pulses
/// add up to an odd multiple of π closest to a single π.
fn amplitude_round(
    device: &mut VirtualDevice,
    transition: usize,
    cal: PiCalibration,
    cfg: &CalibrationConfig,
) -> Result<f64> {
    let (lo, hi) = (
        cal.amplitude * cfg.amp_range.0,
        cal.amplitude * cfg.amp_range.1,
    );
    let amps = linspace(lo, hi, cfg.amp_points);
    let data = device.run_amp_sweep(transition, &amps, cfg.n_shots)?;
    let fit = fit_amplitude_cos(&amps, &data.series(transition + 1))?;
    // P = (1 − cos(N π A / A_π))/2 for N repetitions, so A_est = 2 A_π / N.
    let guess = fit.params[0] * AMP_SWEEP_REPS as f64 / 2.0;
    let best = cosine_maxima(&fit, lo, hi)
        .into_iter()
        .min_by(|a, b| (a - guess).abs().total_cmp(&(b - guess).abs()));
    Ok(best.unwrap_or(cal.amplitude))
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64)
        .collect()
}
