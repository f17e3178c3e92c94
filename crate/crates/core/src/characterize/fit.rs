//! Curve fits used by calibration and for rough decoherence estimates.
//!
//! Every fit rescales its abscissa to order one, scans the nonlinear
//! parameters coarsely with the linear ones solved exactly, and then polishes
//! all parameters together with Levenberg–Marquardt.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, LmOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lorentzian,
    Cosine,
    DecayingSinusoid,
    BeatingSinusoid,
    Exponential,
}

/// Fitted coefficients in physical units. Layouts:
/// - Lorentzian `[A, ω0, B, C]` for (A/π)·B/((x − ω0)² + B²) + C
/// - Cosine `[A_est, B, φ, C]` for B·cos(2π x/A_est − φ) + C
/// - DecayingSinusoid `[A, T, Δ, φ, B]` for A·e^{−t/T}·cos(Δ t − φ) + B
/// - BeatingSinusoid `[A, T, Δa, Δb, φ, B]` for
///   A·e^{−t/T}·(cos(Δa t − φ) + cos(Δb t − φ))/2 + B
/// - Exponential `[A, T, B]` for A·e^{−t/T} + B
///
/// `T` is infinite when no decay is resolved; angular frequencies in rad per
/// unit of the abscissa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub model_kind: ModelKind,
    pub params: Vec<f64>,
    pub residual_norm: f64,
    /// Problems noticed during fitting; the parameters are still usable as
    /// a best effort.
    pub flags: Vec<String>,
}

impl CurveFit {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }

    pub fn eval(&self, x: f64) -> f64 {
        let p = &self.params;
        match self.model_kind {
            ModelKind::Lorentzian => p[0] / PI * p[2] / ((x - p[1]).powi(2) + p[2] * p[2]) + p[3],
            ModelKind::Cosine => p[1] * (2.0 * PI * x / p[0] - p[2]).cos() + p[3],
            ModelKind::DecayingSinusoid => p[0] * decay(x, p[1]) * (p[2] * x - p[3]).cos() + p[4],
            ModelKind::BeatingSinusoid => {
                p[0] * decay(x, p[1]) * 0.5 * ((p[2] * x - p[4]).cos() + (p[3] * x - p[4]).cos())
                    + p[5]
            }
            ModelKind::Exponential => p[0] * decay(x, p[1]) + p[2],
        }
    }
}

fn decay(t: f64, tau: f64) -> f64 {
    if tau.is_infinite() {
        1.0
    } else {
        (-t / tau).exp()
    }
}

struct Scale {
    center: f64,
    half: f64,
}

impl Scale {
    fn of(x: &[f64]) -> Self {
        let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let half = 0.5 * (hi - lo);
        Self {
            center: 0.5 * (hi + lo),
            half: if half > 0.0 { half } else { 1.0 },
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.center) / self.half).collect()
    }
}

fn check(x: &[f64], y: &[f64], min_points: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.len() < min_points {
        return Err(Error::InsufficientData(format!(
            "{} points, need {min_points}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData("non-finite data".into()));
    }
    Ok(())
}

/// Least-squares coefficients for y ≈ Σ c_j cols_j, and the residual norm.
fn linear_lsq(cols: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
    let m = DMatrix::from_fn(y.len(), cols.len(), |i, j| cols[j][i]);
    let rhs = DVector::from_column_slice(y);
    let svd = m.clone().svd(true, true);
    let c = svd
        .solve(&rhs, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(cols.len()));
    let r = (m * &c - rhs).norm();
    (c.iter().copied().collect(), r)
}

/// Lorentzian peak (or dip) fit of a frequency sweep.
pub fn fit_lorentzian(x: &[f64], y: &[f64]) -> Result<CurveFit> {
    check(x, y, 5)?;
    let s = Scale::of(x);
    let u = s.apply(x);
    let model = |p: &[f64], u: f64| p[0] / PI * p[2] / ((u - p[1]).powi(2) + p[2] * p[2]) + p[3];

    // scan centre and width with amplitude and offset solved linearly
    let mut best: Option<(f64, Vec<f64>)> = None;
    for &u0 in &u {
        for w in [0.02, 0.05, 0.1, 0.2, 0.4, 0.8] {
            let shape: Vec<f64> = u
                .iter()
                .map(|v| w / PI / ((v - u0).powi(2) + w * w))
                .collect();
            let (c, r) = linear_lsq(&[shape, vec![1.0; u.len()]], y);
            if best.as_ref().is_none_or(|b| r < b.0) {
                best = Some((r, vec![c[0], u0, w, c[1]]));
            }
        }
    }
    let p0 = best.expect("nonempty grid").1;
    let fit = levenberg_marquardt(
        |p: &[f64]| {
            u.iter()
                .zip(y)
                .map(|(&ui, &yi)| model(p, ui) - yi)
                .collect()
        },
        &p0,
        &LmOptions::default(),
    );
    let p = fit.x;
    let width = p[2].abs();
    let params = vec![
        p[0] * s.half,
        s.center + p[1] * s.half,
        width * s.half,
        p[3],
    ];
    let mut flags = Vec::new();
    let height = (p[0] / (PI * width.max(1e-300))).abs();
    let spread = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - y.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(height > 1e-6 * spread.max(1e-12)) || spread < 1e-12 {
        flags.push("degenerate: no peak above the baseline".into());
    }
    if p[1].abs() > 1.0 {
        flags.push("centre outside the data range".into());
    }
    if !fit.converged {
        flags.push("did not converge".into());
    }
    Ok(CurveFit {
        model_kind: ModelKind::Lorentzian,
        params,
        residual_norm: fit.residual_norm,
        flags,
    })
}

/// Cosine fit of an amplitude sweep, B·cos(2π A/A_est − φ) + C.
pub fn fit_amplitude_cos(amps: &[f64], y: &[f64]) -> Result<CurveFit> {
    check(amps, y, 5)?;
    let scale = amps.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1e-300);
    let u: Vec<f64> = amps.iter().map(|a| a / scale).collect();
    let span = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - u.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = if span > 0.0 { span } else { 1.0 };

    // frequency scan in cycles per unit of u; up to the grid's Nyquist rate
    let nyquist = 0.5 * (u.len() - 1) as f64 / span;
    let n_scan = 400;
    let mut best = (f64::INFINITY, 0.0, vec![0.0; 3]);
    for j in 1..=n_scan {
        let f = 0.25 / span + (nyquist - 0.25 / span) * j as f64 / n_scan as f64;
        let c: Vec<f64> = u.iter().map(|v| (2.0 * PI * f * v).cos()).collect();
        let sn: Vec<f64> = u.iter().map(|v| (2.0 * PI * f * v).sin()).collect();
        let (coef, r) = linear_lsq(&[c, sn, vec![1.0; u.len()]], y);
        if r < best.0 {
            best = (r, f, coef);
        }
    }
    let (_, f, c) = best;
    let b = c[0].hypot(c[1]);
    let phi = c[1].atan2(c[0]);
    let model = |p: &[f64], u: f64| p[1] * (2.0 * PI * u * p[0] - p[2]).cos() + p[3];
    let fit = levenberg_marquardt(
        |p: &[f64]| {
            u.iter()
                .zip(y)
                .map(|(&ui, &yi)| model(p, ui) - yi)
                .collect()
        },
        &[f, b, phi, c[2]],
        &LmOptions::default(),
    );
    let p = fit.x;
    let mut flags = Vec::new();
    if !fit.converged {
        flags.push("did not converge".into());
    }
    if p[1].abs() < 1e-9 {
        flags.push("degenerate: no oscillation".into());
    }
    Ok(CurveFit {
        model_kind: ModelKind::Cosine,
        params: vec![scale / p[0], p[1], p[2], p[3]],
        residual_norm: fit.residual_norm,
        flags,
    })
}

/// Amplitudes at which a [`ModelKind::Cosine`] fit is maximal.
pub fn cosine_maxima(fit: &CurveFit, lo: f64, hi: f64) -> Vec<f64> {
    let [a_est, b, phi, _] = [fit.params[0], fit.params[1], fit.params[2], fit.params[3]];
    let offset = if b >= 0.0 { 0.0 } else { PI };
    // 2π x/A_est − φ = offset + 2π m
    let m_lo = (((2.0 * PI * lo / a_est) - phi - offset) / (2.0 * PI)).ceil() as i64;
    let m_hi = (((2.0 * PI * hi / a_est) - phi - offset) / (2.0 * PI)).floor() as i64;
    let (m_lo, m_hi) = if a_est > 0.0 {
        (m_lo, m_hi)
    } else {
        (m_hi + 1, m_lo - 1)
    };
    (m_lo..=m_hi)
        .map(|m| a_est * (offset + phi + 2.0 * PI * m as f64) / (2.0 * PI))
        .filter(|x| (lo..=hi).contains(x))
        .collect()
}

/// Sampling-rate limit (rad/s) of a uniform grid.
pub fn nyquist(grid: &[f64]) -> f64 {
    if grid.len() < 2 {
        return f64::INFINITY;
    }
    PI / (grid[1] - grid[0]).abs()
}

fn frequency_scan(
    t: &[f64],
    y: &[f64],
    tmax: f64,
    n_scan: usize,
    rates: &[f64],
) -> (f64, f64, Vec<f64>) {
    let nyq = nyquist(t) * tmax;
    let mut best = (f64::INFINITY, 0.0, 0.0, vec![0.0; 3]);
    for j in 0..=n_scan {
        let w = nyq * j as f64 / n_scan as f64;
        for &g in rates {
            let e: Vec<f64> = t.iter().map(|v| (-g * v / tmax).exp()).collect();
            let c: Vec<f64> = t
                .iter()
                .zip(&e)
                .map(|(v, e)| e * (w * v / tmax).cos())
                .collect();
            let s: Vec<f64> = t
                .iter()
                .zip(&e)
                .map(|(v, e)| e * (w * v / tmax).sin())
                .collect();
            let (coef, r) = linear_lsq(&[c, s, vec![1.0; t.len()]], y);
            if r < best.0 {
                best = (r, w, g, coef);
            }
        }
    }
    (best.1, best.2, best.3)
}

/// Decaying sinusoid fit of a Ramsey or echo record, A·e^{−t/T}·cos(Δt − φ) + B.
///
/// The frequency Δ is reported as a non-negative angular frequency; a fit
/// whose frequency sits at the grid's Nyquist limit is flagged because the
/// true detuning may have aliased.
pub fn fit_decaying_sinusoid(t: &[f64], y: &[f64]) -> Result<CurveFit> {
    check(t, y, 6)?;
    let tmax = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let (w0, g0, c) = frequency_scan(t, y, tmax, 8 * t.len(), &[0.0, 0.5, 1.0, 2.0, 4.0]);
    let amp = c[0].hypot(c[1]);
    let phi = c[1].atan2(c[0]);
    let u: Vec<f64> = t.iter().map(|v| v / tmax).collect();
    // p = [A, rate, ω, φ, B] with time in units of tmax
    let model = |p: &[f64], u: f64| p[0] * (-p[1] * u).exp() * (p[2] * u - p[3]).cos() + p[4];
    let fit = levenberg_marquardt(
        |p: &[f64]| {
            u.iter()
                .zip(y)
                .map(|(&ui, &yi)| model(p, ui) - yi)
                .collect()
        },
        &[amp, g0, w0, phi, c[2]],
        &LmOptions::default(),
    );
    let mut p = fit.x;
    if p[0] < 0.0 {
        p[0] = -p[0];
        p[3] += PI;
    }
    if p[2] < 0.0 {
        p[2] = -p[2];
        p[3] = -p[3];
    }
    let mut flags = Vec::new();
    let omega = p[2] / tmax;
    if omega >= 0.95 * nyquist(t) {
        flags.push("frequency at the Nyquist limit of the delay grid (possible aliasing)".into());
    }
    if !fit.converged {
        flags.push("did not converge".into());
    }
    let tau = if p[1] > 1e-9 {
        tmax / p[1]
    } else {
        f64::INFINITY
    };
    Ok(CurveFit {
        model_kind: ModelKind::DecayingSinusoid,
        params: vec![p[0], tau, omega, p[3].rem_euclid(2.0 * PI), p[4]],
        residual_norm: fit.residual_norm,
        flags,
    })
}

/// Flags a nominal detuning that the delay grid cannot resolve.
pub fn check_nyquist(delays: &[f64], detuning: f64) -> Result<()> {
    let limit = nyquist(delays);
    if detuning.abs() >= limit {
        return Err(Error::OutOfRange {
            what: "detuning above the delay grid's Nyquist rate",
            value: detuning,
        });
    }
    Ok(())
}

/// Two equal-weight sinusoids under a shared decay, the parity-averaged
/// Ramsey signal. `guess` gives starting angular frequencies (rad/s).
pub fn fit_beating_sinusoid(t: &[f64], y: &[f64], guess: [f64; 2]) -> Result<CurveFit> {
    check(t, y, 8)?;
    let tmax = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let u: Vec<f64> = t.iter().map(|v| v / tmax).collect();
    let (wa, wb) = (guess[0] * tmax, guess[1] * tmax);
    let model = |p: &[f64], u: f64| {
        p[0] * (-p[1] * u).exp() * 0.5 * ((p[2] * u - p[4]).cos() + (p[3] * u - p[4]).cos()) + p[5]
    };
    let mut best: Option<crate::optim::LmResult> = None;
    for g in [0.0, 0.3, 1.0] {
        let cols_c: Vec<f64> = u
            .iter()
            .map(|v| (-g * v).exp() * 0.5 * ((wa * v).cos() + (wb * v).cos()))
            .collect();
        let cols_s: Vec<f64> = u
            .iter()
            .map(|v| (-g * v).exp() * 0.5 * ((wa * v).sin() + (wb * v).sin()))
            .collect();
        let (c, _) = linear_lsq(&[cols_c, cols_s, vec![1.0; u.len()]], y);
        let fit = levenberg_marquardt(
            |p: &[f64]| {
                u.iter()
                    .zip(y)
                    .map(|(&ui, &yi)| model(p, ui) - yi)
                    .collect()
            },
            &[c[0].hypot(c[1]), g, wa, wb, c[1].atan2(c[0]), c[2]],
            &LmOptions::default(),
        );
        if best
            .as_ref()
            .is_none_or(|b| fit.residual_norm < b.residual_norm)
        {
            best = Some(fit);
        }
    }
    let fit = best.expect("three starts");
    let p = fit.x;
    let tau = if p[1] > 1e-9 {
        tmax / p[1]
    } else {
        f64::INFINITY
    };
    let (mut a, mut b) = (p[2].abs() / tmax, p[3].abs() / tmax);
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    let mut flags = Vec::new();
    if !fit.converged {
        flags.push("did not converge".into());
    }
    Ok(CurveFit {
        model_kind: ModelKind::BeatingSinusoid,
        params: vec![p[0], tau, a, b, p[4], p[5]],
        residual_norm: fit.residual_norm,
        flags,
    })
}

/// Exponential decay A·e^{−t/T} + B.
pub fn fit_exponential(t: &[f64], y: &[f64]) -> Result<CurveFit> {
    check(t, y, 4)?;
    let tmax = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let u: Vec<f64> = t.iter().map(|v| v / tmax).collect();
    let mut best = (f64::INFINITY, vec![0.0; 3]);
    for j in 0..=60 {
        let g = 0.02 * 1.15f64.powi(j);
        let e: Vec<f64> = u.iter().map(|v| (-g * v).exp()).collect();
        let (c, r) = linear_lsq(&[e, vec![1.0; u.len()]], y);
        if r < best.0 {
            best = (r, vec![c[0], g, c[1]]);
        }
    }
    let model = |p: &[f64], u: f64| p[0] * (-p[1] * u).exp() + p[2];
    let fit = levenberg_marquardt(
        |p: &[f64]| {
            u.iter()
                .zip(y)
                .map(|(&ui, &yi)| model(p, ui) - yi)
                .collect()
        },
        &best.1,
        &LmOptions::default(),
    );
    let p = fit.x;
    let mut flags = Vec::new();
    if !fit.converged {
        flags.push("did not converge".into());
    }
    if p[1] <= 0.0 {
        flags.push("no decay resolved".into());
    }
    let tau = if p[1] > 0.0 {
        tmax / p[1]
    } else {
        f64::INFINITY
    };
    Ok(CurveFit {
        model_kind: ModelKind::Exponential,
        params: vec![p[0], tau, p[2]],
        residual_norm: fit.residual_norm,
        flags,
    })
}
