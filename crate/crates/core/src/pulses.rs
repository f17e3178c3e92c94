//! Control pulses: quadratic B-spline envelopes on a clamped uniform knot
//! vector, modulated by carrier waves in the frame rotating at the drive
//! frequency.
//!
//! The rotating-frame control Hamiltonian of a pulse with envelope
//! d(t) = p(t) + i q(t) is `d a + conj(d) a†`, and the lab-frame signal is
//! `2 Re(exp(i ω_d t) d(t))`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{positive, Error, Result};
use crate::linalg::C64;
use crate::qmodel::{hz, to_hz, DeviceParams};

/// Samples per nanosecond of the arbitrary waveform generator.
pub const SAMPLES_PER_NS: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct BSplineBasis {
    n_coeffs: usize,
    duration: f64,
    knots: Vec<f64>,
}

impl BSplineBasis {
    pub const DEGREE: usize = 2;

    pub fn new(n_coeffs: usize, duration: f64) -> Result<Self> {
        if n_coeffs < 3 {
            return Err(Error::InsufficientData(format!(
                "a quadratic spline needs at least 3 coefficients, got {n_coeffs}"
            )));
        }
        positive("pulse duration", duration)?;
        let intervals = n_coeffs - 2;
        let h = duration / intervals as f64;
        let mut knots = vec![0.0; 3];
        knots.extend((1..intervals).map(|j| j as f64 * h));
        knots.extend([duration; 3]);
        Ok(Self {
            n_coeffs,
            duration,
            knots,
        })
    }

    pub fn n_coeffs(&self) -> usize {
        self.n_coeffs
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index of the first nonzero basis function at `t` and the (up to
    /// three) nonzero values starting there.
    pub fn nonzero(&self, t: f64) -> Result<(usize, [f64; 3])> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::OutOfRange {
                what: "spline time",
                value: t,
            });
        }
        Ok(self.nonzero_unchecked(t))
    }

    fn nonzero_unchecked(&self, t: f64) -> (usize, [f64; 3]) {
        let u = &self.knots;
        let n = self.n_coeffs;
        // knot span s with u[s] <= t < u[s+1], clamped to the last span at t = T
        let mut s = 2;
        while s < n - 1 && t >= u[s + 1] {
            s += 1;
        }
        let mut basis = [1.0, 0.0, 0.0];
        let mut left = [0.0; 3];
        let mut right = [0.0; 3];
        for j in 1..=2 {
            left[j] = t - u[s + 1 - j];
            right[j] = u[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = basis[r] / (right[r + 1] + left[j - r]);
                basis[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            basis[j] = saved;
        }
        (s - 2, basis)
    }

    /// All basis function values at `t`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let (first, vals) = self.nonzero(t)?;
        let mut out = vec![0.0; self.n_coeffs];
        for (k, v) in vals.iter().enumerate() {
            if first + k < self.n_coeffs {
                out[first + k] = *v;
            }
        }
        Ok(out)
    }

    /// Exact integral of basis function `b` over [0, T].
    pub fn integral(&self, b: usize) -> f64 {
        (self.knots[b + 3] - self.knots[b]) / 3.0
    }
}

pub fn eval_basis(basis: &BSplineBasis, t: f64) -> Result<Vec<f64>> {
    basis.eval(t)
}

/// Spline coefficients, one row per carrier (rad/s).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    pub alpha_p: Vec<Vec<f64>>,
    pub alpha_q: Vec<Vec<f64>>,
}

impl ControlVector {
    pub fn zeros(n_carriers: usize, n_coeffs: usize) -> Self {
        Self {
            alpha_p: vec![vec![0.0; n_coeffs]; n_carriers],
            alpha_q: vec![vec![0.0; n_coeffs]; n_carriers],
        }
    }

    pub fn n_carriers(&self) -> usize {
        self.alpha_p.len()
    }

    pub fn n_coeffs(&self) -> usize {
        self.alpha_p.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        2 * self.n_carriers() * self.n_coeffs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat layout: every carrier's p row, then every carrier's q row.
    pub fn to_flat(&self) -> Vec<f64> {
        self.alpha_p
            .iter()
            .chain(self.alpha_q.iter())
            .flatten()
            .copied()
            .collect()
    }

    pub fn from_flat(flat: &[f64], n_carriers: usize, n_coeffs: usize) -> Result<Self> {
        let expected = 2 * n_carriers * n_coeffs;
        if flat.len() != expected {
            return Err(Error::Dimension {
                expected,
                found: flat.len(),
            });
        }
        let mut rows = flat.chunks(n_coeffs).map(<[f64]>::to_vec);
        let alpha_p = rows.by_ref().take(n_carriers).collect();
        let alpha_q = rows.collect();
        Ok(Self { alpha_p, alpha_q })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pulse {
    pub basis: BSplineBasis,
    /// Carrier frequencies Ω_k in the rotating frame (rad/s).
    pub carriers: Vec<f64>,
    pub control: ControlVector,
    /// Drive (local oscillator) frequency ω_d (rad/s).
    pub drive_freq: f64,
}

impl Pulse {
    pub fn new(
        basis: BSplineBasis,
        carriers: Vec<f64>,
        control: ControlVector,
        drive_freq: f64,
    ) -> Result<Self> {
        if control.n_carriers() != carriers.len() {
            return Err(Error::CarrierCount {
                expected: carriers.len(),
                found: control.n_carriers(),
            });
        }
        for rows in [&control.alpha_p, &control.alpha_q] {
            if rows.len() != carriers.len() {
                return Err(Error::CarrierCount {
                    expected: carriers.len(),
                    found: rows.len(),
                });
            }
            for row in rows {
                if row.len() != basis.n_coeffs() {
                    return Err(Error::Dimension {
                        expected: basis.n_coeffs(),
                        found: row.len(),
                    });
                }
            }
        }
        for (i, a) in carriers.iter().enumerate() {
            if carriers[..i].contains(a) {
                return Err(Error::Config("carrier frequencies must be distinct".into()));
            }
        }
        Ok(Self {
            basis,
            carriers,
            control,
            drive_freq,
        })
    }

    pub fn duration(&self) -> f64 {
        self.basis.duration()
    }

    /// Complex envelope d(t) = Σ_k (p_k(t) + i q_k(t)) exp(i Ω_k t).
    pub fn envelope(&self, t: f64) -> Result<C64> {
        let (first, vals) = self.basis.nonzero(t)?;
        Ok(self.envelope_from(t, first, &vals))
    }

    fn envelope_from(&self, t: f64, first: usize, vals: &[f64; 3]) -> C64 {
        let nb = self.basis.n_coeffs();
        let mut d = C64::new(0.0, 0.0);
        for (k, &omega) in self.carriers.iter().enumerate() {
            let (mut p, mut q) = (0.0, 0.0);
            for (j, v) in vals.iter().enumerate() {
                let b = first + j;
                if b < nb {
                    p += v * self.control.alpha_p[k][b];
                    q += v * self.control.alpha_q[k][b];
                }
            }
            d += C64::new(p, q) * C64::from_polar(1.0, omega * t);
        }
        d
    }

    /// Real lab-frame control signal 2 Re(exp(i ω_d t) d(t)).
    pub fn lab_control(&self, t: f64) -> Result<f64> {
        let d = self.envelope(t)?;
        let (s, c) = (self.drive_freq * t).sin_cos();
        Ok(2.0 * d.re * c - 2.0 * d.im * s)
    }

    /// Largest |d(t)| on a fine grid.
    pub fn max_amplitude(&self) -> f64 {
        let n = 4096;
        (0..=n)
            .map(|j| self.duration() * j as f64 / n as f64)
            .map(|t| self.envelope(t).map_or(0.0, |d| d.norm()))
            .fold(0.0, f64::max)
    }

    /// Number of waveform samples, requiring a whole number of nanoseconds.
    pub fn sample_count(&self) -> Result<usize> {
        sample_count(self.duration())
    }

    /// Sample instants: midpoints of the zero-order-hold intervals.
    pub fn sample_times(&self) -> Result<Vec<f64>> {
        let n = self.sample_count()?;
        let dt = self.duration() / n as f64;
        Ok((0..n).map(|j| (j as f64 + 0.5) * dt).collect())
    }

    /// Envelope evaluated at the waveform sample instants.
    pub fn envelope_samples(&self) -> Result<Vec<C64>> {
        self.sample_times()?
            .into_iter()
            .map(|t| {
                let (first, vals) = self.basis.nonzero_unchecked(t);
                Ok(self.envelope_from(t, first, &vals))
            })
            .collect()
    }

    /// Coefficients scaled per carrier, everything else unchanged.
    pub fn scale_carriers(&self, factors: &[f64]) -> Result<Pulse> {
        if factors.len() != self.carriers.len() {
            return Err(Error::CarrierCount {
                expected: self.carriers.len(),
                found: factors.len(),
            });
        }
        let mut out = self.clone();
        for (k, &f) in factors.iter().enumerate() {
            out.control.alpha_p[k].iter_mut().for_each(|a| *a *= f);
            out.control.alpha_q[k].iter_mut().for_each(|a| *a *= f);
        }
        Ok(out)
    }

    /// `Some(c)` when the envelope is the constant `c` on a single carrier at
    /// Ω = 0; such pulses are propagated exactly with one exponential.
    pub fn constant_envelope(&self) -> Option<C64> {
        if self.carriers.len() != 1 || self.carriers[0] != 0.0 {
            return None;
        }
        let p = &self.control.alpha_p[0];
        let q = &self.control.alpha_q[0];
        let same = |row: &Vec<f64>| row.iter().all(|&v| v == row[0]);
        (same(p) && same(q)).then(|| C64::new(p[0], q[0]))
    }
}

pub fn envelope(pulse: &Pulse, t: f64) -> Result<C64> {
    pulse.envelope(t)
}

pub fn lab_control(pulse: &Pulse, t: f64) -> Result<f64> {
    pulse.lab_control(t)
}

fn sample_count(duration: f64) -> Result<usize> {
    let ns = duration * 1e9;
    let whole = ns.round();
    if whole < 1.0 || (ns - whole).abs() > 1e-6 * whole.max(1.0) {
        return Err(Error::SampleGrid(duration));
    }
    Ok(whole as usize * SAMPLES_PER_NS)
}

/// In-phase and quadrature waveforms, I = p and Q = −q, at 32 samples/ns.
pub fn iq_samples(pulse: &Pulse) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = pulse.envelope_samples()?;
    Ok((
        d.iter().map(|z| z.re).collect(),
        d.iter().map(|z| -z.im).collect(),
    ))
}

/// Amplitude of the constant drive performing a π rotation on the k↔k+1
/// transition in `duration`.
pub fn pi_amplitude(transition: usize, duration: f64) -> f64 {
    PI / (2.0 * duration * ((transition + 1) as f64).sqrt())
}

/// Fraction of a full π rotation produced by [`make_pi_pulse`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PulseFraction {
    Pi,
    HalfPi,
}

/// Constant-envelope π (or π/2, at half the duration) pulse resonant with
/// the k↔k+1 transition.
pub fn make_pi_pulse(
    transition: usize,
    params: &DeviceParams,
    duration: f64,
    fraction: PulseFraction,
) -> Result<Pulse> {
    let freq = match transition {
        0 => params.omega01,
        1 => params.omega12_bar,
        k => return Err(Error::InvalidTransition(k)),
    };
    constant_pulse(
        freq,
        C64::new(pi_amplitude(transition, duration), 0.0),
        scaled_duration(duration, fraction),
    )
}

fn scaled_duration(duration: f64, fraction: PulseFraction) -> f64 {
    match fraction {
        PulseFraction::Pi => duration,
        PulseFraction::HalfPi => 0.5 * duration,
    }
}

/// Constant envelope `amplitude` at drive frequency `drive_freq`.
pub fn constant_pulse(drive_freq: f64, amplitude: C64, duration: f64) -> Result<Pulse> {
    let basis = BSplineBasis::new(3, duration)?;
    let control = ControlVector {
        alpha_p: vec![vec![amplitude.re; 3]],
        alpha_q: vec![vec![amplitude.im; 3]],
    };
    Pulse::new(basis, vec![0.0], control, drive_freq)
}

/// d̂(t; r, A) = A [d_0(t) + r d_1(t)] for a two-carrier pulse.
pub fn rescale(pulse: &Pulse, r: f64, a: f64) -> Result<Pulse> {
    if pulse.carriers.len() != 2 {
        return Err(Error::CarrierCount {
            expected: 2,
            found: pulse.carriers.len(),
        });
    }
    pulse.scale_carriers(&[a, r * a])
}

/// JSON form of a pulse: carriers and drive in Hz, duration in ns,
/// coefficients in rad/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseFile {
    pub duration_ns: f64,
    pub drive_freq_hz: f64,
    pub carriers_hz: Vec<f64>,
    pub n_coeffs: usize,
    pub alpha_p: Vec<Vec<f64>>,
    pub alpha_q: Vec<Vec<f64>>,
}

impl From<&Pulse> for PulseFile {
    fn from(p: &Pulse) -> Self {
        Self {
            duration_ns: p.duration() * 1e9,
            drive_freq_hz: to_hz(p.drive_freq),
            carriers_hz: p.carriers.iter().map(|&c| to_hz(c)).collect(),
            n_coeffs: p.basis.n_coeffs(),
            alpha_p: p.control.alpha_p.clone(),
            alpha_q: p.control.alpha_q.clone(),
        }
    }
}

impl TryFrom<PulseFile> for Pulse {
    type Error = Error;

    fn try_from(f: PulseFile) -> Result<Self> {
        let basis = BSplineBasis::new(f.n_coeffs, f.duration_ns * 1e-9)?;
        let control = ControlVector {
            alpha_p: f.alpha_p,
            alpha_q: f.alpha_q,
        };
        Pulse::new(
            basis,
            f.carriers_hz.into_iter().map(hz).collect(),
            control,
            hz(f.drive_freq_hz),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{CMatrix, C64};

    fn two_carrier_pulse(seed: u64) -> Pulse {
        let basis = BSplineBasis::new(10, 256e-9).unwrap();
        let mut s = seed;
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * hz(4e6)
        };
        let mut control = ControlVector::zeros(2, 10);
        for row in control.alpha_p.iter_mut().chain(control.alpha_q.iter_mut()) {
            row.iter_mut().for_each(|v| *v = next());
        }
        Pulse::new(basis, vec![0.0, hz(-208e6)], control, hz(3.448646e9)).unwrap()
    }

    #[test]
    fn local_support_at_start() {
        let b = BSplineBasis::new(10, 256e-9).unwrap();
        let v = b.eval(0.0).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(v[1..].iter().all(|&x| x == 0.0));
        let mid = b.eval(100e-9).unwrap();
        assert!(mid.iter().filter(|&&x| x > 0.0).count() <= 3);
        assert!(mid.iter().all(|&x| x >= 0.0));
        assert!(b.eval(-1e-12).is_err());
        assert!(b.eval(257e-9).is_err());
    }

    #[test]
    fn partition_of_unity() {
        let b = BSplineBasis::new(10, 256e-9).unwrap();
        for j in 0..=100 {
            let t = 256e-9 * j as f64 / 100.0;
            let s: f64 = b.eval(t).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "t={t} sum={s}");
        }
    }

    #[test]
    fn basis_integrals_match_quadrature() {
        let b = BSplineBasis::new(7, 1.0).unwrap();
        // composite Simpson on each knot interval is exact for quadratics
        let knots = b.knots().to_vec();
        for idx in 0..7 {
            let mut total = 0.0;
            for w in knots.windows(2) {
                let (a, c) = (w[0], w[1]);
                if c <= a {
                    continue;
                }
                let m = 0.5 * (a + c);
                let f = |t: f64| b.eval(t).unwrap()[idx];
                // evaluate inside the interval to stay on one polynomial piece
                let eps = 1e-13;
                total += (c - a) / 6.0 * (f(a + eps) + 4.0 * f(m) + f(c - eps));
            }
            assert!((total - b.integral(idx)).abs() < 1e-10, "basis {idx}");
        }
    }

    #[test]
    fn flat_round_trip() {
        let p = two_carrier_pulse(3);
        let flat = p.control.to_flat();
        assert_eq!(flat.len(), 40);
        assert_eq!(ControlVector::from_flat(&flat, 2, 10).unwrap(), p.control);
    }

    #[test]
    fn zero_and_real_envelopes() {
        let basis = BSplineBasis::new(5, 100e-9).unwrap();
        let zero = Pulse::new(basis.clone(), vec![0.0], ControlVector::zeros(1, 5), 1.0).unwrap();
        assert_eq!(zero.envelope(30e-9).unwrap(), C64::new(0.0, 0.0));
        let mut c = ControlVector::zeros(1, 5);
        c.alpha_p[0] = vec![1.0, 2.0, 3.0, 2.0, 1.0];
        let p = Pulse::new(basis, vec![0.0], c, 1.0).unwrap();
        assert_eq!(p.envelope(42e-9).unwrap().im, 0.0);
    }

    #[test]
    fn lab_control_identities() {
        let p = constant_pulse(hz(5e9), C64::new(0.7, 0.0), 10e-9).unwrap();
        assert!((p.lab_control(0.0).unwrap() - 1.4).abs() < 1e-15);
        let q = two_carrier_pulse(9);
        for j in 0..50 {
            let t = j as f64 * 5e-9;
            let d = q.envelope(t).unwrap();
            let (i, qq) = (d.re, -d.im);
            let via_iq = 2.0 * i * (q.drive_freq * t).cos() + 2.0 * qq * (q.drive_freq * t).sin();
            assert!((via_iq - q.lab_control(t).unwrap()).abs() < 1e-9 * via_iq.abs().max(1.0));
        }
    }

    #[test]
    fn iq_sample_grid() {
        let p = two_carrier_pulse(1);
        let (i, q) = iq_samples(&p).unwrap();
        assert_eq!(i.len(), 8192);
        assert_eq!(q.len(), 8192);
        let times = p.sample_times().unwrap();
        for j in (0..8192).step_by(97) {
            let d = p.envelope(times[j]).unwrap();
            assert_eq!(C64::new(i[j], -q[j]), d);
        }
        let z = Pulse::new(
            p.basis.clone(),
            p.carriers.clone(),
            ControlVector::zeros(2, 10),
            0.0,
        )
        .unwrap();
        let (zi, zq) = iq_samples(&z).unwrap();
        assert!(zi.iter().chain(zq.iter()).all(|&v| v == 0.0));
        let bad = constant_pulse(1.0, C64::new(1.0, 0.0), 10.5e-9).unwrap();
        assert!(matches!(iq_samples(&bad), Err(Error::SampleGrid(_))));
    }

    #[test]
    fn rescale_behaviour() {
        let p = two_carrier_pulse(5);
        assert_eq!(rescale(&p, 1.0, 1.0).unwrap(), p);
        let silenced = rescale(&p, 0.0, 1.0).unwrap();
        assert!(silenced.control.alpha_p[1].iter().all(|&v| v == 0.0));
        let there = rescale(&p, 0.63, 1.02).unwrap();
        let back = rescale(&there, 1.0 / 0.63, 1.0 / 1.02).unwrap();
        for (a, b) in back.control.to_flat().iter().zip(p.control.to_flat()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let single = constant_pulse(1.0, C64::new(1.0, 0.0), 1e-9).unwrap();
        assert!(matches!(
            rescale(&single, 1.0, 1.0),
            Err(Error::CarrierCount { .. })
        ));
    }

    #[test]
    fn envelope_is_c1() {
        let p = two_carrier_pulse(17);
        let knot = p.basis.knots()[5];
        let deriv =
            |t: f64, h: f64| (p.envelope(t + h).unwrap() - p.envelope(t - h).unwrap()) / (2.0 * h);
        let left = |h: f64| (p.envelope(knot).unwrap() - p.envelope(knot - h).unwrap()) / h;
        let right = |h: f64| (p.envelope(knot + h).unwrap() - p.envelope(knot).unwrap()) / h;
        let exact = deriv(knot, 1e-13);
        let e1 = (left(1e-10) - exact)
            .norm()
            .max((right(1e-10) - exact).norm());
        let e2 = (left(0.5e-10) - exact)
            .norm()
            .max((right(0.5e-10) - exact).norm());
        assert!(
            e2 < 0.7 * e1,
            "one-sided differences should converge at first order: {e1} {e2}"
        );
    }

    #[test]
    fn pi_pulse_on_two_levels() {
        let params = DeviceParams::reference();
        let pulse = make_pi_pulse(0, &params, 152e-9, PulseFraction::Pi).unwrap();
        let d = pulse.constant_envelope().unwrap();
        let a = CMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0].map(|x| C64::new(x, 0.0)));
        let h = &a * d + a.adjoint() * d.conj();
        let u = crate::linalg::unitary_exp(&h, pulse.duration());
        assert!((1.0 - u[(1, 0)].norm_sqr()) < 1e-12);
        let half = make_pi_pulse(0, &params, 152e-9, PulseFraction::HalfPi).unwrap();
        assert!((half.duration() - 76e-9).abs() < 1e-20);
        let u = crate::linalg::unitary_exp(&h, half.duration());
        assert!((u[(1, 0)].norm_sqr() - 0.5).abs() < 1e-12);
        assert!(matches!(
            make_pi_pulse(2, &params, 1e-7, PulseFraction::Pi),
            Err(Error::InvalidTransition(2))
        ));
    }

    #[test]
    fn json_round_trip() {
        let p = two_carrier_pulse(21);
        let f = PulseFile::from(&p);
        assert!((f.duration_ns - 256.0).abs() < 1e-9);
        let text = serde_json::to_string(&f).unwrap();
        let back = Pulse::try_from(serde_json::from_str::<PulseFile>(&text).unwrap()).unwrap();
        assert_eq!(back.control, p.control);
        assert!((back.carriers[1] - p.carriers[1]).abs() < 1e-3);
    }
}
