//! Physical model of the transmon qudit: Hamiltonians in the lab and rotating
//! frames, Lindblad collapse operators and decoherence-time conversions.
//!
//! Angular frequencies (rad/s) and seconds are used throughout. The JSON file
//! format stores frequencies in Hz and is handled by [`DeviceParamsFile`].

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{positive, Error, Result};
use crate::linalg::{real, CMatrix};

pub const TWO_PI: f64 = 2.0 * PI;

/// Hz to rad/s.
pub fn hz(f: f64) -> f64 {
    TWO_PI * f
}

/// rad/s to Hz.
pub fn to_hz(omega: f64) -> f64 {
    omega / TWO_PI
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceParams {
    pub omega01: f64,
    pub omega12_bar: f64,
    /// Half splitting of the 1-2 transition caused by charge-parity flips.
    pub epsilon12: f64,
    pub omega23: f64,
    /// Decay times for levels 1..=3.
    pub t1: Vec<f64>,
    /// Pure dephasing times for levels 1..=3.
    pub t2: Vec<f64>,
    pub n_levels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Parity {
    Plus,
    Minus,
}

impl Parity {
    pub const BOTH: [Parity; 2] = [Parity::Plus, Parity::Minus];

    pub fn sign(self) -> f64 {
        match self {
            Parity::Plus => 1.0,
            Parity::Minus => -1.0,
        }
    }
}

impl DeviceParams {
    /// The characterized transmon used throughout the examples and tests:
    /// ω01/2π = 3.448646 GHz, ω∓12/2π = 3.240105 / 3.240403 GHz,
    /// T1 = (258.39, 100.79) µs and T2 = (38.44, 29.94) µs. The guard level
    /// (never characterized) gets ω23/2π = 3.005 GHz, T1,3 = 60 µs and
    /// T2,3 = 20 µs.
    pub fn reference() -> Self {
        let minus = hz(3.240105e9);
        let plus = hz(3.240403e9);
        Self {
            omega01: hz(3.448646e9),
            omega12_bar: 0.5 * (plus + minus),
            epsilon12: 0.5 * (plus - minus),
            omega23: hz(3.005e9),
            t1: vec![258.39e-6, 100.79e-6, 60e-6],
            t2: vec![38.44e-6, 29.94e-6, 20e-6],
            n_levels: 4,
        }
    }

    pub fn with_levels(mut self, n_levels: usize) -> Self {
        self.n_levels = n_levels;
        self
    }

    pub fn omega12(&self, parity: Parity) -> f64 {
        self.omega12_bar + parity.sign() * self.epsilon12
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.n_levels) {
            return Err(Error::InvalidLevels(self.n_levels));
        }
        for (what, v) in [
            ("omega01", self.omega01),
            ("omega12_bar", self.omega12_bar),
            ("omega23", self.omega23),
        ] {
            positive(what, v)?;
        }
        if self.epsilon12 < 0.0 || self.epsilon12.is_nan() {
            return Err(Error::OutOfRange {
                what: "epsilon12",
                value: self.epsilon12,
            });
        }
        let needed = self.n_levels - 1;
        for list in [&self.t1, &self.t2] {
            if list.len() < needed {
                return Err(Error::Dimension {
                    expected: needed,
                    found: list.len(),
                });
            }
        }
        for &t in self.t1.iter().chain(self.t2.iter()) {
            positive("decoherence time", t)?;
        }
        Ok(())
    }

    /// Decay and dephasing rates for the levels present in the model.
    pub fn rates(&self) -> Result<Rates> {
        let n = self.n_levels - 1;
        Ok(Rates {
            gamma1: gamma1_from_t1(&self.t1[..n])?,
            gamma2: gamma2_from_t2(&self.t2[..n])?,
        })
    }
}

/// Per-level decay rates γ1,k and dephasing rates γ2,k for k = 1..N-1.
#[derive(Clone, Debug, PartialEq)]
pub struct Rates {
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

impl Rates {
    pub fn zero(n_levels: usize) -> Self {
        Self {
            gamma1: vec![0.0; n_levels - 1],
            gamma2: vec![0.0; n_levels - 1],
        }
    }
}

/// γ1,k = 1/T1,k.
pub fn gamma1_from_t1(t1: &[f64]) -> Result<Vec<f64>> {
    t1.iter()
        .map(|&t| positive("T1", t).map(|t| 1.0 / t))
        .collect()
}

/// Dephasing rates from the recursion √γ2,k = √γ2,k−1 + √(2/T2,k), γ2,0 = 0.
pub fn gamma2_from_t2(t2: &[f64]) -> Result<Vec<f64>> {
    let mut root = 0.0;
    let mut out = Vec::with_capacity(t2.len());
    for &t in t2 {
        positive("T2", t)?;
        root += (2.0 / t).sqrt();
        out.push(root * root);
    }
    Ok(out)
}

/// Inverse of [`gamma2_from_t2`]: T2,k = 2 / (√γ2,k − √γ2,k−1)².
///
/// Both sign choices of the square root give the same coherence decay, so
/// the inversion does not care about the ordering of the rates.
pub fn t2_from_gamma2(gamma2: &[f64]) -> Vec<f64> {
    let mut prev = 0.0;
    gamma2
        .iter()
        .map(|&g| {
            let root = g.max(0.0).sqrt();
            let d = root - prev;
            prev = root;
            2.0 / (d * d)
        })
        .collect()
}

/// Combined decoherence time, 1/T2* = 1/(2 T1) + 1/T2.
pub fn t2star(t1: f64, t2: f64) -> Result<f64> {
    positive("T1", t1)?;
    positive("T2", t2)?;
    Ok(1.0 / (0.5 / t1 + 1.0 / t2))
}

/// Lowering operator with a[k, k+1] = √(k+1).
pub fn build_lowering(n_levels: usize) -> Result<CMatrix> {
    if n_levels < 2 {
        return Err(Error::InvalidLevels(n_levels));
    }
    let mut a = CMatrix::zeros(n_levels, n_levels);
    for k in 0..n_levels - 1 {
        a[(k, k + 1)] = real(((k + 1) as f64).sqrt());
    }
    Ok(a)
}

/// Level energies E_k (rad/s) for a given parity, lab frame, E_0 = 0.
pub fn level_energies(params: &DeviceParams, parity: Parity) -> Vec<f64> {
    let steps = [params.omega01, params.omega12(parity), params.omega23];
    let mut e = vec![0.0; params.n_levels];
    for k in 1..params.n_levels {
        e[k] = e[k - 1] + steps[k - 1];
    }
    e
}

/// Diagonal system Hamiltonian in the frame rotating at `omega_d`.
pub fn build_system_hamiltonian(
    params: &DeviceParams,
    parity: Parity,
    omega_d: f64,
) -> Result<CMatrix> {
    if !(3..=4).contains(&params.n_levels) {
        return Err(Error::InvalidLevels(params.n_levels));
    }
    if omega_d < 0.0 || omega_d.is_nan() {
        return Err(Error::OutOfRange {
            what: "omega_d",
            value: omega_d,
        });
    }
    Ok(diagonal_hamiltonian(
        &level_energies(params, parity),
        omega_d,
    ))
}

/// diag(E_k − k ω_d).
pub fn diagonal_hamiltonian(energies: &[f64], omega_d: f64) -> CMatrix {
    let n = energies.len();
    let mut h = CMatrix::zeros(n, n);
    for (k, &e) in energies.iter().enumerate() {
        h[(k, k)] = real(e - k as f64 * omega_d);
    }
    h
}

/// Collapse operators L1 = Σ √γ1,k |k−1⟩⟨k| and L2 = Σ √γ2,k |k⟩⟨k|.
pub fn collapse_operators(rates: &Rates) -> [CMatrix; 2] {
    let n = rates.gamma1.len() + 1;
    let mut l1 = CMatrix::zeros(n, n);
    let mut l2 = CMatrix::zeros(n, n);
    for k in 1..n {
        l1[(k - 1, k)] = real(rates.gamma1[k - 1].sqrt());
        l2[(k, k)] = real(rates.gamma2[k - 1].sqrt());
    }
    [l1, l2]
}

/// Everything needed to write down the Lindblad generator for one parity.
#[derive(Clone, Debug)]
pub struct HamiltonianSet {
    pub h_system: CMatrix,
    pub lowering: CMatrix,
    pub l1: CMatrix,
    pub l2: CMatrix,
}

impl HamiltonianSet {
    pub fn new(params: &DeviceParams, parity: Parity, omega_d: f64) -> Result<Self> {
        params.validate()?;
        let [l1, l2] = collapse_operators(&params.rates()?);
        Ok(Self {
            h_system: build_system_hamiltonian(params, parity, omega_d)?,
            lowering: build_lowering(params.n_levels)?,
            l1,
            l2,
        })
    }
}

/// JSON form of [`DeviceParams`]: frequencies in Hz, times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceParamsFile {
    pub omega01: f64,
    pub omega12_bar: f64,
    pub epsilon12: f64,
    pub omega23: f64,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub n_levels: usize,
}

impl From<&DeviceParams> for DeviceParamsFile {
    fn from(p: &DeviceParams) -> Self {
        Self {
            omega01: to_hz(p.omega01),
            omega12_bar: to_hz(p.omega12_bar),
            epsilon12: to_hz(p.epsilon12),
            omega23: to_hz(p.omega23),
            t1: p.t1.clone(),
            t2: p.t2.clone(),
            n_levels: p.n_levels,
        }
    }
}

impl TryFrom<DeviceParamsFile> for DeviceParams {
    type Error = Error;

    fn try_from(f: DeviceParamsFile) -> Result<Self> {
        let p = DeviceParams {
            omega01: hz(f.omega01),
            omega12_bar: hz(f.omega12_bar),
            epsilon12: hz(f.epsilon12),
            omega23: hz(f.omega23),
            t1: f.t1,
            t2: f.t2,
            n_levels: f.n_levels,
        };
        p.validate()?;
        Ok(p)
    }
}

impl Serialize for DeviceParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DeviceParamsFile::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DeviceParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = DeviceParamsFile::deserialize(d)?;
        DeviceParams::try_from(f).map_err(serde::de::Error::custom)
    }
}
