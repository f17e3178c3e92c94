//! Validation of a synthesized gate on the device: pulse tuning against the
//! transmission line, process tomography from gate-repetition populations,
//! and Monte Carlo gate and entanglement fidelities.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::DensityMatrix;
use crate::error::{Error, Result};
use crate::linalg::{CMatrix, CVector, C64};
use crate::optim::{levenberg_marquardt_with_jacobian, LmOptions};
use crate::pulses::{rescale, Pulse};
use crate::vdevice::VirtualDevice;

/// Dimension of the essential space the process acts on.
pub const DIM: usize = 3;
/// Number of process basis elements (DIM²).
pub const N_BASIS: usize = DIM * DIM;
/// Real parameters of the Cholesky factor.
pub const N_PARAMS: usize = N_BASIS * N_BASIS;

pub const BASIS_LABELS: [&str; N_BASIS] = [
    "I", "Z01", "Z12", "X01", "X12", "Y01", "Y12", "X01X12", "X12X01",
];

#[derive(Clone, Debug)]
pub struct ProcessBasis {
    b: Vec<CMatrix>,
    /// conj(B_n) ⊗ B_m at index m·9 + n.
    kron: Vec<CMatrix>,
    /// B_n† B_m at index m·9 + n.
    products: Vec<CMatrix>,
}

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Two-level Pauli on the (j, j+1) pair, identity on the remaining level.
fn embedded_pauli(j: usize, pauli: [[C64; 2]; 2]) -> CMatrix {
    let mut m = CMatrix::identity(DIM, DIM);
    for r in 0..2 {
        for s in 0..2 {
            m[(j + r, j + s)] = pauli[r][s];
        }
    }
    m
}

pub fn build_process_basis() -> ProcessBasis {
    let (o, l) = (c(0.0, 0.0), c(1.0, 0.0));
    let x = [[o, l], [l, o]];
    let y = [[o, c(0.0, -1.0)], [c(0.0, 1.0), o]];
    let z = [[l, o], [o, -l]];
    let x01 = embedded_pauli(0, x);
    let x12 = embedded_pauli(1, x);
    ProcessBasis::new(vec![
        CMatrix::identity(DIM, DIM),
        embedded_pauli(0, z),
        embedded_pauli(1, z),
        x01.clone(),
        x12.clone(),
        embedded_pauli(0, y),
        embedded_pauli(1, y),
        &x01 * &x12,
        &x12 * &x01,
    ])
}

impl ProcessBasis {
    fn new(b: Vec<CMatrix>) -> Self {
        let pairs = || (0..N_BASIS).flat_map(|m| (0..N_BASIS).map(move |n| (m, n)));
        let kron = pairs()
            .map(|(m, n)| crate::linalg::kron(&b[n].conjugate(), &b[m]))
            .collect();
        let products = pairs().map(|(m, n)| b[n].adjoint() * &b[m]).collect();
        Self { b, kron, products }
    }

    pub fn elements(&self) -> &[CMatrix] {
        &self.b
    }

    /// Gram matrix G_mn = Tr(B_m† B_n).
    pub fn gram(&self) -> CMatrix {
        CMatrix::from_fn(N_BASIS, N_BASIS, |m, n| {
            (self.b[m].adjoint() * &self.b[n]).trace()
        })
    }

    /// Coefficients u with Σ u_m B_m = `a`.
    pub fn decompose(&self, a: &CMatrix) -> Result<Vec<C64>> {
        if a.shape() != (DIM, DIM) {
            return Err(Error::Dimension {
                expected: DIM,
                found: a.nrows(),
            });
        }
        let cols = CMatrix::from_fn(N_BASIS, N_BASIS, |i, m| self.b[m][(i % DIM, i / DIM)]);
        let rhs = CVector::from_fn(N_BASIS, |i, _| a[(i % DIM, i / DIM)]);
        let sol = cols
            .lu()
            .solve(&rhs)
            .ok_or(Error::IllConditioned(f64::INFINITY))?;
        Ok(sol.iter().copied().collect())
    }

    /// vec(E(ρ)) = S vec(ρ) with S = Σ χ_mn conj(B_n) ⊗ B_m (column stacking).
    fn superoperator(&self, chi: &CMatrix) -> CMatrix {
        weighted_sum(&self.kron, chi, N_BASIS)
    }

    /// Σ χ_mn B_n† B_m − I.
    fn defect(&self, chi: &CMatrix) -> CMatrix {
        weighted_sum(&self.products, chi, DIM) - CMatrix::identity(DIM, DIM)
    }
}

fn weighted_sum(terms: &[CMatrix], chi: &CMatrix, dim: usize) -> CMatrix {
    let mut s = CMatrix::zeros(dim, dim);
    for m in 0..N_BASIS {
        for n in 0..N_BASIS {
            let w = chi[(m, n)];
            if w != c(0.0, 0.0) {
                s += &terms[m * N_BASIS + n] * w;
            }
        }
    }
    s
}

/// Process matrix χ = L(t)† L(t) with L lower triangular; the real parts
/// of L (diagonal included) come first, row by row, then the imaginary
/// parts of the strictly lower triangle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessMatrix {
    t: Vec<f64>,
}

fn lower_index(r: usize, s: usize) -> usize {
    r * (r + 1) / 2 + s
}

fn strict_index(r: usize, s: usize) -> usize {
    N_BASIS * (N_BASIS + 1) / 2 + r * (r - 1) / 2 + s
}

impl ProcessMatrix {
    pub fn from_params(t: Vec<f64>) -> Result<Self> {
        if t.len() != N_PARAMS {
            return Err(Error::Dimension {
                expected: N_PARAMS,
                found: t.len(),
            });
        }
        Ok(Self { t })
    }

    pub fn params(&self) -> &[f64] {
        &self.t
    }

    /// The identity process, χ = e₀e₀ᵀ.
    pub fn identity() -> Self {
        let mut t = vec![0.0; N_PARAMS];
        t[0] = 1.0;
        Self { t }
    }

    /// Rank-one χ = u u† of the unitary Σ u_m B_m, placed in the last row of L.
    pub fn from_unitary(u: &CMatrix, basis: &ProcessBasis) -> Result<Self> {
        let mut coef = basis.decompose(u)?;
        // χ is unchanged by a global phase; use it to make the diagonal entry real
        let last = coef[N_BASIS - 1];
        if last.norm() > 0.0 {
            let phase = last.conj() / last.norm();
            coef.iter_mut().for_each(|z| *z *= phase);
        }
        let mut t = vec![0.0; N_PARAMS];
        let r = N_BASIS - 1;
        for (s, z) in coef.iter().enumerate() {
            let l = z.conj();
            t[lower_index(r, s)] = l.re;
            if s < r {
                t[strict_index(r, s)] = l.im;
            }
        }
        Ok(Self { t })
    }

    pub fn cholesky_factor(&self) -> CMatrix {
        let mut l = CMatrix::zeros(N_BASIS, N_BASIS);
        for r in 0..N_BASIS {
            for s in 0..=r {
                let im = if s < r {
                    self.t[strict_index(r, s)]
                } else {
                    0.0
                };
                l[(r, s)] = c(self.t[lower_index(r, s)], im);
            }
        }
        l
    }

    pub fn chi(&self) -> CMatrix {
        let l = self.cholesky_factor();
        l.adjoint() * l
    }

    /// Σ χ_mn B_n† B_m − I; zero exactly when E_χ preserves the trace.
    pub fn completion_defect(&self, basis: &ProcessBasis) -> CMatrix {
        completion_defect(&self.chi(), basis)
    }

    pub fn completion_residual(&self, basis: &ProcessBasis) -> f64 {
        self.completion_defect(basis).norm()
    }
}

/// Σ χ_mn B_n† B_m − I, the trace-preservation defect of E_χ.
fn completion_defect(chi: &CMatrix, basis: &ProcessBasis) -> CMatrix {
    basis.defect(chi)
}

/// E_χ(ρ) = Σ χ_mn B_m ρ B_n†.
pub fn apply_process(
    chi: &CMatrix,
    basis: &ProcessBasis,
    rho: &DensityMatrix,
) -> Result<DensityMatrix> {
    if rho.dim() != DIM || chi.shape() != (N_BASIS, N_BASIS) {
        return Err(Error::Dimension {
            expected: DIM,
            found: rho.dim(),
        });
    }
    let r = rho.matrix();
    let mut out = CMatrix::zeros(DIM, DIM);
    for m in 0..N_BASIS {
        let left = &basis.b[m] * r;
        for n in 0..N_BASIS {
            let w = chi[(m, n)];
            if w != c(0.0, 0.0) {
                out += &left * basis.b[n].adjoint() * w;
            }
        }
    }
    Ok(DensityMatrix::from_vec(&crate::linalg::vec_cols(&out), DIM))
}

/// Populations after 1..=n_reps applications, indexed `[init][rep][level]`.
pub fn predicted_populations(
    chi: &CMatrix,
    basis: &ProcessBasis,
    n_reps: usize,
) -> Vec<Vec<[f64; DIM]>> {
    let s = basis.superoperator(chi);
    (0..DIM)
        .map(|k| {
            let mut v = CVector::zeros(N_BASIS);
            v[k * DIM + k] = c(1.0, 0.0);
            (0..n_reps)
                .map(|_| {
                    v = &s * &v;
                    std::array::from_fn(|j| v[j * DIM + j].re)
                })
                .collect()
        })
        .collect()
}

/// Measured populations `[init][rep][level]` for initial states |0⟩, |1⟩, |2⟩
/// and repetitions 1..=N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionData {
    pub pops: Vec<Vec<[f64; DIM]>>,
}

impl RepetitionData {
    pub fn new(pops: Vec<Vec<[f64; DIM]>>) -> Result<Self> {
        if pops.len() != DIM {
            return Err(Error::Dimension {
                expected: DIM,
                found: pops.len(),
            });
        }
        let n = pops[0].len();
        if n == 0 {
            return Err(Error::InsufficientData("no repetitions".into()));
        }
        if let Some(bad) = pops.iter().find(|p| p.len() != n) {
            return Err(Error::Dimension {
                expected: n,
                found: bad.len(),
            });
        }
        Ok(Self { pops })
    }

    pub fn n_reps(&self) -> usize {
        self.pops[0].len()
    }

    /// Gate-repetition experiments from |0⟩, |1⟩ and |2⟩ on the device.
    pub fn measure(
        device: &mut VirtualDevice,
        pulse: &Pulse,
        n_reps: usize,
        n_shots: usize,
    ) -> Result<Self> {
        let pops = (0..DIM)
            .map(|k| {
                let data = device.run_gate_repetition(pulse, k, n_reps, n_shots)?;
                Ok(data
                    .pops
                    .iter()
                    .map(|row| std::array::from_fn(|j| row[j]))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Self::new(pops)
    }

    /// Noise-free populations averaged over the two parities.
    pub fn exact(device: &VirtualDevice, pulse: &Pulse, n_reps: usize) -> Result<Self> {
        let pops = (0..DIM)
            .map(|k| {
                let [plus, minus] = device.gate_populations(pulse, k, n_reps)?;
                Ok(plus
                    .iter()
                    .zip(&minus)
                    .map(|(p, m)| std::array::from_fn(|j| 0.5 * (p[j] + m[j])))
                    .collect())
            })
            .collect::<Result<_>>()?;
        Self::new(pops)
    }

    /// Populations generated by a known process.
    pub fn from_process(chi: &CMatrix, basis: &ProcessBasis, n_reps: usize) -> Self {
        Self {
            pops: predicted_populations(chi, basis, n_reps),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitChiConfig {
    pub max_iter: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Target Frobenius norm of the completion defect.
    pub tolerance: f64,
    pub max_stages: usize,
    /// Scale of the random perturbation added to the initial parameters.
    pub init_noise: f64,
    /// Levenberg–Marquardt damping floor relative to the stiffest direction.
    pub damping_floor: f64,
    pub seed: u64,
}

impl Default for FitChiConfig {
    fn default() -> Self {
        Self {
            max_iter: 500,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            tolerance: 1e-6,
            max_stages: 14,
            init_noise: 1e-5,
            damping_floor: 1e-6,
            seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiFit {
    pub process: ProcessMatrix,
    /// Σ (P_model − P_data)².
    pub sse: f64,
    pub completion_residual: f64,
    pub penalty: f64,
    pub stages: usize,
    pub converged: bool,
}

/// Population mismatches followed by √penalty times the real and imaginary
/// parts of the completion defect.
fn chi_residuals(t: &[f64], data: &RepetitionData, basis: &ProcessBasis, penalty: f64) -> Vec<f64> {
    let chi = ProcessMatrix { t: t.to_vec() }.chi();
    let pred = predicted_populations(&chi, basis, data.n_reps());
    let mut r: Vec<f64> = pred
        .iter()
        .flatten()
        .zip(data.pops.iter().flatten())
        .flat_map(|(p, q)| p.iter().zip(q).map(|(a, b)| a - b).collect::<Vec<_>>())
        .collect();
    let w = penalty.sqrt();
    for z in completion_defect(&chi, basis).iter() {
        r.push(w * z.re);
        r.push(w * z.im);
    }
    r
}

/// Row, column and unit (1 or i) of the Cholesky entry parameter `p` moves.
fn param_position(p: usize) -> (usize, usize, C64) {
    let tri = N_BASIS * (N_BASIS + 1) / 2;
    let (q, strict) = if p < tri { (p, false) } else { (p - tri, true) };
    let mut r = 0;
    let row_len = |r: usize| if strict { r } else { r + 1 };
    let mut start = 0;
    while start + row_len(r) <= q {
        start += row_len(r);
        r += 1;
    }
    (r, q - start, if strict { c(0.0, 1.0) } else { c(1.0, 0.0) })
}

/// Jacobian of [`chi_residuals`], propagating tangents of S through the
/// repetitions alongside the states themselves.
fn chi_jacobian(
    t: &[f64],
    data: &RepetitionData,
    basis: &ProcessBasis,
    penalty: f64,
) -> DMatrix<f64> {
    let n_reps = data.n_reps();
    let l = ProcessMatrix { t: t.to_vec() }.cholesky_factor();
    let s = basis.superoperator(&(l.adjoint() * &l));
    let states: Vec<Vec<CVector>> = (0..DIM)
        .map(|k| {
            let mut v = CVector::zeros(N_BASIS);
            v[k * DIM + k] = c(1.0, 0.0);
            (0..n_reps)
                .map(|_| {
                    let prev = v.clone();
                    v = &s * &v;
                    prev
                })
                .collect()
        })
        .collect();
    let n_pop = DIM * n_reps * DIM;
    let w = penalty.sqrt();
    let mut jac = DMatrix::zeros(n_pop + 2 * DIM * DIM, N_PARAMS);
    for p in 0..N_PARAMS {
        let (r, col, unit) = param_position(p);
        // dχ = M + M† with M = L† dL, nonzero only in column `col`
        let mut m = CMatrix::zeros(N_BASIS, N_BASIS);
        for i in 0..N_BASIS {
            m[(i, col)] = l[(r, i)].conj() * unit;
        }
        let dchi = &m + m.adjoint();
        let ds = basis.superoperator(&dchi);
        for (k, traj) in states.iter().enumerate() {
            let mut dv = CVector::zeros(N_BASIS);
            for (n, v) in traj.iter().enumerate() {
                dv = &s * &dv + &ds * v;
                for j in 0..DIM {
                    jac[((k * n_reps + n) * DIM + j, p)] = dv[j * DIM + j].re;
                }
            }
        }
        let dd = weighted_sum(&basis.products, &dchi, DIM);
        for (i, z) in dd.iter().enumerate() {
            jac[(n_pop + 2 * i, p)] = w * z.re;
            jac[(n_pop + 2 * i + 1, p)] = w * z.im;
        }
    }
    jac
}

fn sse(t: &[f64], data: &RepetitionData, basis: &ProcessBasis) -> f64 {
    chi_residuals(t, data, basis, 0.0)
        .iter()
        .map(|v| v * v)
        .sum()
}

/// Fits χ to gate-repetition populations subject to the completion
/// condition, enforced by a quadratic penalty whose weight grows until the
/// defect is below the tolerance.
///
/// The search starts from `init` (typically the rank-one χ of the target
/// gate) plus a small random full-rank perturbation; an exactly rank
/// deficient factor has zero gradient in its empty rows.
pub fn fit_chi(
    data: &RepetitionData,
    basis: &ProcessBasis,
    init: &ProcessMatrix,
    cfg: &FitChiConfig,
) -> Result<ChiFit> {
    RepetitionData::new(data.pops.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut t: Vec<f64> = init
        .t
        .iter()
        .map(|v| v + cfg.init_noise * rng.random_range(-1.0..=1.0))
        .collect();
    let opts = LmOptions {
        max_iter: cfg.max_iter,
        damping_floor: cfg.damping_floor,
        ..Default::default()
    };
    let mut penalty = cfg.initial_penalty;
    let mut stages = 0;
    let mut residual = f64::INFINITY;
    while stages < cfg.max_stages {
        stages += 1;
        let res = levenberg_marquardt_with_jacobian(
            |x| chi_residuals(x, data, basis, penalty),
            |x, _| chi_jacobian(x, data, basis, penalty),
            &t,
            &opts,
        );
        t = res.x;
        residual = ProcessMatrix { t: t.clone() }.completion_residual(basis);
        if residual <= cfg.tolerance {
            break;
        }
        penalty *= cfg.penalty_growth;
    }
    let sse = sse(&t, data, basis);
    Ok(ChiFit {
        process: ProcessMatrix { t },
        sse,
        completion_residual: residual,
        penalty,
        stages,
        converged: residual <= cfg.tolerance,
    })
}

/// Haar-random pure state: a normalized complex Gaussian vector.
pub fn haar_state<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CVector {
    let v = CVector::from_fn(d, |_, _| {
        c(StandardNormal.sample(rng), StandardNormal.sample(rng))
    });
    let norm = v.norm();
    v / c(norm, 0.0)
}

/// Random density matrix: a mixture of three Haar pure states with
/// uniformly distributed (flat Dirichlet) weights.
pub fn random_density<R: Rng + ?Sized>(d: usize, rng: &mut R) -> CMatrix {
    let w: Vec<f64> = (0..3)
        .map(|_| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln())
        .collect();
    let total: f64 = w.iter().sum();
    let mut rho = CMatrix::zeros(d, d);
    for wi in w {
        let psi = haar_state(d, rng);
        rho += &psi * psi.adjoint() * c(wi / total, 0.0);
    }
    rho
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// Average of ⟨ψ|U† E(|ψ⟩⟨ψ|) U|ψ⟩ over Haar-random |ψ⟩.
    pub gate: f64,
    pub gate_stderr: f64,
    /// Average of Σ χ_mn Tr(U† B_m ρ) Tr(ρ B_n† U) over random mixed ρ.
    pub entanglement: f64,
    pub entanglement_stderr: f64,
    pub n_samples: usize,
}

fn mean_and_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// State-averaged gate fidelity and entanglement fidelity of E_χ against
/// the unitary `u`, each from `n_samples` random states.
pub fn gate_and_entanglement_fidelity(
    chi: &CMatrix,
    basis: &ProcessBasis,
    u: &CMatrix,
    n_samples: usize,
    seed: u64,
) -> Result<FidelityReport> {
    if n_samples == 0 {
        return Err(Error::OutOfRange {
            what: "n_samples",
            value: 0.0,
        });
    }
    if u.shape() != (DIM, DIM) {
        return Err(Error::Dimension {
            expected: DIM,
            found: u.nrows(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ud = u.adjoint();
    let gate: Vec<f64> = (0..n_samples)
        .map(|_| {
            let psi = haar_state(DIM, &mut rng);
            let rho = &psi * psi.adjoint();
            let out = apply_process(
                chi,
                basis,
                &DensityMatrix::from_vec(&crate::linalg::vec_cols(&rho), DIM),
            )
            .expect("dimensions checked");
            let phi = u * &psi;
            (phi.adjoint() * out.matrix() * phi)[(0, 0)]
                .re
                .clamp(0.0, 1.0)
        })
        .collect();
    let ub: Vec<CMatrix> = basis.b.iter().map(|b| &ud * b).collect();
    let ent: Vec<f64> = (0..n_samples)
        .map(|_| {
            let rho = random_density(DIM, &mut rng);
            let a: Vec<C64> = ub.iter().map(|m| (m * &rho).trace()).collect();
            let mut f = c(0.0, 0.0);
            for m in 0..N_BASIS {
                for n in 0..N_BASIS {
                    f += chi[(m, n)] * a[m] * a[n].conj();
                }
            }
            f.re.clamp(0.0, 1.0)
        })
        .collect();
    let (g, gs) = mean_and_stderr(&gate);
    let (e, es) = mean_and_stderr(&ent);
    Ok(FidelityReport {
        gate: g,
        gate_stderr: gs,
        entanglement: e,
        entanglement_stderr: es,
        n_samples,
    })
}

/// The 0↔2 SWAP on three levels.
pub fn swap02_unitary() -> CMatrix {
    let mut u = CMatrix::zeros(DIM, DIM);
    u[(2, 0)] = c(1.0, 0.0);
    u[(1, 1)] = c(1.0, 0.0);
    u[(0, 2)] = c(1.0, 0.0);
    u
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub n_reps: usize,
    /// Shots per grid point; `None` uses the exact populations.
    pub n_shots: Option<usize>,
    pub min_population: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            n_reps: 15,
            n_shots: Some(20_000),
            min_population: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunePoint {
    pub r: f64,
    pub a: f64,
    pub population: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub r_c: f64,
    pub a_c: f64,
    pub population: f64,
    pub pulse: Pulse,
    /// Best amplitude and its population for every r.
    pub per_r: Vec<TunePoint>,
}

fn population_after(device: &mut VirtualDevice, pulse: &Pulse, cfg: &TuneConfig) -> Result<f64> {
    match cfg.n_shots {
        Some(shots) => {
            let data = device.run_gate_repetition(pulse, 0, cfg.n_reps, shots)?;
            Ok(data.pops.last().map_or(0.0, |row| row[2]))
        }
        None => {
            let [plus, minus] = device.gate_populations(pulse, 0, cfg.n_reps)?;
            Ok(0.5 * (plus.last().map_or(0.0, |p| p[2]) + minus.last().map_or(0.0, |p| p[2])))
        }
    }
}

/// For every r, the amplitude on `a_grid` maximizing the |2⟩ population
/// after `n_reps` gates from |0⟩; returns the best (r, A_r) overall.
pub fn tune_pulse(
    device: &mut VirtualDevice,
    pulse: &Pulse,
    r_grid: &[f64],
    a_grid: &[f64],
    cfg: &TuneConfig,
) -> Result<TuneResult> {
    if r_grid.is_empty() || a_grid.is_empty() {
        return Err(Error::InsufficientData("empty tuning grid".into()));
    }
    if pulse.carriers.len() != 2 {
        return Err(Error::CarrierCount {
            expected: 2,
            found: pulse.carriers.len(),
        });
    }
    let mut per_r = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let mut best = TunePoint {
            r,
            a: a_grid[0],
            population: f64::NEG_INFINITY,
        };
        for &a in a_grid {
            let p = population_after(device, &rescale(pulse, r, a)?, cfg)?;
            if p > best.population {
                best = TunePoint {
                    r,
                    a,
                    population: p,
                };
            }
        }
        per_r.push(best);
    }
    let best = per_r
        .iter()
        .max_by(|x, y| x.population.total_cmp(&y.population))
        .cloned()
        .expect("grid is nonempty");
    if best.population < cfg.min_population {
        return Err(Error::TuningFailed(best.population));
    }
    Ok(TuneResult {
        r_c: best.r,
        a_c: best.a,
        population: best.population,
        pulse: rescale(pulse, best.r, best.a)?,
        per_r,
    })
}

/// One zoom level of [`tune_pulse_auto`]: a grid spanning the given relative
/// half widths around the previous optimum, scored after `n_reps` gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneStage {
    pub half_width_r: f64,
    pub half_width_a: f64,
    pub points: (usize, usize),
    pub n_reps: usize,
}

/// Successively finer tuning grids.
///
/// n repetitions of a gate whose rotation is off by a relative δ return the
/// population to |2⟩ whenever nδ is an even integer, so the score after n
/// gates has side maxima about 2/n away from the compensating point. Each
/// stage therefore stays inside the main lobe of its own repetition count:
/// few repetitions on the coarse grid, `tune.n_reps` only in the last
/// stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoTuneConfig {
    pub r_range: (f64, f64),
    pub a_range: (f64, f64),
    pub coarse_points: (usize, usize),
    pub coarse_reps: usize,
    pub stages: Vec<TuneStage>,
    /// Shots, failure threshold and the repetition count reported as the
    /// tuned population.
    pub tune: TuneConfig,
}

impl Default for AutoTuneConfig {
    fn default() -> Self {
        let stage = |hr, ha, points, n_reps| TuneStage {
            half_width_r: hr,
            half_width_a: ha,
            points,
            n_reps,
        };
        Self {
            r_range: (0.5, 2.0),
            a_range: (0.8, 1.2),
            coarse_points: (16, 9),
            coarse_reps: 3,
            stages: vec![stage(0.08, 0.04, (9, 9), 7), stage(0.03, 0.015, (9, 9), 15)],
            tune: TuneConfig::default(),
        }
    }
}

fn geomspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![(lo * hi).sqrt()];
    }
    (0..n)
        .map(|j| lo * (hi / lo).powf(j as f64 / (n - 1) as f64))
        .collect()
}

fn around(center: f64, half: f64, n: usize) -> Vec<f64> {
    crate::characterize::calibrate::linspace(center * (1.0 - half), center * (1.0 + half), n)
}

pub fn tune_pulse_auto(
    device: &mut VirtualDevice,
    pulse: &Pulse,
    cfg: &AutoTuneConfig,
) -> Result<TuneResult> {
    let coarse = TuneConfig {
        n_reps: cfg.coarse_reps,
        ..cfg.tune.clone()
    };
    let r_grid = geomspace(cfg.r_range.0, cfg.r_range.1, cfg.coarse_points.0);
    let a_grid =
        crate::characterize::calibrate::linspace(cfg.a_range.0, cfg.a_range.1, cfg.coarse_points.1);
    let mut result = tune_pulse(device, pulse, &r_grid, &a_grid, &coarse)?;
    for stage in &cfg.stages {
        let r_grid = around(result.r_c, stage.half_width_r, stage.points.0);
        let a_grid = around(result.a_c, stage.half_width_a, stage.points.1);
        let tune = TuneConfig {
            n_reps: stage.n_reps,
            ..cfg.tune.clone()
        };
        result = tune_pulse(device, pulse, &r_grid, &a_grid, &tune)?;
    }
    Ok(result)
}

/// χ fit and fidelities of a gate from repetition data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub fit: ChiFit,
    pub fidelity: FidelityReport,
    pub chi_re: Vec<Vec<f64>>,
    pub chi_im: Vec<Vec<f64>>,
}

/// Fits χ to `data` starting from the target's process and estimates both
/// fidelities against the target.
pub fn validate_process(
    data: &RepetitionData,
    target: &CMatrix,
    n_samples: usize,
    fit_cfg: &FitChiConfig,
    seed: u64,
) -> Result<ValidationReport> {
    let basis = build_process_basis();
    let init = ProcessMatrix::from_unitary(target, &basis)?;
    let fit = fit_chi(data, &basis, &init, fit_cfg)?;
    let chi = fit.process.chi();
    let fidelity = gate_and_entanglement_fidelity(&chi, &basis, target, n_samples, seed)?;
    let rows = |f: fn(&C64) -> f64| -> Vec<Vec<f64>> {
        (0..N_BASIS)
            .map(|m| (0..N_BASIS).map(|n| f(&chi[(m, n)])).collect())
            .collect()
    };
    Ok(ValidationReport {
        fit,
        fidelity,
        chi_re: rows(|z| z.re),
        chi_im: rows(|z| z.im),
    })
}

/// Matrix S of E_χ acting on column-stacked density matrices.
pub fn process_superoperator(chi: &CMatrix, basis: &ProcessBasis) -> CMatrix {
    basis.superoperator(chi)
}

/// Depolarizing mixture (1 − p) U·U† + p I/d as a χ matrix.
pub fn depolarized_unitary_chi(u: &CMatrix, p: f64, basis: &ProcessBasis) -> Result<CMatrix> {
    let coef = basis.decompose(u)?;
    let unitary = CMatrix::from_fn(N_BASIS, N_BASIS, |m, n| coef[m] * coef[n].conj());
    // I Tr(ρ)/d = (1/d) Σ_ij E_ij ρ E_ij† with matrix units E_ij, each
    // expanded in B.
    let units: Vec<CMatrix> = (0..N_BASIS)
        .map(|i| {
            let mut e = CMatrix::zeros(DIM, DIM);
            e[(i % DIM, i / DIM)] = c(1.0, 0.0);
            e
        })
        .collect();
    let mut depol = CMatrix::zeros(N_BASIS, N_BASIS);
    for e in &units {
        let a = basis.decompose(e)?;
        depol += CMatrix::from_fn(N_BASIS, N_BASIS, |m, n| a[m] * a[n].conj())
            * c(1.0 / DIM as f64, 0.0);
    }
    Ok(unitary * c(1.0 - p, 0.0) + depol * c(p, 0.0))
}
