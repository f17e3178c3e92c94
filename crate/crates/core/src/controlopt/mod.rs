//! Gate synthesis by optimal control of B-spline carrier-wave pulses.
//!
//! The objective is J = J1 + J2 with the gate infidelity
//! J1 = 1 − |Tr(V† U(T))|² / d_E² and the time-averaged guard population
//! J2 = (1/T) ∫ Re Tr(U† W U) dt. Propagation uses the exponential
//! midpoint rule and the gradient is the exact discrete adjoint of it.
//! Only the essential columns of U are propagated.

mod quadrature;

pub use quadrature::{gauss_rule_from_samples, tensor_rule, QuadratureRule};

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{positive, Error, Result};
use crate::linalg::{CMatrix, C64};
use crate::optim::{minimize_box, BoxOptions};
use crate::pulses::{BSplineBasis, ControlVector, Pulse};
use crate::qmodel::{hz, level_energies, DeviceParams, Parity};

const UNITARY_TOL: f64 = 1e-12;

/// Target unitary on the essential subspace, stored embedded as the first
/// `d_e` columns of an N×N matrix with zero guard rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTarget {
    v: CMatrix,
    d_e: usize,
    pub duration: f64,
}

impl GateTarget {
    pub fn new(v_essential: CMatrix, n_levels: usize, duration: f64) -> Result<Self> {
        let d_e = v_essential.nrows();
        if v_essential.ncols() != d_e {
            return Err(Error::Dimension {
                expected: d_e,
                found: v_essential.ncols(),
            });
        }
        if d_e == 0 || n_levels < d_e {
            return Err(Error::InvalidLevels(n_levels));
        }
        positive("gate duration", duration)?;
        let defect = crate::linalg::unitarity_defect(&v_essential);
        if defect > UNITARY_TOL {
            return Err(Error::OutOfRange {
                what: "target unitarity defect",
                value: defect,
            });
        }
        let mut v = CMatrix::zeros(n_levels, d_e);
        v.view_mut((0, 0), (d_e, d_e)).copy_from(&v_essential);
        Ok(Self { v, d_e, duration })
    }

    /// |0⟩ ↔ |2⟩ exchange on three essential levels.
    pub fn swap02(n_levels: usize, duration: f64) -> Result<Self> {
        let one = C64::new(1.0, 0.0);
        let mut v = CMatrix::zeros(3, 3);
        v[(2, 0)] = one;
        v[(1, 1)] = one;
        v[(0, 2)] = one;
        Self::new(v, n_levels, duration)
    }

    pub fn identity(d_e: usize, n_levels: usize, duration: f64) -> Result<Self> {
        Self::new(CMatrix::identity(d_e, d_e), n_levels, duration)
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn n_levels(&self) -> usize {
        self.v.nrows()
    }

    /// N × d_E embedding of the target.
    pub fn embedded(&self) -> &CMatrix {
        &self.v
    }

    pub fn essential(&self) -> CMatrix {
        self.v.rows(0, self.d_e).into_owned()
    }
}

/// Diagonal guard weights, zero on the essential levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuardWeights {
    diag: Vec<f64>,
}

impl GuardWeights {
    pub fn new(diag: Vec<f64>, d_e: usize) -> Result<Self> {
        if d_e > diag.len() {
            return Err(Error::Dimension {
                expected: d_e,
                found: diag.len(),
            });
        }
        if let Some(&w) = diag[..d_e].iter().find(|w| **w != 0.0) {
            return Err(Error::OutOfRange {
                what: "essential-level guard weight",
                value: w,
            });
        }
        if let Some(&w) = diag.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::OutOfRange {
                what: "guard weight",
                value: w,
            });
        }
        Ok(Self { diag })
    }

    /// Weight one on every guard level.
    pub fn unit(n_levels: usize, d_e: usize) -> Result<Self> {
        Self::new(
            (0..n_levels)
                .map(|k| if k < d_e { 0.0 } else { 1.0 })
                .collect(),
            d_e,
        )
    }

    pub fn zero(n_levels: usize) -> Self {
        Self {
            diag: vec![0.0; n_levels],
        }
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    fn is_zero(&self) -> bool {
        self.diag.iter().all(|w| *w == 0.0)
    }

    /// Re Tr(U† W U).
    fn weighted_norm(&self, u: &CMatrix) -> f64 {
        let mut s = 0.0;
        for c in 0..u.ncols() {
            for (r, w) in self.diag.iter().enumerate() {
                if *w != 0.0 {
                    s += w * u[(r, c)].norm_sqr();
                }
            }
        }
        s
    }
}

/// 1 − |Tr(V† U_ess)/d_E|², where U_ess are the first d_E columns of `u`.
pub fn infidelity(u: &CMatrix, target: &GateTarget) -> Result<f64> {
    let n = target.n_levels();
    let d = target.d_e;
    if u.nrows() != n {
        return Err(Error::Dimension {
            expected: n,
            found: u.nrows(),
        });
    }
    if u.ncols() < d {
        return Err(Error::Dimension {
            expected: d,
            found: u.ncols(),
        });
    }
    let tau = trace_overlap(&target.v, u);
    Ok((1.0 - tau.norm_sqr() / (d * d) as f64).clamp(0.0, 1.0))
}

/// Tr(V† U) over the columns of V.
fn trace_overlap(v: &CMatrix, u: &CMatrix) -> C64 {
    let mut tau = C64::new(0.0, 0.0);
    for c in 0..v.ncols() {
        for r in 0..v.nrows() {
            tau += v[(r, c)].conj() * u[(r, c)];
        }
    }
    tau
}

/// Trapezoid-rule time average of Re Tr(U† W U) over a uniformly sampled
/// trajectory spanning [0, t_g].
pub fn guard_penalty(trajectory: &[CMatrix], weights: &GuardWeights, t_g: f64) -> Result<f64> {
    positive("gate duration", t_g)?;
    let Some(first) = trajectory.first() else {
        return Err(Error::InsufficientData("empty trajectory".into()));
    };
    if first.nrows() != weights.diag.len() {
        return Err(Error::Dimension {
            expected: weights.diag.len(),
            found: first.nrows(),
        });
    }
    let m = trajectory.len() - 1;
    if m == 0 {
        return Ok(weights.weighted_norm(first));
    }
    let dt = t_g / m as f64;
    Ok(trajectory
        .iter()
        .enumerate()
        .map(|(j, u)| trapezoid_weight(j, m) * dt / t_g * weights.weighted_norm(u))
        .sum())
}

fn trapezoid_weight(j: usize, m: usize) -> f64 {
    if j == 0 || j == m {
        0.5
    } else {
        1.0
    }
}

/// Infidelity and guard terms of the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub j1: f64,
    pub j2: f64,
}

impl ObjectiveValue {
    pub fn total(&self) -> f64 {
        self.j1 + self.j2
    }
}

/// Basis values and carrier phases at one propagation midpoint.
#[derive(Clone, Debug)]
struct StepGrid {
    first: usize,
    vals: [f64; 3],
    phases: Vec<C64>,
}

/// Everything fixed during an optimization: target, guard weights, pulse
/// parameterization and time grid.
#[derive(Clone, Debug)]
pub struct ControlProblem {
    pub target: GateTarget,
    pub weights: GuardWeights,
    pub basis: BSplineBasis,
    /// Carrier frequencies in the rotating frame (rad/s).
    pub carriers: Vec<f64>,
    /// Frame (drive) frequency ω_d.
    pub drive_freq: f64,
    n_steps: usize,
    grid: Vec<StepGrid>,
}

/// Spline coefficients per carrier used for the SWAP gates.
pub const DEFAULT_N_COEFFS: usize = 10;
/// Propagation steps over the gate.
pub const DEFAULT_N_STEPS: usize = 4096;

impl ControlProblem {
    pub fn new(
        target: GateTarget,
        weights: GuardWeights,
        n_coeffs: usize,
        carriers: Vec<f64>,
        drive_freq: f64,
        n_steps: usize,
    ) -> Result<Self> {
        if weights.diag.len() != target.n_levels() {
            return Err(Error::Dimension {
                expected: target.n_levels(),
                found: weights.diag.len(),
            });
        }
        if n_steps == 0 {
            return Err(Error::OutOfRange {
                what: "n_steps",
                value: 0.0,
            });
        }
        if carriers.is_empty() {
            return Err(Error::CarrierCount {
                expected: 1,
                found: 0,
            });
        }
        let basis = BSplineBasis::new(n_coeffs, target.duration)?;
        let dt = target.duration / n_steps as f64;
        let grid = (0..n_steps)
            .map(|n| {
                let t = (n as f64 + 0.5) * dt;
                let (first, vals) = basis.nonzero(t)?;
                let phases = carriers
                    .iter()
                    .map(|w| C64::from_polar(1.0, w * t))
                    .collect();
                Ok(StepGrid {
                    first,
                    vals,
                    phases,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            target,
            weights,
            basis,
            carriers,
            drive_freq,
            n_steps,
            grid,
        })
    }

    /// SWAP02 with one guard level: frame at ω01, carriers at 0 and
    /// ω̄12 − ω01, unit guard weight.
    pub fn swap02(params: &DeviceParams, duration: f64, n_steps: usize) -> Result<Self> {
        let target = GateTarget::swap02(params.n_levels, duration)?;
        let weights = GuardWeights::unit(params.n_levels, 3)?;
        let carriers = vec![0.0, params.omega12_bar - params.omega01];
        Self::new(
            target,
            weights,
            DEFAULT_N_COEFFS,
            carriers,
            params.omega01,
            n_steps,
        )
    }

    pub fn n_levels(&self) -> usize {
        self.target.n_levels()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_params(&self) -> usize {
        2 * self.carriers.len() * self.basis.n_coeffs()
    }

    pub fn zero_control(&self) -> ControlVector {
        ControlVector::zeros(self.carriers.len(), self.basis.n_coeffs())
    }

    pub fn control_from_flat(&self, flat: &[f64]) -> Result<ControlVector> {
        ControlVector::from_flat(flat, self.carriers.len(), self.basis.n_coeffs())
    }

    pub fn pulse(&self, alpha: &ControlVector) -> Result<Pulse> {
        Pulse::new(
            self.basis.clone(),
            self.carriers.clone(),
            alpha.clone(),
            self.drive_freq,
        )
    }

    /// Diagonal of the rotating-frame system Hamiltonian for `params`.
    pub fn frame_energies(&self, params: &DeviceParams) -> Result<Vec<f64>> {
        if params.n_levels != self.n_levels() {
            return Err(Error::InvalidLevels(params.n_levels));
        }
        let e = level_energies(
            &DeviceParams {
                epsilon12: 0.0,
                ..params.clone()
            },
            Parity::Plus,
        );
        Ok(e.iter()
            .enumerate()
            .map(|(k, e)| e - k as f64 * self.drive_freq)
            .collect())
    }

    fn check_control(&self, alpha: &ControlVector) -> Result<()> {
        if alpha.n_carriers() != self.carriers.len() || alpha.alpha_q.len() != self.carriers.len() {
            return Err(Error::CarrierCount {
                expected: self.carriers.len(),
                found: alpha.n_carriers(),
            });
        }
        for row in alpha.alpha_p.iter().chain(&alpha.alpha_q) {
            if row.len() != self.basis.n_coeffs() {
                return Err(Error::Dimension {
                    expected: self.basis.n_coeffs(),
                    found: row.len(),
                });
            }
        }
        Ok(())
    }

    fn envelope(&self, alpha: &ControlVector, step: &StepGrid) -> C64 {
        let nb = self.basis.n_coeffs();
        let mut d = C64::new(0.0, 0.0);
        for (k, phase) in step.phases.iter().enumerate() {
            let (mut p, mut q) = (0.0, 0.0);
            for (j, v) in step.vals.iter().enumerate() {
                let b = step.first + j;
                if b < nb {
                    p += v * alpha.alpha_p[k][b];
                    q += v * alpha.alpha_q[k][b];
                }
            }
            d += C64::new(p, q) * phase;
        }
        d
    }

    fn step_hamiltonian(&self, energies: &[f64], d: C64) -> CMatrix {
        let n = energies.len();
        let mut h = CMatrix::zeros(n, n);
        for (k, e) in energies.iter().enumerate() {
            h[(k, k)] = C64::new(*e, 0.0);
        }
        for k in 0..n - 1 {
            let s = ((k + 1) as f64).sqrt();
            h[(k, k + 1)] = d * s;
            h[(k + 1, k)] = d.conj() * s;
        }
        h
    }

    /// U(t_n) on the essential columns at every grid point.
    pub fn trajectory(&self, params: &DeviceParams, alpha: &ControlVector) -> Result<Vec<CMatrix>> {
        self.check_control(alpha)?;
        let energies = self.frame_energies(params)?;
        let dt = self.target.duration / self.n_steps as f64;
        let mut u = self.initial_state();
        let mut out = Vec::with_capacity(self.n_steps + 1);
        out.push(u.clone());
        for step in &self.grid {
            let eig = Eigen::new(&self.step_hamiltonian(&energies, self.envelope(alpha, step)));
            u = eig.propagator(dt) * u;
            out.push(u.clone());
        }
        Ok(out)
    }

    fn initial_state(&self) -> CMatrix {
        let n = self.n_levels();
        CMatrix::from_fn(n, self.target.d_e, |r, c| {
            if r == c {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
    }

    /// J1 and J2 for one system.
    pub fn evaluate(&self, params: &DeviceParams, alpha: &ControlVector) -> Result<ObjectiveValue> {
        let path = self.trajectory(params, alpha)?;
        let last = path.last().expect("grid has at least one step");
        let j1 = infidelity(last, &self.target)?;
        let j2 = if self.weights.is_zero() {
            0.0
        } else {
            guard_penalty(&path, &self.weights, self.target.duration)?
        };
        Ok(ObjectiveValue { j1, j2 })
    }

    /// Objective and its gradient with respect to the flat control vector.
    pub fn evaluate_with_gradient(
        &self,
        params: &DeviceParams,
        alpha: &ControlVector,
    ) -> Result<(ObjectiveValue, Vec<f64>)> {
        self.check_control(alpha)?;
        let energies = self.frame_energies(params)?;
        let m = self.n_steps;
        let dt = self.target.duration / m as f64;
        let d = self.target.d_e as f64;
        let guard_dt = dt / self.target.duration;

        let mut states = Vec::with_capacity(m + 1);
        let mut eigs = Vec::with_capacity(m);
        let mut props = Vec::with_capacity(m);
        let mut u = self.initial_state();
        let mut j2 = 0.0;
        for (n, step) in self.grid.iter().enumerate() {
            j2 += trapezoid_weight(n, m) * guard_dt * self.weights.weighted_norm(&u);
            let eig = Eigen::new(&self.step_hamiltonian(&energies, self.envelope(alpha, step)));
            let e = eig.propagator(dt);
            let next = &e * &u;
            states.push(std::mem::replace(&mut u, next));
            eigs.push(eig);
            props.push(e);
        }
        j2 += 0.5 * guard_dt * self.weights.weighted_norm(&u);
        let tau = trace_overlap(&self.target.v, &u);
        let j1 = 1.0 - tau.norm_sqr() / (d * d);

        let w = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.n_levels(),
            self.weights.diag.iter().map(|x| C64::new(*x, 0.0)),
        ));
        let nb = self.basis.n_coeffs();
        let nc = self.carriers.len();
        let mut grad = vec![0.0; 2 * nc * nb];
        // Sensitivity of J to U_{n+1}, carried backwards through the steps.
        let mut lambda =
            self.target.v.scale(-2.0 / (d * d)) * tau + (&w * &u).scale(2.0 * 0.5 * guard_dt);
        for n in (0..m).rev() {
            let eig = &eigs[n];
            let x = &lambda * states[n].adjoint();
            let mut y = eig.vectors.adjoint() * x * &eig.vectors;
            for i in 0..y.nrows() {
                for j in 0..y.ncols() {
                    y[(i, j)] *= eig.divided_difference(i, j, dt).conj();
                }
            }
            let z = &eig.vectors * y * eig.vectors.adjoint();
            let (mut s, mut r) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
            for k in 0..z.nrows() - 1 {
                let f = ((k + 1) as f64).sqrt();
                s += z[(k, k + 1)].conj() * f;
                r += z[(k + 1, k)].conj() * f;
            }
            let step = &self.grid[n];
            let i = C64::new(0.0, 1.0);
            for (k, c) in step.phases.iter().enumerate() {
                let gp = (c * s + c.conj() * r).re;
                let gq = (i * c * s - i * c.conj() * r).re;
                for (j, v) in step.vals.iter().enumerate() {
                    let b = step.first + j;
                    if b < nb {
                        grad[k * nb + b] += v * gp;
                        grad[(nc + k) * nb + b] += v * gq;
                    }
                }
            }
            lambda = props[n].adjoint() * lambda;
            if n > 0 && !self.weights.is_zero() {
                lambda += (&w * &states[n]).scale(2.0 * guard_dt);
            }
        }
        Ok((ObjectiveValue { j1, j2 }, grad))
    }
}

/// Hermitian eigendecomposition of one step Hamiltonian.
struct Eigen {
    values: Vec<f64>,
    vectors: CMatrix,
}

impl Eigen {
    fn new(h: &CMatrix) -> Self {
        let eig = SymmetricEigen::new(h.clone());
        Self {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
        }
    }

    fn propagator(&self, dt: f64) -> CMatrix {
        let mut scaled = self.vectors.clone();
        for (k, lam) in self.values.iter().enumerate() {
            let phase = C64::from_polar(1.0, -lam * dt);
            for r in 0..scaled.nrows() {
                scaled[(r, k)] *= phase;
            }
        }
        scaled * self.vectors.adjoint()
    }

    /// Divided difference of λ ↦ exp(−iλ dt) at (λ_i, λ_j).
    fn divided_difference(&self, i: usize, j: usize, dt: f64) -> C64 {
        let (a, b) = (self.values[i], self.values[j]);
        let x = 0.5 * (a - b) * dt;
        let sinc = if x.abs() < 1e-8 {
            1.0 - x * x / 6.0
        } else {
            x.sin() / x
        };
        C64::new(0.0, -dt * sinc) * C64::from_polar(1.0, -0.5 * (a + b) * dt)
    }
}

/// Systems with probability weights over which the objective is averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub systems: Vec<DeviceParams>,
    pub weights: Vec<f64>,
}

impl Ensemble {
    pub fn single(params: DeviceParams) -> Self {
        Self {
            systems: vec![params],
            weights: vec![1.0],
        }
    }

    /// Systems obtained by substituting each rule node into `base`.
    pub fn from_rule(base: &DeviceParams, rule: &QuadratureRule) -> Result<Self> {
        rule.validate()?;
        let systems = rule
            .nodes
            .iter()
            .map(|z| system_at(base, z))
            .collect::<Result<_>>()?;
        Ok(Self {
            systems,
            weights: rule.weights.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.systems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.systems.is_empty()
    }
}

/// `base` with transition frequencies replaced by a quadrature node:
/// `[ω12]`, `[ω01, ω12]` or `[ω01, ω12, ω23]`. The parity splitting is
/// dropped since each node fixes ω12.
pub fn system_at(base: &DeviceParams, node: &[f64]) -> Result<DeviceParams> {
    let mut p = base.clone();
    p.epsilon12 = 0.0;
    match *node {
        [w12] => p.omega12_bar = w12,
        [w01, w12] => {
            p.omega01 = w01;
            p.omega12_bar = w12;
        }
        [w01, w12, w23] => {
            p.omega01 = w01;
            p.omega12_bar = w12;
            p.omega23 = w23;
        }
        _ => {
            return Err(Error::Dimension {
                expected: 2,
                found: node.len(),
            })
        }
    }
    for w in node {
        positive("node frequency", *w)?;
    }
    Ok(p)
}

/// Two equally weighted nodes at ω12 = ω̄12 ± ε12.
pub fn parity2_rule(params: &DeviceParams) -> QuadratureRule {
    QuadratureRule {
        nodes: Parity::BOTH
            .iter()
            .map(|&s| vec![params.omega12(s)])
            .collect(),
        weights: vec![0.5, 0.5],
    }
}

/// Tensor Gauss rule over [ω01, ω12] from posterior samples. The ω12 rule
/// is built from the pooled samples of both parities.
pub fn posterior_rule(
    omega01: &[f64],
    omega12: &[f64],
    n01: usize,
    n12: usize,
) -> Result<QuadratureRule> {
    Ok(tensor_rule(
        &gauss_rule_from_samples(omega01, n01)?,
        &gauss_rule_from_samples(omega12, n12)?,
    ))
}

/// Σ_k w_k J(α; system_k), evaluated concurrently over the systems.
pub fn risk_neutral_objective(
    problem: &ControlProblem,
    ensemble: &Ensemble,
    alpha: &ControlVector,
) -> Result<ObjectiveValue> {
    let parts = par_map(&ensemble.systems, |p| problem.evaluate(p, alpha))?;
    Ok(weighted_sum(
        parts.iter().zip(&ensemble.weights).map(|(v, w)| (*v, *w)),
    ))
}

/// Risk-neutral objective and gradient.
pub fn risk_neutral_gradient(
    problem: &ControlProblem,
    ensemble: &Ensemble,
    alpha: &ControlVector,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    let parts = par_map(&ensemble.systems, |p| {
        problem.evaluate_with_gradient(p, alpha)
    })?;
    let mut grad = vec![0.0; problem.n_params()];
    for ((_, g), w) in parts.iter().zip(&ensemble.weights) {
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
    }
    let value = weighted_sum(
        parts
            .iter()
            .zip(&ensemble.weights)
            .map(|((v, _), w)| (*v, *w)),
    );
    Ok((value, grad))
}

fn weighted_sum(parts: impl Iterator<Item = (ObjectiveValue, f64)>) -> ObjectiveValue {
    parts.fold(ObjectiveValue::default(), |acc, (v, w)| ObjectiveValue {
        j1: acc.j1 + w * v.j1,
        j2: acc.j2 + w * v.j2,
    })
}

fn par_map<T: Send, F>(systems: &[DeviceParams], f: F) -> Result<Vec<T>>
where
    F: Fn(&DeviceParams) -> Result<T> + Sync,
{
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(systems.len());
    if threads <= 1 {
        return systems.iter().map(&f).collect();
    }
    let chunk = systems.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = systems
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(systems.len());
        for h in handles {
            out.extend(h.join().expect("objective worker panicked")?);
        }
        Ok(out)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub max_iter: usize,
    /// Bound on |α| for every coefficient (rad/s).
    pub amplitude_bound: f64,
    pub gtol: f64,
    pub ftol: f64,
    /// Random initial coefficients are drawn within this fraction of the bound.
    pub init_fraction: f64,
    pub seed: u64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            max_iter: 300,
            amplitude_bound: hz(6e6),
            gtol: 1e-9,
            ftol: 1e-14,
            init_fraction: 0.01,
            seed: 2022,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub j1: f64,
    pub j2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub control: ControlVector,
    pub j1: f64,
    pub j2: f64,
    pub objective: f64,
    /// 1 − J1 (ensemble average).
    pub fidelity: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    /// Set when the iteration budget ran out before convergence; the
    /// control is then the best one found.
    pub flagged: bool,
    pub message: String,
    pub trace: Vec<TraceEntry>,
}

/// Random initial control with |α| ≤ fraction · bound.
pub fn initial_control(problem: &ControlProblem, cfg: &OptimizeConfig) -> ControlVector {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.init_fraction * cfg.amplitude_bound;
    let flat: Vec<f64> = (0..problem.n_params())
        .map(|_| scale * rng.random_range(-1.0..=1.0))
        .collect();
    problem
        .control_from_flat(&flat)
        .expect("length matches the problem")
}

/// Minimizes the ensemble objective with box-constrained L-BFGS starting
/// from `init`, or from a seeded random control when `init` is `None`.
pub fn optimize(
    problem: &ControlProblem,
    ensemble: &Ensemble,
    init: Option<&ControlVector>,
    cfg: &OptimizeConfig,
) -> Result<OptimizationReport> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    if !(cfg.amplitude_bound >= 0.0) {
        return Err(Error::OutOfRange {
            what: "amplitude bound",
            value: cfg.amplitude_bound,
        });
    }
    let bound = cfg.amplitude_bound;
    let scale = if bound > 0.0 { bound } else { 1.0 };
    let start = match init {
        Some(a) => {
            problem.check_control(a)?;
            a.clone()
        }
        None => initial_control(problem, cfg),
    };
    let x0: Vec<f64> = start
        .to_flat()
        .iter()
        .map(|a| (a / scale).clamp(-bound / scale, bound / scale))
        .collect();
    let lower = vec![-bound / scale; x0.len()];
    let upper = vec![bound / scale; x0.len()];

    let mut log: Vec<(f64, ObjectiveValue)> = Vec::new();
    let mut failure: Option<Error> = None;
    let opts = BoxOptions {
        max_iter: cfg.max_iter,
        gtol: cfg.gtol,
        ftol: cfg.ftol,
        ..Default::default()
    };
    let res = minimize_box(
        |x, g| {
            let flat: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let alpha = problem
                .control_from_flat(&flat)
                .expect("length matches the problem");
            match risk_neutral_gradient(problem, ensemble, &alpha) {
                Ok((v, grad)) => {
                    g.iter_mut()
                        .zip(&grad)
                        .for_each(|(gi, di)| *gi = di * scale);
                    log.push((v.total(), v));
                    v.total()
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    g.iter_mut().for_each(|gi| *gi = 0.0);
                    f64::INFINITY
                }
            }
        },
        &x0,
        &lower,
        &upper,
        &opts,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let lookup = |f: f64| log.iter().rev().find(|(v, _)| *v == f).map(|(_, o)| *o);
    let trace = res
        .trace
        .iter()
        .enumerate()
        .map(|(iteration, &f)| {
            let o = lookup(f).unwrap_or(ObjectiveValue { j1: f, j2: 0.0 });
            TraceEntry {
                iteration,
                j1: o.j1,
                j2: o.j2,
            }
        })
        .collect();
    let control =
        problem.control_from_flat(&res.x.iter().map(|v| v * scale).collect::<Vec<_>>())?;
    let best =
        lookup(res.f).map_or_else(|| risk_neutral_objective(problem, ensemble, &control), Ok)?;
    Ok(OptimizationReport {
        control,
        j1: best.j1,
        j2: best.j2,
        objective: best.total(),
        fidelity: 1.0 - best.j1,
        iterations: res.iterations,
        evaluations: res.evaluations,
        converged: res.converged,
        flagged: !res.converged,
        message: res.message.to_string(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::propagate_unitary;
    use crate::optim::fd_gradient;
    use std::f64::consts::PI;

    fn small_problem(target: GateTarget, n_steps: usize) -> (ControlProblem, DeviceParams) {
        let params = DeviceParams::reference();
        let carriers = vec![0.0, params.omega12_bar - params.omega01];
        let weights = GuardWeights::unit(4, target.d_e()).unwrap();
        (
            ControlProblem::new(target, weights, 6, carriers, params.omega01, n_steps).unwrap(),
            params,
        )
    }

    fn random_alpha(problem: &ControlProblem, seed: u64, amp: f64) -> ControlVector {
        let cfg = OptimizeConfig {
            seed,
            init_fraction: 1.0,
            amplitude_bound: amp,
            ..Default::default()
        };
        initial_control(problem, &cfg)
    }

    fn random_unitary(n: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = CMatrix::from_fn(n, n, |_, _| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let h = &m + m.adjoint();
        crate::linalg::unitary_exp(&h, 1.0)
    }

    #[test]
    fn target_construction() {
        let t = GateTarget::swap02(4, 256e-9).unwrap();
        assert_eq!(t.d_e(), 3);
        assert_eq!(t.embedded().shape(), (4, 3));
        assert_eq!(t.embedded()[(2, 0)], C64::new(1.0, 0.0));
        assert_eq!(t.embedded()[(3, 1)], C64::new(0.0, 0.0));
        let bad = CMatrix::from_element(3, 3, C64::new(1.0, 0.0));
        assert!(GateTarget::new(bad, 4, 1e-7).is_err());
        assert!(GateTarget::swap02(2, 1e-7).is_err());
        assert!(GateTarget::identity(3, 4, 0.0).is_err());
    }

    #[test]
    fn guard_weights_validation() {
        assert!(GuardWeights::new(vec![0.0, 0.0, 0.0, 1.0], 3).is_ok());
        assert!(GuardWeights::new(vec![0.0, 0.1, 0.0, 1.0], 3).is_err());
        assert!(GuardWeights::new(vec![0.0, 0.0, 0.0, -1.0], 3).is_err());
        assert!(GuardWeights::new(vec![0.0, 0.0], 3).is_err());
    }

    #[test]
    fn infidelity_of_target_and_phases() {
        let t = GateTarget::swap02(4, 1e-7).unwrap();
        let mut u = CMatrix::zeros(4, 4);
        u.view_mut((0, 0), (4, 3)).copy_from(t.embedded());
        u[(3, 3)] = C64::new(1.0, 0.0);
        assert!(infidelity(&u, &t).unwrap() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_unitary(4, 9);
        let j = infidelity(&base, &t).unwrap();
        for _ in 0..100 {
            let phi = rng.random_range(0.0..2.0 * PI);
            let rotated = base.scale(1.0) * C64::from_polar(1.0, phi);
            assert!((infidelity(&rotated, &t).unwrap() - j).abs() < 1e-14);
            assert!(
                (infidelity(&(u.clone() * C64::from_polar(1.0, phi)), &t).unwrap()).abs() < 1e-14
            );
        }
        assert!(infidelity(&CMatrix::identity(3, 3), &t).is_err());
    }

    #[test]
    fn infidelity_one_for_trace_orthogonal_block() {
        // Brute force over permutation times phase matrices for one with
        // Tr(V† U) = 0.
        let t = GateTarget::swap02(3, 1e-7).unwrap();
        let v = t.essential();
        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let phases = [
            C64::new(1.0, 0.0),
            C64::new(-1.0, 0.0),
            C64::new(0.0, 1.0),
            C64::new(0.0, -1.0),
        ];
        let mut found = 0;
        for p in perms {
            for a in phases {
                for b in phases {
                    let mut u = CMatrix::zeros(3, 3);
                    u[(p[0], 0)] = C64::new(1.0, 0.0);
                    u[(p[1], 1)] = a;
                    u[(p[2], 2)] = b;
                    let tr: C64 = (v.adjoint() * &u).trace();
                    if tr.norm() < 1e-15 {
                        assert!((infidelity(&u, &t).unwrap() - 1.0).abs() < 1e-15);
                        found += 1;
                    }
                }
            }
        }
        assert!(found > 0);
    }

    #[test]
    fn guard_penalty_examples() {
        let d = GuardWeights::unit(4, 3).unwrap();
        let idle: Vec<CMatrix> = (0..11).map(|_| CMatrix::identity(4, 3)).collect();
        assert_eq!(
            guard_penalty(&idle, &GuardWeights::zero(4), 1e-7).unwrap(),
            0.0
        );
        assert!(guard_penalty(&idle, &d, 1e-7).unwrap().abs() < 1e-12);
        let mut leaked = CMatrix::identity(4, 3);
        leaked[(0, 0)] = C64::new(0.0, 0.0);
        leaked[(3, 0)] = C64::new(0.0, 1.0);
        let full: Vec<CMatrix> = (0..17).map(|_| leaked.clone()).collect();
        assert!((guard_penalty(&full, &d, 2e-7).unwrap() - 1.0).abs() < 1e-14);
        assert!(guard_penalty(&[], &d, 1e-7).is_err());
        // linear ramp of guard population from 0 to 1 averages to 1/2
        let ramp: Vec<CMatrix> = (0..=8)
            .map(|j| {
                let s = (j as f64 / 8.0).sqrt();
                let mut u = CMatrix::identity(4, 3);
                u[(0, 0)] = C64::new((1.0 - s * s).sqrt(), 0.0);
                u[(3, 0)] = C64::new(s, 0.0);
                u
            })
            .collect();
        assert!((guard_penalty(&ramp, &d, 1e-7).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn zero_control_matches_diagonal_phases() {
        let tg = 40e-9;
        let (problem, params) = small_problem(GateTarget::identity(3, 4, tg).unwrap(), 64);
        let v = problem.evaluate(&params, &problem.zero_control()).unwrap();
        let e = problem.frame_energies(&params).unwrap();
        let tr: C64 = e[..3].iter().map(|x| C64::from_polar(1.0, -x * tg)).sum();
        let want = 1.0 - tr.norm_sqr() / 9.0;
        assert!((v.j1 - want).abs() < 1e-12, "{} vs {want}", v.j1);
        assert!(v.j2 < 1e-15);
    }

    #[test]
    fn trajectory_matches_propagate_unitary() {
        let (problem, params) = small_problem(GateTarget::swap02(4, 64e-9).unwrap(), 256);
        let alpha = random_alpha(&problem, 5, hz(5e6));
        let pulse = problem.pulse(&alpha).unwrap();
        let energies = problem.frame_energies(&params).unwrap();
        let h = |t: f64| problem.step_hamiltonian(&energies, pulse.envelope(t).unwrap());
        let full = propagate_unitary(h, 64e-9, 256).unwrap();
        let ours = problem.trajectory(&params, &alpha).unwrap().pop().unwrap();
        let diff = crate::linalg::max_abs(&(full.columns(0, 3) - ours));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn objective_range_for_random_controls() {
        let (problem, params) = small_problem(GateTarget::swap02(4, 64e-9).unwrap(), 128);
        for seed in 0..5 {
            let v = problem
                .evaluate(&params, &random_alpha(&problem, seed, hz(20e6)))
                .unwrap();
            assert!(
                v.j1 > 0.0 && v.j1 <= 1.0 && v.j2 >= 0.0 && v.total() <= 2.0,
                "{v:?}"
            );
        }
    }

    fn fd_check(
        problem: &ControlProblem,
        params: &DeviceParams,
        alpha: &ControlVector,
        scale: f64,
    ) -> f64 {
        let (_, g) = problem.evaluate_with_gradient(params, alpha).unwrap();
        let x0: Vec<f64> = alpha.to_flat().iter().map(|a| a / scale).collect();
        let fd = fd_gradient(
            |x| {
                let flat: Vec<f64> = x.iter().map(|v| v * scale).collect();
                problem
                    .evaluate(params, &problem.control_from_flat(&flat).unwrap())
                    .unwrap()
                    .total()
            },
            &x0,
            1e-6,
        );
        let num = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a * scale - b).abs())
            .fold(0.0, f64::max);
        let den = fd.iter().map(|b| b.abs()).fold(0.0, f64::max);
        num / den
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (problem, params) = small_problem(GateTarget::swap02(4, 64e-9).unwrap(), 128);
        let scale = hz(6e6);
        for seed in 0..3 {
            let err = fd_check(
                &problem,
                &params,
                &random_alpha(&problem, seed, scale),
                scale,
            );
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
        // Zero control is stationary: a single drive matrix element cannot
        // change the diagonal of U to first order.
        let zero = problem.zero_control();
        let (_, g) = problem.evaluate_with_gradient(&params, &zero).unwrap();
        assert!(g.iter().all(|x| (x * scale).abs() < 1e-12), "{g:?}");
        let fd = fd_gradient(
            |x| {
                let flat: Vec<f64> = x.iter().map(|v| v * scale).collect();
                problem
                    .evaluate(&params, &problem.control_from_flat(&flat).unwrap())
                    .unwrap()
                    .total()
            },
            &vec![0.0; problem.n_params()],
            1e-6,
        );
        assert!(fd.iter().all(|x| x.abs() < 1e-8), "{fd:?}");
    }

    #[test]
    fn gradient_without_guard_weight_is_infidelity_gradient() {
        let (mut problem, params) = small_problem(GateTarget::swap02(4, 64e-9).unwrap(), 96);
        let alpha = random_alpha(&problem, 8, hz(6e6));
        let (_, with_guard) = problem.evaluate_with_gradient(&params, &alpha).unwrap();
        problem.weights = GuardWeights::zero(4);
        let (v, g) = problem.evaluate_with_gradient(&params, &alpha).unwrap();
        assert_eq!(v.j2, 0.0);
        assert!(g.iter().zip(&with_guard).any(|(a, b)| a != b));
        let err = fd_check(&problem, &params, &alpha, hz(6e6));
        assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn phase_rotation_direction_is_flat_for_diagonal_targets() {
        // d → e^{iφ} d conjugates U by a diagonal unitary, leaving J
        // unchanged for a diagonal target, so g · (−α_q, α_p) = 0.
        let (problem, params) = small_problem(GateTarget::identity(3, 4, 64e-9).unwrap(), 128);
        let alpha = random_alpha(&problem, 4, hz(6e6));
        let (_, g) = problem.evaluate_with_gradient(&params, &alpha).unwrap();
        let flat = alpha.to_flat();
        let half = flat.len() / 2;
        let dir: Vec<f64> = flat[half..]
            .iter()
            .map(|q| -q)
            .chain(flat[..half].iter().copied())
            .collect();
        let proj: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt()
            * dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(proj.abs() < 1e-9 * norm, "{proj} vs {norm}");
    }

    #[test]
    fn single_node_rule_equals_deterministic() {
        let (problem, params) = small_problem(GateTarget::swap02(4, 64e-9).unwrap(), 64);
        let alpha = random_alpha(&problem, 1, hz(6e6));
        let det = problem.evaluate(&params, &alpha).unwrap();
        let ens = Ensemble::from_rule(&params, &QuadratureRule::single(vec![params.omega12_bar]))
            .unwrap();
        let rn = risk_neutral_objective(&problem, &ens, &alpha).unwrap();
        assert!((rn.total() - det.total()).abs() < 1e-15);
    }

    #[test]
    fn parity_rule_averages_the_two_parities() {
        let (problem, params) = small_problem(GateTarget::swap02(4, 64e-9).unwrap(), 64);
        let alpha = random_alpha(&problem, 2, hz(6e6));
        let rule = parity2_rule(&params);
        let ens = Ensemble::from_rule(&params, &rule).unwrap();
        let rn = risk_neutral_objective(&problem, &ens, &alpha)
            .unwrap()
            .total();
        let each: Vec<f64> = Parity::BOTH
            .iter()
            .map(|&s| {
                let p = system_at(&params, &[params.omega12(s)]).unwrap();
                problem.evaluate(&p, &alpha).unwrap().total()
            })
            .collect();
        assert!((rn - 0.5 * (each[0] + each[1])).abs() < 1e-14);
        assert!(rn >= each[0].min(each[1]) && rn <= each[0].max(each[1]));
        let (v, g) = risk_neutral_gradient(&problem, &ens, &alpha).unwrap();
        assert!((v.total() - rn).abs() < 1e-14);
        assert_eq!(g.len(), problem.n_params());
    }

    #[test]
    fn symmetric_nodes_give_equal_objectives_for_zero_control() {
        // Without drive J depends on ω12 only through a phase that is the
        // same for nodes symmetric about the frame plus a multiple of 2π/T.
        let tg = 64e-9;
        let (problem, params) = small_problem(GateTarget::identity(3, 4, tg).unwrap(), 64);
        let shift = 2.0 * PI / tg;
        let a = system_at(&params, &[params.omega12_bar]).unwrap();
        let b = system_at(&params, &[params.omega12_bar + shift]).unwrap();
        let za = problem.evaluate(&a, &problem.zero_control()).unwrap();
        let zb = problem.evaluate(&b, &problem.zero_control()).unwrap();
        assert!((za.j1 - zb.j1).abs() < 1e-9);
    }

    #[test]
    fn node_layouts() {
        let base = DeviceParams::reference();
        let p = system_at(&base, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            (p.omega01, p.omega12_bar, p.omega23, p.epsilon12),
            (1.0, 2.0, 3.0, 0.0)
        );
        assert!(system_at(&base, &[]).is_err());
        assert!(system_at(&base, &[-1.0]).is_err());
        let rule = posterior_rule(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 9.0], 2, 3).unwrap();
        assert_eq!(rule.len(), 6);
        assert_eq!(rule.dim(), 2);
    }

    #[test]
    fn zero_bound_returns_zero_control() {
        let (problem, params) = small_problem(GateTarget::swap02(4, 64e-9).unwrap(), 32);
        let cfg = OptimizeConfig {
            amplitude_bound: 0.0,
            max_iter: 20,
            ..Default::default()
        };
        let ens = Ensemble::single(params.clone());
        let rep = optimize(&problem, &ens, None, &cfg).unwrap();
        assert!(rep.control.to_flat().iter().all(|a| *a == 0.0));
        let zero = problem.evaluate(&params, &problem.zero_control()).unwrap();
        assert_eq!(rep.objective, zero.total());
    }

    #[test]
    fn identity_target_converges_quickly() {
        // With the frame and carrier chosen so that free evolution over T is
        // the identity on the essential levels, zero control is optimal.
        let tg = 50e-9;
        let mut params = DeviceParams::reference();
        params.omega12_bar = params.omega01 + 2.0 * PI / tg * 3.0;
        let target = GateTarget::identity(3, 4, tg).unwrap();
        let weights = GuardWeights::unit(4, 3).unwrap();
        let problem =
            ControlProblem::new(target, weights, 5, vec![0.0], params.omega01, 100).unwrap();
        let ens = Ensemble::single(params.clone());
        let rep = optimize(&problem, &ens, None, &OptimizeConfig::default()).unwrap();
        assert!(rep.j1 < 1e-8, "{rep:?}");
        let reached = rep
            .trace
            .iter()
            .position(|t| t.j1 + t.j2 < 1e-8)
            .expect("objective reaches 1e-8");
        assert!(reached <= 15, "{reached}");
        let totals: Vec<f64> = rep.trace.iter().map(|t| t.j1 + t.j2).collect();
        assert!(totals.windows(2).all(|w| w[1] <= w[0]));
    }
}
