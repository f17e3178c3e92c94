//! Time evolution: the vectorized Lindblad generator, constant-generator
//! propagation, the exponential midpoint rule for time-dependent
//! Hamiltonians, and the two-level Rabi closed form.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::{
    expm, hermitian_defect, identity, kron, unitary_exp, unvec_cols, vec_cols, CMatrix, CVector,
    C64, I, ONE,
};
use crate::qmodel::{
    build_lowering, collapse_operators, diagonal_hamiltonian, level_energies, DeviceParams, Parity,
    Rates,
};

/// Tolerances used when validating density matrices built from user input.
const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-10;
const POSITIVITY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(CMatrix);

impl DensityMatrix {
    /// Checked constructor: Hermitian, unit trace, positive semidefinite.
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension {
                expected: m.nrows(),
                found: m.ncols(),
            });
        }
        let defect = hermitian_defect(&m);
        if defect > HERMITIAN_TOL {
            return Err(Error::NotHermitian(defect));
        }
        let trace = m.trace();
        if (trace - ONE).norm() > TRACE_TOL {
            return Err(Error::OutOfRange {
                what: "density matrix trace",
                value: trace.re,
            });
        }
        let min_eig = m.clone().symmetric_eigenvalues().min();
        if min_eig < -POSITIVITY_TOL {
            return Err(Error::OutOfRange {
                what: "density matrix eigenvalue",
                value: min_eig,
            });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix produced by trusted propagation code.
    pub(crate) fn from_raw(m: CMatrix) -> Self {
        Self(m)
    }

    /// |k⟩⟨k| on `n` levels.
    pub fn basis(n: usize, k: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        m[(k, k)] = ONE;
        Self(m)
    }

    pub fn pure(psi: &CVector) -> Self {
        let norm = psi.norm();
        let v = psi / C64::new(norm, 0.0);
        Self(&v * v.adjoint())
    }

    pub fn maximally_mixed(n: usize) -> Self {
        Self(identity(n) / C64::new(n as f64, 0.0))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn to_vec(&self) -> CVector {
        vec_cols(&self.0)
    }

    pub fn from_vec(v: &CVector, n: usize) -> Self {
        Self(unvec_cols(v, n))
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }
}

/// Generator of the vectorized Lindblad equation, d vec(ρ)/dt = S vec(ρ),
/// in the column-stacking convention.
#[derive(Clone, Debug, PartialEq)]
pub struct LindbladSuperoperator {
    pub matrix: CMatrix,
    pub n: usize,
}

impl LindbladSuperoperator {
    pub fn propagator(&self, t: f64) -> CMatrix {
        expm(&(&self.matrix * C64::new(t, 0.0)))
    }
}

/// S = −i(I⊗H − Hᵀ⊗I) + Σ_j [conj(L_j)⊗L_j − ½(I⊗L_j†L_j + (L_j†L_j)ᵀ⊗I)].
///
/// For real collapse operators conj(L) = L, which recovers the familiar
/// `L⊗L` form.
pub fn lindblad_superoperator(
    h: &CMatrix,
    collapse_ops: &[CMatrix],
) -> Result<LindbladSuperoperator> {
    let n = h.nrows();
    if !h.is_square() {
        return Err(Error::Dimension {
            expected: n,
            found: h.ncols(),
        });
    }
    let defect = hermitian_defect(h);
    if defect > 1e-9 * crate::linalg::max_abs(h).max(1.0) {
        return Err(Error::NotHermitian(defect));
    }
    let id = identity(n);
    let mut s = (kron(&id, h) - kron(&h.transpose(), &id)) * (-I);
    for l in collapse_ops {
        if l.shape() != (n, n) {
            return Err(Error::Dimension {
                expected: n,
                found: l.nrows(),
            });
        }
        let ldl = l.adjoint() * l;
        s += kron(&l.conjugate(), l);
        s -= (kron(&id, &ldl) + kron(&ldl.transpose(), &id)) * C64::new(0.5, 0.0);
    }
    Ok(LindbladSuperoperator { matrix: s, n })
}

/// Matrix-form right-hand side −i[H, ρ] + Σ (LρL† − ½{L†L, ρ}).
pub fn lindblad_rhs(h: &CMatrix, collapse_ops: &[CMatrix], rho: &CMatrix) -> CMatrix {
    let mut out = (h * rho - rho * h) * (-I);
    for l in collapse_ops {
        let ldl = l.adjoint() * l;
        out += l * rho * l.adjoint() - (&ldl * rho + rho * &ldl) * C64::new(0.5, 0.0);
    }
    out
}

/// vec(ρ(t)) = exp(S t) vec(ρ0).
pub fn propagate_constant(
    superop: &LindbladSuperoperator,
    rho0: &DensityMatrix,
    t: f64,
) -> Result<DensityMatrix> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::OutOfRange {
            what: "propagation time",
            value: t,
        });
    }
    if rho0.dim() != superop.n {
        return Err(Error::Dimension {
            expected: superop.n,
            found: rho0.dim(),
        });
    }
    let v = superop.propagator(t) * rho0.to_vec();
    Ok(DensityMatrix::from_vec(&v, superop.n))
}

/// States sampled along a propagation.
#[derive(Clone, Debug)]
pub struct PropagationResult {
    pub times: Vec<f64>,
    pub states: Vec<CMatrix>,
}

impl PropagationResult {
    /// CSV with a time column (s) and one population column per level.
    pub fn populations_csv(&self) -> String {
        let n = self.states.first().map_or(0, |s| s.nrows());
        let mut out = String::from("time_s");
        for k in 0..n {
            let _ = write!(out, ",p{k}");
        }
        out.push('\n');
        for (t, s) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t:e}");
            for k in 0..n {
                let _ = write!(out, ",{:.12}", s[(k, k)].re);
            }
            out.push('\n');
        }
        out
    }
}

/// Lindblad evolution sampled on a uniform grid `0, dt, ..., n dt`.
pub fn propagate_sampled(
    superop: &LindbladSuperoperator,
    rho0: &DensityMatrix,
    dt: f64,
    n: usize,
) -> PropagationResult {
    let step = superop.propagator(dt);
    let mut v = rho0.to_vec();
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    for j in 0..=n {
        if j > 0 {
            v = &step * &v;
        }
        times.push(j as f64 * dt);
        states.push(unvec_cols(&v, superop.n));
    }
    PropagationResult { times, states }
}

/// U(T) for dU/dt = −i H(t) U with the exponential midpoint rule:
/// U ← exp(−i H(t_n + dt/2) dt) U. Each factor is exactly unitary and the
/// scheme is second order in dt.
pub fn propagate_unitary<F>(h_of_t: F, duration: f64, n_steps: usize) -> Result<CMatrix>
where
    F: Fn(f64) -> CMatrix,
{
    let path = unitary_trajectory(h_of_t, duration, n_steps)?;
    Ok(path
        .states
        .into_iter()
        .last()
        .expect("at least the initial state"))
}

/// Like [`propagate_unitary`] but keeps U at every grid point.
pub fn unitary_trajectory<F>(h_of_t: F, duration: f64, n_steps: usize) -> Result<PropagationResult>
where
    F: Fn(f64) -> CMatrix,
{
    if n_steps == 0 {
        return Err(Error::OutOfRange {
            what: "n_steps",
            value: 0.0,
        });
    }
    let dt = duration / n_steps as f64;
    let mut times = vec![0.0];
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut u: Option<CMatrix> = None;
    for step in 0..n_steps {
        let h = h_of_t((step as f64 + 0.5) * dt);
        if step == 0 {
            let defect = hermitian_defect(&h);
            if defect > 1e-9 * crate::linalg::max_abs(&h).max(1.0) {
                return Err(Error::NotHermitian(defect));
            }
            let id = identity(h.nrows());
            states.push(id.clone());
            u = Some(id);
        }
        let next = unitary_exp(&h, dt) * u.as_ref().expect("set on first step");
        states.push(next.clone());
        u = Some(next);
        times.push((step + 1) as f64 * dt);
    }
    Ok(PropagationResult { times, states })
}

/// Closed-form propagator of H = Ω a + conj(Ω) a† on two levels.
pub fn rabi_analytic(omega: C64, t: f64) -> CMatrix {
    let mag = omega.norm();
    let theta = omega.arg();
    let (s, c) = (mag * t).sin_cos();
    let (st, ct) = theta.sin_cos();
    CMatrix::from_row_slice(
        2,
        2,
        &[
            C64::new(c, 0.0),
            C64::new(st * s, -ct * s),
            C64::new(-st * s, -ct * s),
            C64::new(c, 0.0),
        ],
    )
}

pub fn populations(rho: &DensityMatrix) -> Vec<f64> {
    (0..rho.dim()).map(|k| rho.matrix()[(k, k)].re).collect()
}

/// Hamiltonian and dissipation of the qudit for one fixed parity.
#[derive(Clone, Debug)]
pub struct LindbladModel {
    energies: Vec<f64>,
    lowering: CMatrix,
    collapse: [CMatrix; 2],
}

impl LindbladModel {
    pub fn new(params: &DeviceParams, parity: Parity) -> Result<Self> {
        params.validate()?;
        Self::from_parts(level_energies(params, parity), &params.rates()?)
    }

    /// Model from lab-frame level energies (E_0 = 0) and decoherence rates.
    pub fn from_parts(energies: Vec<f64>, rates: &Rates) -> Result<Self> {
        let n = energies.len();
        if rates.gamma1.len() + 1 != n || rates.gamma2.len() + 1 != n {
            return Err(Error::Dimension {
                expected: n - 1,
                found: rates.gamma1.len(),
            });
        }
        Ok(Self {
            lowering: build_lowering(n)?,
            collapse: collapse_operators(rates),
            energies,
        })
    }

    pub fn levels(&self) -> usize {
        self.energies.len()
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn lowering(&self) -> &CMatrix {
        &self.lowering
    }

    pub fn collapse_ops(&self) -> &[CMatrix; 2] {
        &self.collapse
    }

    /// Rotating-frame Hamiltonian diag(E_k − k ω) + d a + conj(d) a†.
    pub fn hamiltonian(&self, frame: f64, drive: C64) -> CMatrix {
        let mut h = diagonal_hamiltonian(&self.energies, frame);
        if drive != C64::new(0.0, 0.0) {
            h += &self.lowering * drive + self.lowering.adjoint() * drive.conj();
        }
        h
    }

    pub fn generator(&self, frame: f64, drive: C64) -> LindbladSuperoperator {
        lindblad_superoperator(&self.hamiltonian(frame, drive), &self.collapse)
            .expect("model Hamiltonians are Hermitian by construction")
    }

    /// Dissipative part of the generator alone.
    pub fn dissipator(&self) -> LindbladSuperoperator {
        let n = self.levels();
        lindblad_superoperator(&CMatrix::zeros(n, n), &self.collapse)
            .expect("square by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;
    use crate::qmodel::hz;

    fn random_hermitian(n: usize, seed: u64) -> CMatrix {
        let mut s = seed;
        let mut next = move || {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let m = CMatrix::from_fn(n, n, |_, _| C64::new(next(), next()));
        (&m + m.adjoint()) * C64::new(0.5, 0.0)
    }

    fn random_density(n: usize, seed: u64) -> CMatrix {
        let h = random_hermitian(n, seed);
        let m = &h * &h + identity(n) * C64::new(0.1, 0.0);
        let tr = m.trace();
        m / tr
    }

    #[test]
    fn zero_generator() {
        let s = lindblad_superoperator(&CMatrix::zeros(3, 3), &[]).unwrap();
        assert!(s.matrix.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn superoperator_matches_matrix_rhs() {
        let h = random_hermitian(4, 3);
        let l1 = CMatrix::from_fn(4, 4, |i, j| {
            C64::new((i + 2 * j) as f64 * 0.1, (i as f64 - j as f64) * 0.05)
        });
        let l2 = random_hermitian(4, 9);
        let ops = [l1, l2];
        let s = lindblad_superoperator(&h, &ops).unwrap();
        for seed in 0..5 {
            let rho = random_density(4, 100 + seed);
            let lhs = &s.matrix * vec_cols(&rho);
            let rhs = vec_cols(&lindblad_rhs(&h, &ops, &rho));
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn conjugation_oracle_for_closed_system() {
        let h = diagonal_hamiltonian(&[0.0, 1.3, 2.1], 0.0);
        let s = lindblad_superoperator(&h, &[]).unwrap();
        let rho = DensityMatrix::new(random_density(3, 5)).unwrap();
        let out = propagate_constant(&s, &rho, 0.8).unwrap();
        let u = unitary_exp(&h, 0.8);
        let expected = &u * rho.matrix() * u.adjoint();
        assert!(max_abs(&(out.matrix() - expected)) < 1e-12);
    }

    #[test]
    fn two_level_decay() {
        let gamma = 1.0 / 258.39e-6;
        let rates = Rates {
            gamma1: vec![gamma],
            gamma2: vec![0.0],
        };
        let model = LindbladModel::from_parts(vec![0.0, 0.0], &rates).unwrap();
        let s = model.generator(0.0, C64::new(0.0, 0.0));
        let mut rho = CMatrix::zeros(2, 2);
        rho[(1, 1)] = C64::new(0.5, 0.0);
        rho[(0, 0)] = C64::new(0.5, 0.0);
        rho[(0, 1)] = C64::new(0.5, 0.0);
        rho[(1, 0)] = C64::new(0.5, 0.0);
        let rho = DensityMatrix::new(rho).unwrap();
        for &t in &[1e-6, 50e-6, 179e-6] {
            let out = propagate_constant(&s, &rho, t).unwrap();
            let m = out.matrix();
            assert!((m[(1, 1)].re / (0.5 * (-gamma * t).exp()) - 1.0).abs() < 1e-10);
            assert!((m[(0, 1)].re / (0.5 * (-0.5 * gamma * t).exp()) - 1.0).abs() < 1e-10);
            assert!((m[(0, 0)].re - (1.0 - 0.5 * (-gamma * t).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_propagation_basics() {
        let params = DeviceParams::reference().with_levels(3);
        let model = LindbladModel::new(&params, Parity::Plus).unwrap();
        let s = model.generator(params.omega01, C64::new(hz(1e6), hz(0.3e6)));
        let rho0 = DensityMatrix::basis(3, 0);
        assert_eq!(propagate_constant(&s, &rho0, 0.0).unwrap(), rho0);
        assert!(propagate_constant(&s, &rho0, -1.0).is_err());
        let a = propagate_constant(&s, &rho0, 3e-6).unwrap();
        let b = propagate_constant(&s, &a, 4e-6).unwrap();
        let c = propagate_constant(&s, &rho0, 7e-6).unwrap();
        assert!(max_abs(&(b.matrix() - c.matrix())) < 1e-10);
        for p in populations(&c) {
            assert!((-1e-10..=1.0 + 1e-10).contains(&p));
        }
        assert!((populations(&c).iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn unitary_propagation_of_constant_hamiltonian() {
        let h = random_hermitian(4, 77) * C64::new(3.0, 0.0);
        assert_eq!(
            propagate_unitary(|_| CMatrix::zeros(4, 4), 1.0, 10).unwrap(),
            identity(4)
        );
        let u = propagate_unitary(|_| h.clone(), 1.7, 64).unwrap();
        assert!(max_abs(&(u - unitary_exp(&h, 1.7))) < 1e-10);
    }

    #[test]
    fn unitary_rejects_non_hermitian() {
        let bad = CMatrix::from_fn(2, 2, |i, j| C64::new((i * 2 + j) as f64, 0.0));
        assert!(matches!(
            propagate_unitary(|_| bad.clone(), 1.0, 4),
            Err(Error::NotHermitian(_))
        ));
        assert!(propagate_unitary(|_| identity(2), 1.0, 0).is_err());
    }

    #[test]
    fn rabi_closed_form_cases() {
        assert!(max_abs(&(rabi_analytic(C64::new(2.0, 1.0), 0.0) - identity(2))) < 1e-15);
        let u = rabi_analytic(C64::new(1.0, 0.0), std::f64::consts::FRAC_PI_2);
        assert!(u[(0, 0)].norm() < 1e-15);
        assert!((u[(0, 1)] - C64::new(0.0, -1.0)).norm() < 1e-15);
        assert!((u[(1, 0)] - C64::new(0.0, -1.0)).norm() < 1e-15);
        let u = rabi_analytic(C64::new(0.0, 1.0), std::f64::consts::FRAC_PI_2);
        assert!((u[(0, 1)] - C64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((u[(1, 0)] - C64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rabi_matches_midpoint_rule() {
        let omega = C64::from_polar(hz(3e6), 0.7);
        let a = build_lowering(2).unwrap();
        let h = &a * omega + a.adjoint() * omega.conj();
        let period = std::f64::consts::PI / omega.norm();
        let t = 10.0 * period;
        let u = propagate_unitary(|_| h.clone(), t, 200).unwrap();
        assert!(max_abs(&(u - rabi_analytic(omega, t))) < 1e-8);
    }

    #[test]
    fn second_order_convergence() {
        let h0 = diagonal_hamiltonian(&[0.0, 0.0, -1.3, -4.1], 0.0);
        let a = build_lowering(4).unwrap();
        let h_of_t = |t: f64| {
            let d = C64::from_polar(0.8 * (std::f64::consts::PI * t).sin().powi(2), -1.3 * t);
            &h0 + &a * d + a.adjoint() * d.conj()
        };
        let reference = propagate_unitary(h_of_t, 1.0, 1 << 14).unwrap();
        let err = |n| max_abs(&(propagate_unitary(h_of_t, 1.0, n).unwrap() - &reference));
        let (e1, e2) = (err(64), err(128));
        assert!(e1 / e2 >= 3.5, "ratio {}", e1 / e2);
        let path = unitary_trajectory(h_of_t, 1.0, 128).unwrap();
        assert!(path
            .states
            .iter()
            .all(|u| crate::linalg::unitarity_defect(u) < 1e-10));
    }

    #[test]
    fn density_matrix_validation() {
        assert!(DensityMatrix::new(identity(2)).is_err());
        let mut m = CMatrix::zeros(2, 2);
        m[(0, 0)] = C64::new(1.5, 0.0);
        m[(1, 1)] = C64::new(-0.5, 0.0);
        assert!(DensityMatrix::new(m).is_err());
        let mixed = DensityMatrix::maximally_mixed(3);
        assert_eq!(populations(&mixed), vec![1.0 / 3.0; 3]);
        assert_eq!(
            populations(&DensityMatrix::basis(3, 0)),
            vec![1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn sampled_csv_has_header() {
        let s = lindblad_superoperator(&diagonal_hamiltonian(&[0.0, 1.0], 0.0), &[]).unwrap();
        let r = propagate_sampled(&s, &DensityMatrix::basis(2, 1), 0.1, 3);
        let csv = r.populations_csv();
        assert!(csv.starts_with("time_s,p0,p1\n"));
        assert_eq!(csv.lines().count(), 5);
    }
}
