//! Numerical optimizers: projected limited-memory BFGS for box-constrained
//! smooth problems, and Levenberg–Marquardt for small least-squares fits.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;

#[derive(Clone, Debug)]
pub struct BoxOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's ∞-norm falls below this.
    pub gtol: f64,
    /// Stop when an accepted step lowers f by less than `ftol · max(|f|, 1)`.
    pub ftol: f64,
    /// Number of correction pairs kept.
    pub memory: usize,
    /// Largest ∞-norm of the very first trial step.
    pub first_step: f64,
}

impl Default for BoxOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            gtol: 1e-8,
            ftol: 1e-12,
            memory: 10,
            first_step: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoxResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: &'static str,
    /// Objective after every accepted iteration, starting with f(x0).
    pub trace: Vec<f64>,
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &l), &u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(l, u);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Components of the gradient that can still move the iterate.
fn free_mask(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<bool> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&l, &u))| !((xi <= l && gi > 0.0) || (xi >= u && gi < 0.0) || l == u))
        .collect()
}

/// Minimizes `f` over the box `[lower, upper]`.
///
/// `f(x, grad)` returns the objective and writes the gradient. The search
/// direction comes from the L-BFGS two-loop recursion restricted to the
/// variables not held at an active bound; each step is a projected Armijo
/// backtracking search, so the objective never increases.
pub fn minimize_box<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &BoxOptions,
) -> BoxResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    assert_eq!(lower.len(), n, "lower bound length");
    assert_eq!(upper.len(), n, "upper bound length");
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    let mut trace = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut message = "maximum iterations reached";
    let mut converged = false;
    let mut iterations = 0;

    let mut g_new = vec![0.0; n];
    while iterations < opts.max_iter {
        let free = free_mask(&x, &g, lower, upper);
        let pg_norm = g
            .iter()
            .zip(&free)
            .filter(|(_, &fr)| fr)
            .fold(0.0f64, |m, (gi, _)| m.max(gi.abs()));
        if pg_norm <= opts.gtol {
            message = "projected gradient below tolerance";
            converged = true;
            break;
        }
        iterations += 1;

        let mut attempt = 0;
        let accepted = loop {
            let d = direction(&g, &free, &pairs);
            let slope = dot(&d, &g);
            let (d, slope) = if slope < 0.0 {
                (d, slope)
            } else {
                pairs.clear();
                let sd: Vec<f64> = g
                    .iter()
                    .zip(&free)
                    .map(|(gi, &fr)| if fr { -gi } else { 0.0 })
                    .collect();
                let s = dot(&sd, &g);
                (sd, s)
            };
            let _ = slope;
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mut alpha = if pairs.is_empty() {
                (opts.first_step / dmax).min(1.0)
            } else {
                1.0
            };
            let mut found = None;
            for _ in 0..40 {
                let mut trial: Vec<f64> =
                    x.iter().zip(&d).map(|(xi, di)| xi + alpha * di).collect();
                project(&mut trial, lower, upper);
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                if step.iter().all(|s| *s == 0.0) {
                    break;
                }
                let ft = f(&trial, &mut g_new);
                evaluations += 1;
                if ft.is_finite() && ft <= fx + 1e-4 * dot(&g, &step) {
                    found = Some((trial, ft, step));
                    break;
                }
                alpha *= 0.5;
            }
            match found {
                Some(v) => break Some(v),
                None if !pairs.is_empty() && attempt == 0 => {
                    pairs.clear();
                    attempt += 1;
                }
                None => break None,
            }
        };

        let Some((trial, ft, s)) = accepted else {
            message = "line search could not decrease the objective";
            converged = true;
            break;
        };
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = fx - ft;
        x = trial;
        fx = ft;
        g.copy_from_slice(&g_new);
        trace.push(fx);
        if decrease <= opts.ftol * fx.abs().max(1.0) {
            message = "relative decrease below tolerance";
            converged = true;
            break;
        }
    }
    BoxResult {
        x,
        f: fx,
        iterations,
        evaluations,
        converged,
        message,
        trace,
    }
}

fn direction(g: &[f64], free: &[bool], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(free)
            .map(|(x, &fr)| if fr { *x } else { 0.0 })
            .collect()
    };
    let mut q = mask(g);
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let s = mask(s);
        let a = rho * dot(&s, &q);
        let y = mask(y);
        q.iter_mut().zip(&y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        let (s, y) = (mask(s), mask(y));
        let yy = dot(&y, &y);
        if yy > 0.0 {
            let gamma = dot(&s, &y) / yy;
            if gamma > 0.0 {
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let (s, y) = (mask(s), mask(y));
        let b = rho * dot(&y, &q);
        q.iter_mut()
            .zip(&s)
            .for_each(|(qi, si)| *qi += (a - b) * si);
    }
    mask(&q).into_iter().map(|v| -v).collect()
}

/// Central finite-difference gradient with absolute step `h`.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative reduction of the sum of squares below which iteration stops.
    pub ftol: f64,
    /// Relative step size below which iteration stops.
    pub xtol: f64,
    /// Smallest curvature used for damping, relative to the largest diagonal
    /// entry of JᵀJ. Zero gives plain Marquardt scaling.
    pub damping_floor: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            ftol: 1e-15,
            xtol: 1e-14,
            damping_floor: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmResult {
    pub x: Vec<f64>,
    /// Euclidean norm of the residual vector at `x`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn jacobian<F: Fn(&[f64]) -> Vec<f64>>(r: &F, x: &[f64], r0: &[f64]) -> DMatrix<f64> {
    let m = r0.len();
    let mut j = DMatrix::zeros(m, x.len());
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = 1e-7 * x[k].abs().max(1e-3);
        xp[k] = x[k] + h;
        let rp = r(&xp);
        xp[k] = x[k] - h;
        let rm = r(&xp);
        xp[k] = x[k];
        for i in 0..m {
            j[(i, k)] = (rp[i] - rm[i]) / (2.0 * h);
        }
    }
    j
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

/// Minimizes ‖r(x)‖² with a Levenberg–Marquardt iteration (Marquardt's
/// diagonal scaling, finite-difference Jacobian). Parameters should be
/// scaled to order one by the caller.
pub fn levenberg_marquardt<F: Fn(&[f64]) -> Vec<f64>>(
    residuals: F,
    x0: &[f64],
    opts: &LmOptions,
) -> LmResult {
    levenberg_marquardt_with_jacobian(&residuals, |x, r| jacobian(&residuals, x, r), x0, opts)
}

/// As [`levenberg_marquardt`] with a caller-supplied Jacobian; `jac(x, r)`
/// receives the residuals already evaluated at `x`.
pub fn levenberg_marquardt_with_jacobian<F, J>(
    residuals: F,
    jac: J,
    x0: &[f64],
    opts: &LmOptions,
) -> LmResult
where
    F: Fn(&[f64]) -> Vec<f64>,
    J: Fn(&[f64], &[f64]) -> DMatrix<f64>,
{
    let mut x = x0.to_vec();
    let mut r = residuals(&x);
    let mut cost = sum_sq(&r);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let j = jac(&x, &r);
        let jt = j.transpose();
        let jtj = &jt * &j;
        let grad = &jt * DVector::from_column_slice(&r);
        if grad.amax() <= 1e-300 {
            converged = true;
            break;
        }
        // Directions the data does not constrain get damped against the
        // stiffest one so they cannot absorb arbitrarily long steps.
        let floor = opts.damping_floor * (0..x.len()).map(|k| jtj[(k, k)]).fold(0.0, f64::max);
        let mut improved = false;
        for _ in 0..60 {
            let mut a = jtj.clone();
            for k in 0..x.len() {
                a[(k, k)] += lambda * jtj[(k, k)].max(floor).max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let rt = residuals(&trial);
            let ct = sum_sq(&rt);
            if ct.is_finite() && ct < cost {
                let rel = (cost - ct) / cost.max(1e-300);
                let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let small_step = step.norm() <= opts.xtol * (xnorm + opts.xtol);
                x = trial;
                r = rt;
                cost = ct;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                if rel <= opts.ftol || small_step {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e16 {
                break;
            }
        }
        if !improved {
            // no downhill step exists at any damping: a stationary point
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    LmResult {
        x,
        residual_norm: cost.sqrt(),
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let opts = BoxOptions {
            max_iter: 500,
            gtol: 1e-10,
            ftol: 0.0,
            ..Default::default()
        };
        let r = minimize_box(rosenbrock, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &opts);
        assert!(
            (r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6,
            "{r:?}"
        );
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn active_bound() {
        let opts = BoxOptions::default();
        let r = minimize_box(rosenbrock, &[0.0, 0.0], &[-2.0, -2.0], &[0.5, 2.0], &opts);
        assert!((r.x[0] - 0.5).abs() < 1e-12);
        assert!((r.x[1] - 0.25).abs() < 1e-5, "{r:?}");
    }

    #[test]
    fn fully_constrained_box_stays_put() {
        let r = minimize_box(
            rosenbrock,
            &[0.3, 0.3],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &BoxOptions::default(),
        );
        assert_eq!(r.x, vec![0.0, 0.0]);
        assert!(r.converged);
    }

    #[test]
    fn quadratic_with_many_variables() {
        let n = 40;
        let f = |x: &[f64], g: &mut [f64]| {
            let mut v = 0.0;
            for i in 0..x.len() {
                let w = 1.0 + i as f64;
                v += w * (x[i] - 0.3).powi(2);
                g[i] = 2.0 * w * (x[i] - 0.3);
            }
            v
        };
        let r = minimize_box(
            f,
            &vec![0.0; n],
            &vec![-1.0; n],
            &vec![1.0; n],
            &BoxOptions::default(),
        );
        assert!(r.x.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn lm_fits_exponential() {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y: Vec<f64> = t.iter().map(|t| 2.0 * (-t / 1.7).exp() + 0.3).collect();
        let res = |p: &[f64]| {
            t.iter()
                .zip(&y)
                .map(|(t, y)| p[0] * (-t / p[1]).exp() + p[2] - y)
                .collect()
        };
        let r = levenberg_marquardt(res, &[1.0, 1.0, 0.0], &LmOptions::default());
        assert!(
            (r.x[0] - 2.0).abs() < 1e-8
                && (r.x[1] - 1.7).abs() < 1e-8
                && (r.x[2] - 0.3).abs() < 1e-8
        );
        assert!(r.residual_norm < 1e-8);
    }

    #[test]
    fn fd_gradient_of_quadratic() {
        let g = fd_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }
}
