//! Readout classification: a two-dimensional Gaussian mixture fitted by EM,
//! confusion-matrix estimation and measurement-error mitigation.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One readout shot in the I-Q plane.
pub type IqPoint = [f64; 2];

/// Fewest labeled shots per state accepted by [`estimate_confusion`].
pub const MIN_LABELED_SHOTS: usize = 1000;

/// Largest condition number accepted by [`mitigate`].
pub const MAX_CONDITION: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: [f64; 2],
    /// Row-major 2×2 covariance.
    pub cov: [[f64; 2]; 2],
    pub weight: f64,
}

impl GaussianComponent {
    fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.cov[0][0],
            self.cov[0][1],
            self.cov[1][0],
            self.cov[1][1],
        )
    }

    /// log N(x; μ, Σ).
    pub fn log_density(&self, x: IqPoint) -> f64 {
        let s = self.cov_matrix();
        let det = s.determinant();
        let d = Vector2::new(x[0] - self.mean[0], x[1] - self.mean[1]);
        let inv = Matrix2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]) / det;
        -0.5 * (d.transpose() * inv * d)[(0, 0)] - 0.5 * det.ln() - (2.0 * PI).ln()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub components: Vec<GaussianComponent>,
}

impl GmmModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Posterior responsibilities of every component for `x`.
    pub fn responsibilities(&self, x: IqPoint) -> Vec<f64> {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        p
    }

    /// Mean log-likelihood per point.
    pub fn log_likelihood(&self, points: &[IqPoint]) -> f64 {
        points
            .iter()
            .map(|&x| self.point_log_likelihood(x))
            .sum::<f64>()
            / points.len() as f64
    }

    fn point_log_likelihood(&self, x: IqPoint) -> f64 {
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }
}

/// Class probabilities of a single shot.
pub fn classify(model: &GmmModel, point: IqPoint) -> Vec<f64> {
    model.responsibilities(point)
}

/// Fits a `k`-component mixture by EM, starting from one mean hint per state.
///
/// Component `j` of the result corresponds to state `j` because EM is seeded
/// at `anchors[j]`; there is no label switching to resolve afterwards.
pub fn train_gmm(points: &[IqPoint], k: usize, anchors: &[IqPoint]) -> Result<GmmModel> {
    fit_em(points, k, anchors, 500, 1e-12).map(|(m, _)| m)
}

pub(crate) fn fit_em(
    points: &[IqPoint],
    k: usize,
    anchors: &[IqPoint],
    max_iter: usize,
    tol: f64,
) -> Result<(GmmModel, Vec<f64>)> {
    if k == 0 || anchors.len() != k {
        return Err(Error::Dimension {
            expected: k,
            found: anchors.len(),
        });
    }
    if points.len() < 10 * k {
        return Err(Error::InsufficientData(format!(
            "{} points for {k} components",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_all = points
        .iter()
        .fold([0.0; 2], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
    let var_all = points
        .iter()
        .map(|p| (p[0] - mean_all[0]).powi(2) + (p[1] - mean_all[1]).powi(2))
        .sum::<f64>()
        / (2.0 * n);
    let floor = 1e-8 * var_all.max(f64::MIN_POSITIVE);

    // hard assignment to the nearest anchor gives the starting responsibilities
    let mut resp: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let nearest = (0..k)
                .min_by(|&a, &b| dist2(p, &anchors[a]).total_cmp(&dist2(p, &anchors[b])))
                .unwrap_or(0);
            (0..k)
                .map(|j| if j == nearest { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();

    let mut model = m_step(points, &resp, floor)?;
    let mut trace = vec![model.log_likelihood(points)];
    for _ in 0..max_iter {
        resp = points.iter().map(|&p| model.responsibilities(p)).collect();
        model = m_step(points, &resp, floor)?;
        let ll = model.log_likelihood(points);
        let prev = *trace.last().unwrap_or(&ll);
        trace.push(ll);
        if (ll - prev).abs() <= tol * prev.abs().max(1.0) {
            break;
        }
    }
    Ok((model, trace))
}

fn dist2(a: &IqPoint, b: &IqPoint) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn m_step(points: &[IqPoint], resp: &[Vec<f64>], floor: f64) -> Result<GmmModel> {
    let k = resp[0].len();
    let n = points.len() as f64;
    let mut components = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        if nk < 2.0 {
            return Err(Error::DegenerateMixture(j));
        }
        let mut mean = [0.0; 2];
        for (p, r) in points.iter().zip(resp) {
            mean[0] += r[j] * p[0];
            mean[1] += r[j] * p[1];
        }
        mean = [mean[0] / nk, mean[1] / nk];
        let mut c = [[0.0; 2]; 2];
        for (p, r) in points.iter().zip(resp) {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            for a in 0..2 {
                for b in 0..2 {
                    c[a][b] += r[j] * d[a] * d[b];
                }
            }
        }
        for row in c.iter_mut() {
            row.iter_mut().for_each(|v| *v /= nk);
        }
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let min_eig = 0.5 * (c[0][0] + c[1][1])
            - (0.25 * (c[0][0] - c[1][1]).powi(2) + c[0][1] * c[1][0]).sqrt();
        if !(det > 0.0) || min_eig < floor {
            return Err(Error::DegenerateMixture(j));
        }
        components.push(GaussianComponent {
            mean,
            cov: c,
            weight: nk / n,
        });
    }
    Ok(GmmModel { components })
}

/// Column-stochastic confusion matrix, `c[i][j]` = Pr(read i | prepared j).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub c: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn identity(k: usize) -> Self {
        Self {
            c: (0..k)
                .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_fn(k, k, |i, j| self.c[i][j])
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.c[i][i]).collect()
    }

    /// Measured distribution for true populations `p`: C·p.
    pub fn forward(&self, p: &[f64]) -> Vec<f64> {
        self.c
            .iter()
            .map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// 2-norm condition number.
    pub fn condition_number(&self) -> f64 {
        let sv = self.matrix().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min <= 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }
}

/// Averages classifier output over shots with known preparation.
/// `labeled[j]` holds the shots prepared in state `j`.
pub fn estimate_confusion(model: &GmmModel, labeled: &[Vec<IqPoint>]) -> Result<ConfusionMatrix> {
    let k = model.n_components();
    if labeled.len() != k {
        return Err(Error::MissingLabel(labeled.len().min(k)));
    }
    let mut c = vec![vec![0.0; k]; k];
    for (j, shots) in labeled.iter().enumerate() {
        if shots.is_empty() {
            return Err(Error::MissingLabel(j));
        }
        if shots.len() < MIN_LABELED_SHOTS {
            return Err(Error::InsufficientData(format!(
                "{} labeled shots for state {j}",
                shots.len()
            )));
        }
        let mut col = vec![0.0; k];
        for &s in shots {
            for (acc, p) in col.iter_mut().zip(model.responsibilities(s)) {
                *acc += p;
            }
        }
        let total: f64 = col.iter().sum();
        for i in 0..k {
            c[i][j] = col[i] / total;
        }
    }
    Ok(ConfusionMatrix { c })
}

/// Mitigated populations: the unconstrained solve and its projection onto
/// the probability simplex by clamping and renormalizing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mitigated {
    pub raw: Vec<f64>,
    pub clamped: Vec<f64>,
}

/// Solves C·p = measured.
pub fn mitigate(c: &ConfusionMatrix, measured: &[f64]) -> Result<Mitigated> {
    if measured.len() != c.dim() {
        return Err(Error::Dimension {
            expected: c.dim(),
            found: measured.len(),
        });
    }
    let cond = c.condition_number();
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let raw = c
        .matrix()
        .lu()
        .solve(&DVector::from_column_slice(measured))
        .ok_or(Error::IllConditioned(f64::INFINITY))?;
    let raw: Vec<f64> = raw.iter().copied().collect();
    Ok(Mitigated {
        clamped: clamp_simplex(&raw),
        raw,
    })
}

pub fn clamp_simplex(p: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = p.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let s: f64 = q.iter().sum();
    if s > 0.0 {
        q.iter_mut().for_each(|v| *v /= s);
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cluster(rng: &mut ChaCha8Rng, mean: IqPoint, sigma: f64, n: usize) -> Vec<IqPoint> {
        (0..n)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                [mean[0] + sigma * a, mean[1] + sigma * b]
            })
            .collect()
    }

    fn three_clusters(seed: u64) -> (Vec<Vec<IqPoint>>, [IqPoint; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let means = [[0.0, 0.0], [10.0, 0.0], [5.0, 9.0]];
        let shots = means
            .iter()
            .map(|&m| cluster(&mut rng, m, 1.0, 4000))
            .collect();
        (shots, means)
    }

    #[test]
    fn recovers_separated_means() {
        let (shots, means) = three_clusters(1);
        let all: Vec<IqPoint> = shots.concat();
        let model = train_gmm(&all, 3, &[[1.0, 1.0], [9.0, 1.0], [5.0, 8.0]]).unwrap();
        for (j, c) in model.components.iter().enumerate() {
            // compare with the sample mean of the cluster that generated it
            let n = shots[j].len() as f64;
            let sm = shots[j]
                .iter()
                .fold([0.0; 2], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
            assert!(
                dist2(&c.mean, &sm).sqrt() < 0.05,
                "{j}: {:?} vs {:?}",
                c.mean,
                means[j]
            );
        }
    }

    #[test]
    fn single_component_is_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = cluster(&mut rng, [3.0, -1.0], 2.0, 500);
        let model = train_gmm(&pts, 1, &[[0.0, 0.0]]).unwrap();
        let n = pts.len() as f64;
        let m = pts
            .iter()
            .fold([0.0; 2], |a, p| [a[0] + p[0] / n, a[1] + p[1] / n]);
        let cxy = pts
            .iter()
            .map(|p| (p[0] - m[0]) * (p[1] - m[1]))
            .sum::<f64>()
            / n;
        let c = &model.components[0];
        assert!(dist2(&c.mean, &m) < 1e-20);
        assert!((c.cov[0][1] - cxy).abs() < 1e-12);
        assert_eq!(c.weight, 1.0);
    }

    #[test]
    fn em_log_likelihood_non_decreasing() {
        let (shots, _) = three_clusters(3);
        let all = shots.concat();
        let (_, trace) = fit_em(&all, 3, &[[3.0, 3.0], [7.0, 1.0], [4.0, 5.0]], 200, 0.0).unwrap();
        assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{trace:?}");
    }

    #[test]
    fn order_invariant() {
        let (shots, _) = three_clusters(4);
        let all = shots.concat();
        let mut rev = all.clone();
        rev.reverse();
        let anchors = [[0.0, 0.0], [10.0, 0.0], [5.0, 9.0]];
        let a = train_gmm(&all, 3, &anchors).unwrap();
        let b = train_gmm(&rev, 3, &anchors).unwrap();
        for (x, y) in a.components.iter().zip(&b.components) {
            assert!(dist2(&x.mean, &y.mean) < 1e-16);
            assert!((x.weight - y.weight).abs() < 1e-10);
        }
    }

    #[test]
    fn too_few_points_or_collapse() {
        assert!(train_gmm(&[[0.0, 0.0]; 5], 1, &[[0.0, 0.0]]).is_err());
        let pts = vec![[1.0, 1.0]; 100];
        assert!(matches!(
            train_gmm(&pts, 1, &[[0.0, 0.0]]),
            Err(Error::DegenerateMixture(0))
        ));
    }

    fn symmetric_model() -> GmmModel {
        let comp = |m: [f64; 2]| GaussianComponent {
            mean: m,
            cov: [[1.0, 0.0], [0.0, 1.0]],
            weight: 1.0 / 3.0,
        };
        GmmModel {
            components: vec![comp([0.0, 0.0]), comp([10.0, 0.0]), comp([5.0, 100.0])],
        }
    }

    #[test]
    fn classify_at_mean_and_midpoint() {
        let m = symmetric_model();
        assert!(classify(&m, [0.0, 0.0])[0] > 1.0 - 1e-9);
        let p = classify(&m, [5.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12 && p[2] < 1e-100);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weight_scaling_invariance() {
        let m = symmetric_model();
        let mut scaled = m.clone();
        scaled.components.iter_mut().for_each(|c| c.weight *= 7.5);
        let x = [4.0, 1.0];
        for (a, b) in classify(&m, x).iter().zip(classify(&scaled, x)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn confusion_of_separated_clusters_is_identity() {
        let m = symmetric_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shots: Vec<Vec<IqPoint>> = m
            .components
            .iter()
            .map(|c| cluster(&mut rng, c.mean, 0.3, 1000))
            .collect();
        let c = estimate_confusion(&m, &shots).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((c.c[i][j] - want).abs() < 1e-9);
            }
        }
        // swapping labels permutes columns
        let swapped = vec![shots[1].clone(), shots[0].clone(), shots[2].clone()];
        let d = estimate_confusion(&m, &swapped).unwrap();
        for i in 0..3 {
            assert_eq!(d.c[i][0], c.c[i][1]);
            assert_eq!(d.c[i][1], c.c[i][0]);
        }
        let missing = vec![shots[0].clone(), vec![], shots[2].clone()];
        assert!(matches!(
            estimate_confusion(&m, &missing),
            Err(Error::MissingLabel(1))
        ));
    }

    fn example_c() -> ConfusionMatrix {
        ConfusionMatrix {
            c: vec![
                vec![0.997, 0.017, 0.007],
                vec![0.002, 0.981, 0.042],
                vec![0.001, 0.002, 0.951],
            ],
        }
    }

    #[test]
    fn mitigation_examples() {
        let id = ConfusionMatrix::identity(3);
        let r = mitigate(&id, &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(r.raw, vec![0.2, 0.3, 0.5]);

        let c = example_c();
        for j in 0..3 {
            let col: Vec<f64> = (0..3).map(|i| c.c[i][j]).collect();
            let p = mitigate(&c, &col).unwrap().raw;
            for i in 0..3 {
                assert!((p[i] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let measured = [0.99, 0.008, 0.002];
        let m = mitigate(&c, &measured).unwrap();
        assert!((m.raw.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // independent solve by Cramer's rule
        let a = c.matrix();
        let det = a.determinant();
        for col in 0..3 {
            let mut b = a.clone();
            for i in 0..3 {
                b[(i, col)] = measured[i];
            }
            assert!((b.determinant() / det - m.raw[col]).abs() < 1e-12);
        }
        assert!(m.clamped.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mitigation_round_trip_and_conditioning() {
        let c = example_c();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut p: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|v| *v /= s);
            let back = mitigate(&c, &c.forward(&p)).unwrap().raw;
            for (a, b) in p.iter().zip(back) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let singular = ConfusionMatrix {
            c: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        assert!(matches!(
            mitigate(&singular, &[0.5, 0.5]),
            Err(Error::IllConditioned(_))
        ));
    }
}
