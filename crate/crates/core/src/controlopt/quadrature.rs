use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nodes (parameter vectors) with probability weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(nodes: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let rule = Self { nodes, weights };
        rule.validate()?;
        Ok(rule)
    }

    pub fn single(node: Vec<f64>) -> Self {
        Self {
            nodes: vec![node],
            weights: vec![1.0],
        }
    }

    /// Equal-weight rule on the given nodes.
    pub fn uniform(nodes: Vec<Vec<f64>>) -> Result<Self> {
        let w = 1.0 / nodes.len().max(1) as f64;
        let n = nodes.len();
        Self::new(nodes, vec![w; n])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.nodes.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() || self.nodes.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.nodes.len().max(1),
                found: self.weights.len(),
            });
        }
        let d = self.dim();
        if let Some(bad) = self.nodes.iter().find(|n| n.len() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: bad.len(),
            });
        }
        if let Some(&w) = self.weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(Error::OutOfRange {
                what: "quadrature weight",
                value: w,
            });
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::OutOfRange {
                what: "sum of quadrature weights",
                value: total,
            });
        }
        Ok(())
    }

    /// Σ_k w_k f(z_k).
    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * f(z))
            .sum()
    }
}

/// Gauss rule for the empirical distribution of `samples`.
///
/// The three-term recurrence of the polynomials orthogonal under the sample
/// measure is built with the Stieltjes procedure on standardized samples,
/// and the Jacobi matrix eigenpairs give nodes and weights (Golub–Welsch).
/// The rule reproduces the sample moments up to degree 2n − 1.
pub fn gauss_rule_from_samples(samples: &[f64], n_nodes: usize) -> Result<QuadratureRule> {
    if n_nodes == 0 {
        return Err(Error::OutOfRange {
            what: "n_nodes",
            value: 0.0,
        });
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let m = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / m;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
    if sd == 0.0 || n_nodes == 1 {
        return Ok(QuadratureRule::single(vec![mean]));
    }
    let x: Vec<f64> = samples.iter().map(|v| (v - mean) / sd).collect();

    let mut alpha = Vec::with_capacity(n_nodes);
    let mut beta = Vec::with_capacity(n_nodes);
    let mut prev = vec![0.0; x.len()];
    let mut cur = vec![1.0; x.len()];
    let mut norm_prev = 1.0;
    for k in 0..n_nodes {
        let norm: f64 = cur.iter().map(|p| p * p).sum::<f64>() / m;
        if k > 0 {
            let b = norm / norm_prev;
            if !(b > 1e-12) {
                return Err(Error::IllConditioned(1.0 / b.max(f64::MIN_POSITIVE)));
            }
            beta.push(b);
        }
        let a = x.iter().zip(&cur).map(|(xi, p)| xi * p * p).sum::<f64>() / m / norm;
        alpha.push(a);
        let b_k = if k > 0 { beta[k - 1] } else { 0.0 };
        let next: Vec<f64> = x
            .iter()
            .zip(cur.iter().zip(&prev))
            .map(|(xi, (p, q))| (xi - a) * p - b_k * q)
            .collect();
        prev = std::mem::replace(&mut cur, next);
        norm_prev = norm;
    }

    let jacobi = DMatrix::from_fn(n_nodes, n_nodes, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i].sqrt()
        } else if j + 1 == i {
            beta[j].sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n_nodes)
        .map(|k| {
            (
                mean + sd * eig.eigenvalues[k],
                eig.eigenvectors[(0, k)].powi(2),
            )
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(QuadratureRule {
        nodes: pairs.iter().map(|p| vec![p.0]).collect(),
        weights: pairs.iter().map(|p| p.1 / total).collect(),
    })
}

/// Product rule: every pair of nodes, concatenated, with product weights.
pub fn tensor_rule(a: &QuadratureRule, b: &QuadratureRule) -> QuadratureRule {
    let mut nodes = Vec::with_capacity(a.len() * b.len());
    let mut weights = Vec::with_capacity(a.len() * b.len());
    for (za, wa) in a.nodes.iter().zip(&a.weights) {
        for (zb, wb) in b.nodes.iter().zip(&b.weights) {
            nodes.push(za.iter().chain(zb).copied().collect());
            weights.push(wa * wb);
        }
    }
    QuadratureRule { nodes, weights }
}
