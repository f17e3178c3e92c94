//! Adaptive random-walk Metropolis sampling and split-chain r̂.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Consecutive rejections after which a chain is declared stuck.
pub const STUCK_LIMIT: usize = 1000;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_warmup: usize,
    /// Proposal standard deviation per coordinate before adaptation.
    pub initial_scale: Vec<f64>,
    /// Acceptance rate the global proposal scale is steered towards.
    pub target_acceptance: f64,
    pub seed: u64,
}

impl McmcConfig {
    pub fn new(initial_scale: Vec<f64>, seed: u64) -> Self {
        Self {
            n_warmup: 1000,
            initial_scale,
            target_acceptance: 0.3,
            seed,
        }
    }
}

/// Kept draws of one or more chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    /// `chains[c][i]` is draw `i` of chain `c`.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub acceptance_rate: f64,
    pub rhat: Vec<f64>,
}

impl PosteriorChain {
    pub fn dim(&self) -> usize {
        self.chains
            .first()
            .and_then(|c| c.first())
            .map_or(0, |s| s.len())
    }

    /// All draws, chains concatenated.
    pub fn samples(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.chains.iter().map(|c| c.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim()];
        for s in self.samples() {
            m.iter_mut().zip(s).for_each(|(a, b)| *a += b / n);
        }
        m
    }

    pub fn std(&self) -> Vec<f64> {
        let m = self.mean();
        let n = self.len() as f64;
        let mut v = vec![0.0; self.dim()];
        for s in self.samples() {
            v.iter_mut()
                .zip(s.iter().zip(&m))
                .for_each(|(a, (x, mu))| *a += (x - mu).powi(2));
        }
        v.into_iter().map(|x| (x / (n - 1.0)).sqrt()).collect()
    }

    /// One CSV row per draw: `chain,draw,<names...>`.
    pub fn to_csv(&self, names: &[&str]) -> String {
        use std::fmt::Write as _;
        let mut out = format!("chain,draw,{}\n", names.join(","));
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, s) in chain.iter().enumerate() {
                let row: Vec<String> = s.iter().map(|v| format!("{v:.12e}")).collect();
                let _ = writeln!(out, "{c},{i},{}", row.join(","));
            }
        }
        out
    }
}

/// Runs one chain: `n_warmup` adaptive steps (discarded), then `n_samples`
/// kept steps with the proposal frozen.
///
/// During warmup the proposal covariance tracks the empirical covariance of
/// the chain, scaled by 2.38²/d, and a global factor is tuned by stochastic
/// approximation towards the target acceptance rate.
pub fn mcmc_sample<F: Fn(&[f64]) -> f64>(
    log_target: F,
    n_samples: usize,
    init: &[f64],
    cfg: &McmcConfig,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let d = init.len();
    if cfg.initial_scale.len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: cfg.initial_scale.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = init.to_vec();
    let mut lp = log_target(&x);
    if !lp.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let mut chol = DMatrix::from_diagonal(&DVector::from_iterator(
        d,
        cfg.initial_scale.iter().copied(),
    ));
    let mut log_lambda = 0.0f64;
    let mut history: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_warmup);
    let mut kept = Vec::with_capacity(n_samples);
    let mut accepted_kept = 0usize;
    let mut rejections = 0usize;

    for it in 0..cfg.n_warmup + n_samples {
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &chol * z * log_lambda.exp();
        let y: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let lq = log_target(&y);
        let log_alpha = if lq.is_finite() {
            (lq - lp).min(0.0)
        } else {
            f64::NEG_INFINITY
        };
        let accept = rng.random::<f64>().ln() < log_alpha;
        if accept {
            x = y;
            lp = lq;
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= STUCK_LIMIT {
                return Err(Error::SamplerStuck(rejections));
            }
        }
        if it < cfg.n_warmup {
            let gain = 1.0 / ((it + 1) as f64).powf(0.6);
            log_lambda += gain * (log_alpha.exp() - cfg.target_acceptance);
            history.push(x.clone());
            let n = history.len();
            if n >= 100 && n % 50 == 0 {
                if let Some(l) = adapted_cholesky(&history[n / 2..]) {
                    chol = l;
                }
            }
        } else {
            accepted_kept += accept as usize;
            kept.push(x.clone());
        }
    }
    let rate = if n_samples > 0 {
        accepted_kept as f64 / n_samples as f64
    } else {
        0.0
    };
    Ok((kept, rate))
}

/// Cholesky factor of (2.38²/d)·Σ̂ + εI from recent warmup draws.
fn adapted_cholesky(draws: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let d = draws[0].len();
    let n = draws.len() as f64;
    let mut mean = vec![0.0; d];
    for s in draws {
        mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in draws {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (s[i] - mean[i]) * (s[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    let scale = 2.38 * 2.38 / d as f64;
    let trace = cov.trace() / d as f64;
    if !(trace > 0.0) {
        return None;
    }
    let mut c = cov * scale;
    for i in 0..d {
        c[(i, i)] += 1e-10 * trace;
    }
    c.cholesky().map(|ch| ch.l())
}

/// Runs several chains from the given starting points with seeds
/// `cfg.seed + c` and reports the merged draws with split-chain r̂.
pub fn run_chains<F: Fn(&[f64]) -> f64 + Sync>(
    log_target: F,
    n_samples: usize,
    inits: &[Vec<f64>],
    cfg: &McmcConfig,
) -> Result<PosteriorChain> {
    let results: Vec<Result<(Vec<Vec<f64>>, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = inits
            .iter()
            .enumerate()
            .map(|(c, init)| {
                let cfg = McmcConfig {
                    seed: cfg.seed.wrapping_add(c as u64),
                    ..cfg.clone()
                };
                let f = &log_target;
                scope.spawn(move || mcmc_sample(f, n_samples, init, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    let mut chains = Vec::with_capacity(inits.len());
    let mut rate = 0.0;
    for r in results {
        let (draws, acc) = r?;
        rate += acc / inits.len() as f64;
        chains.push(draws);
    }
    let rhat = rhat(&chains)?;
    Ok(PosteriorChain {
        chains,
        acceptance_rate: rate,
        rhat,
    })
}

/// Split-chain Gelman–Rubin statistic per coordinate.
///
/// Each chain is halved, and the between-half variance of the means is
/// compared with the pooled within-half variance.
pub fn rhat(chains: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    let n_total: usize = chains.iter().map(|c| c.len()).sum();
    let shortest = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if shortest < 100 && n_total < 100 || shortest < 4 {
        return Err(Error::InsufficientData(format!(
            "chain of length {shortest}"
        )));
    }
    let half = shortest / 2;
    let mut pieces: Vec<&[Vec<f64>]> = Vec::new();
    for c in chains {
        pieces.push(&c[..half]);
        pieces.push(&c[half..2 * half]);
    }
    let d = chains[0][0].len();
    let n = half as f64;
    let m = pieces.len() as f64;
    Ok((0..d)
        .map(|k| {
            let means: Vec<f64> = pieces
                .iter()
                .map(|p| p.iter().map(|s| s[k]).sum::<f64>() / n)
                .collect();
            let vars: Vec<f64> = pieces
                .iter()
                .zip(&means)
                .map(|(p, mu)| p.iter().map(|s| (s[k] - mu).powi(2)).sum::<f64>() / (n - 1.0))
                .collect();
            let grand = means.iter().sum::<f64>() / m;
            let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>();
            let w = vars.iter().sum::<f64>() / m;
            if w <= 0.0 {
                return if b > 0.0 { f64::INFINITY } else { 1.0 };
            }
            let var_plus = (n - 1.0) / n * w + b / n;
            (var_plus / w).sqrt()
        })
        .collect())
}
