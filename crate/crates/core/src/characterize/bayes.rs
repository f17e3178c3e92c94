//! Bayesian refinement of the transition frequencies from Ramsey data.
//!
//! The decay and dephasing rates stay at their deterministic estimates. The
//! three frequencies get truncated Gaussian priors centred on the
//! deterministic fit, and each Ramsey experiment has its own Gaussian noise
//! level σ with an inverse-Gamma prior on σ².

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::det::{simulate_dataset, CharacterizationSetup, DetCharResult};
use super::mcmc::{rhat, run_chains, McmcConfig, PosteriorChain};
use crate::error::{Error, Result};
use crate::qmodel::hz;
use crate::vdevice::{ExperimentData, ExperimentKind};

/// Column names of the posterior samples.
pub const SAMPLE_NAMES: [&str; 5] = [
    "omega01",
    "omega12_plus",
    "omega12_minus",
    "sigma01",
    "sigma12",
];

/// Unit of the sampler's frequency coordinates.
const SAMPLER_FREQ_UNIT: f64 = 2.0 * std::f64::consts::PI * 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesConfig {
    pub prior_sd: f64,
    /// Half width of the prior truncation window.
    pub truncation: f64,
    /// Inverse-Gamma shape and scale for σ².
    pub alpha: f64,
    pub beta: f64,
    pub n_samples: usize,
    pub n_warmup: usize,
    pub n_chains: usize,
    pub seed: u64,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            prior_sd: hz(50e3),
            truncation: hz(125e3),
            alpha: 2.0,
            beta: 1e-4,
            n_samples: 1000,
            n_warmup: 1000,
            n_chains: 4,
            seed: 0,
        }
    }
}

/// Posterior over (ω01, ω⁺12, ω⁻12, σ01, σ12) given Ramsey data.
pub struct RamseyPosterior<'a> {
    datasets: Vec<&'a ExperimentData>,
    setup: CharacterizationSetup,
    /// Deterministic estimate; supplies the prior means and the fixed rates.
    det_y: Vec<f64>,
    cfg: BayesConfig,
}

impl<'a> RamseyPosterior<'a> {
    /// Keeps the Ramsey datasets of 0↔1 and 1↔2; other data is ignored.
    pub fn new(
        datasets: &'a [ExperimentData],
        setup: CharacterizationSetup,
        det: &DetCharResult,
        cfg: BayesConfig,
    ) -> Result<Self> {
        let datasets: Vec<&ExperimentData> = datasets
            .iter()
            .filter(|d| d.kind == ExperimentKind::Ramsey && d.level <= 1)
            .collect();
        if datasets.is_empty() {
            return Err(Error::InsufficientData("no Ramsey data".into()));
        }
        Ok(Self {
            datasets,
            setup,
            det_y: det.y.clone(),
            cfg,
        })
    }

    pub fn prior_mean(&self) -> [f64; 3] {
        [self.det_y[0], self.det_y[1], self.det_y[2]]
    }

    pub fn within_truncation(&self, z: &[f64]) -> bool {
        z.iter()
            .zip(self.prior_mean())
            .all(|(v, m)| (v - m).abs() <= self.cfg.truncation)
    }

    fn full_y(&self, z: &[f64]) -> Vec<f64> {
        let mut y = self.det_y.clone();
        y[..3].copy_from_slice(&z[..3]);
        y
    }

    /// Σ over data of −(P − P̂)²/(2σ²) − ln σ.
    pub fn log_likelihood(&self, z: &[f64], sigmas: [f64; 2]) -> Result<f64> {
        if z.len() != 3 {
            return Err(Error::Dimension {
                expected: 3,
                found: z.len(),
            });
        }
        let y = self.full_y(z);
        let mut total = 0.0;
        for d in &self.datasets {
            let sigma = sigmas[d.level];
            let sim = simulate_dataset(&y, d, &self.setup)?;
            let (mut sse, mut n) = (0.0, 0usize);
            for (s, m) in sim.iter().zip(&d.pops) {
                for (a, b) in s.iter().zip(m) {
                    sse += (a - b).powi(2);
                    n += 1;
                }
            }
            total += -sse / (2.0 * sigma * sigma) - n as f64 * sigma.ln();
        }
        Ok(total)
    }

    /// Unnormalized log posterior; −∞ outside the truncation window or for
    /// non-positive σ.
    pub fn log_posterior(&self, z: &[f64], sigmas: [f64; 2]) -> Result<f64> {
        if !self.within_truncation(z) || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Ok(f64::NEG_INFINITY);
        }
        let s2 = self.cfg.prior_sd * self.cfg.prior_sd;
        let prior: f64 = z
            .iter()
            .zip(self.prior_mean())
            .map(|(v, m)| -(v - m).powi(2) / (2.0 * s2))
            .sum();
        let hyper: f64 = sigmas
            .iter()
            .map(|s| {
                let v = s * s;
                -(self.cfg.alpha + 1.0) * v.ln() - self.cfg.beta / v
            })
            .sum();
        Ok(prior + hyper + self.log_likelihood(z, sigmas)?)
    }

    /// Residual RMS at the deterministic estimate, per Ramsey level.
    pub fn residual_scale(&self) -> Result<[f64; 2]> {
        let y = self.det_y.clone();
        let mut out = [1e-2; 2];
        for d in &self.datasets {
            let sim = simulate_dataset(&y, d, &self.setup)?;
            let (mut sse, mut n) = (0.0, 0usize);
            for (s, m) in sim.iter().zip(&d.pops) {
                for (a, b) in s.iter().zip(m) {
                    sse += (a - b).powi(2);
                    n += 1;
                }
            }
            out[d.level] = (sse / n as f64).sqrt().max(1e-6);
        }
        Ok(out)
    }

    /// Target in sampler coordinates u = ((z − μ)/2π·1 kHz, ln σ01, ln σ12),
    /// including the Jacobian of σ² with respect to ln σ.
    fn log_target(&self, u: &[f64]) -> f64 {
        let mu = self.prior_mean();
        let z: Vec<f64> = (0..3).map(|i| mu[i] + u[i] * SAMPLER_FREQ_UNIT).collect();
        let sigmas = [u[3].exp(), u[4].exp()];
        match self.log_posterior(&z, sigmas) {
            Ok(lp) if lp.is_finite() => lp + sigmas.iter().map(|s| (2.0 * s * s).ln()).sum::<f64>(),
            _ => f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesResult {
    /// Samples in physical units, columns as in [`SAMPLE_NAMES`].
    pub chain: PosteriorChain,
    pub prior_mean: [f64; 3],
    pub config: BayesConfig,
}

impl BayesResult {
    pub fn mean(&self) -> Vec<f64> {
        self.chain.mean()
    }

    pub fn std(&self) -> Vec<f64> {
        self.chain.std()
    }

    /// Draws of (ω01, ω⁺12, ω⁻12) only.
    pub fn frequency_samples(&self) -> Vec<[f64; 3]> {
        self.chain.samples().map(|s| [s[0], s[1], s[2]]).collect()
    }
}

/// Runs `n_chains` adaptive Metropolis chains on the Ramsey posterior,
/// started near the deterministic estimate.
pub fn bayes_characterize(
    datasets: &[ExperimentData],
    setup: CharacterizationSetup,
    det: &DetCharResult,
    cfg: &BayesConfig,
) -> Result<BayesResult> {
    if cfg.n_chains == 0 {
        return Err(Error::Config("at least one chain is required".into()));
    }
    let post = RamseyPosterior::new(datasets, setup, det, cfg.clone())?;
    let scale = post.residual_scale()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let inits: Vec<Vec<f64>> = (0..cfg.n_chains)
        .map(|_| {
            let mut u: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
            u.extend(scale.iter().map(|s| s.ln() + rng.random_range(-0.05..0.05)));
            u
        })
        .collect();
    let mcmc = McmcConfig {
        n_warmup: cfg.n_warmup,
        initial_scale: vec![0.3, 0.3, 0.3, 0.03, 0.03],
        target_acceptance: 0.3,
        seed: cfg.seed,
    };
    let raw = run_chains(|u: &[f64]| post.log_target(u), cfg.n_samples, &inits, &mcmc)?;
    let mu = post.prior_mean();
    let chains: Vec<Vec<Vec<f64>>> = raw
        .chains
        .iter()
        .map(|c| {
            c.iter()
                .map(|u| {
                    let mut s: Vec<f64> =
                        (0..3).map(|i| mu[i] + u[i] * SAMPLER_FREQ_UNIT).collect();
                    s.extend([u[3].exp(), u[4].exp()]);
                    s
                })
                .collect()
        })
        .collect();
    let rhat = rhat(&chains)?;
    Ok(BayesResult {
        chain: PosteriorChain {
            chains,
            acceptance_rate: raw.acceptance_rate,
            rhat,
        },
        prior_mean: mu,
        config: cfg.clone(),
    })
}
