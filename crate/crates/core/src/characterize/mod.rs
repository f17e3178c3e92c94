//! Parameter inference from virtual-device experiments: curve fits,
//! π-pulse calibration, deterministic least squares and Bayesian sampling.

pub mod bayes;
pub mod calibrate;
pub mod det;
pub mod fit;
pub mod mcmc;

pub use bayes::{bayes_characterize, BayesConfig, BayesResult, RamseyPosterior, SAMPLE_NAMES};
pub use calibrate::{calibrate_pi, CalibrationConfig, CalibrationResult};
pub use det::{
    collect_datasets, det_characterize, det_objective, initial_guess, CharacterizationSetup,
    CollectionConfig, DetCharResult, DetConfig,
};
pub use fit::{CurveFit, ModelKind};
pub use mcmc::{mcmc_sample, rhat, run_chains, McmcConfig, PosteriorChain};
