//! Fixtures shared by the benchmarks.

use qudit_core::classify::IqPoint;
use qudit_core::controlopt::ControlProblem;
use qudit_core::vdevice::default_clusters;
use qudit_core::ControlVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Random control with coefficients up to `scale` (rad/s).
pub fn random_control(problem: &ControlProblem, scale: f64, seed: u64) -> ControlVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..problem.n_params())
        .map(|_| scale * rng.random_range(-1.0..1.0))
        .collect();
    problem
        .control_from_flat(&flat)
        .expect("flat vector matches the problem")
}

/// `n` readout points per state drawn from the default clusters.
pub fn readout_points(n: usize, seed: u64) -> Vec<Vec<IqPoint>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    default_clusters()
        .iter()
        .map(|c| {
            let sd = c.cov[0][0].sqrt();
            (0..n)
                .map(|_| {
                    [
                        c.mean[0] + sd * unit.sample(&mut rng),
                        c.mean[1] + sd * unit.sample(&mut rng),
                    ]
                })
                .collect()
        })
        .collect()
}

/// Samples from a normal distribution, standing in for a posterior column.
pub fn normal_samples(mean: f64, sd: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(mean, sd).expect("finite parameters");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}
