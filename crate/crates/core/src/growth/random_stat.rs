//! How well a random neuron aligns with a goal.
//!
//! With features `B = I_n`, one neuron `(alpha, omega)` contributes
//! `V(theta) = omega alpha^T`. For isotropic random draws the normalized
//! inner product `<V(theta), V_goal> / (||omega|| ||alpha|| ||V_goal||)` has
//! mean 0 and variance exactly `1 / (n d)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::numerics::Matrix;

use super::{random_neurons, Distribution};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomDirectionStat {
    pub mean: f64,
    pub std: f64,
    /// `1 / sqrt(n d)`
    pub expected_std: f64,
    pub trials: usize,
}

/// Normalized inner products of `trials` random neurons with a fixed
/// Gaussian goal of shape `d x n`.
pub fn random_direction_cosines(n: usize, d: usize, trials: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let goal = Matrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    let gn = goal.norm();
    (0..trials)
        .map(|t| {
            let nr = random_neurons(n, d, 1, Distribution::Gaussian, seed.wrapping_add(1 + t as u64));
            let w = nr.omega.column(0);
            let a = nr.alpha.column(0);
            let ip = (w.transpose() * &goal * a)[(0, 0)];
            ip / (w.norm() * a.norm() * gn)
        })
        .collect()
}

pub fn random_direction_statistic(n: usize, d: usize, trials: usize, seed: u64) -> RandomDirectionStat {
    let c = random_direction_cosines(n, d, trials, seed);
    let m = c.len() as f64;
    let mean = c.iter().sum::<f64>() / m;
    let var = c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    RandomDirectionStat { mean, std: var.sqrt(), expected_std: 1.0 / ((n * d) as f64).sqrt(), trials }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_bounded() {
        let a = random_direction_cosines(8, 3, 50, 1);
        assert_eq!(a, random_direction_cosines(8, 3, 50, 1));
        assert!(a.iter().all(|c| c.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn small_case_matches_rate() {
        let s = random_direction_statistic(16, 4, 4000, 2);
        assert!((s.std / s.expected_std - 1.0).abs() < 0.1, "{s:?}");
    }
}
