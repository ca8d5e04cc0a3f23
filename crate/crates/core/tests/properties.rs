//! Randomized invariants of the growth primitives.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use neurogrow::bottleneck::{best_update, contribution_fc, optimal_neurons, project_goal, stats_fc};
use neurogrow::growth::{amplitude_factor, apply_addition, propose_tiny, AmplitudeConfig, ProposalConfig, Scaling};
use neurogrow::harness::checkpoint::{decode, encode};
use neurogrow::net::{Activation, Loss, Network, Value};
use neurogrow::numerics::{frobenius_sq, Matrix, DEFAULT_RCOND};

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn activation(i: u8) -> Activation {
    [Activation::Selu, Activation::Relu, Activation::Tanh][i as usize % 3]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lambdas_sorted_positive_and_bounded_by_psi(seed in any::<u64>(), d in 1usize..8, out in 1usize..6, n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = gaussian(&mut rng, d, n);
        let v = gaussian(&mut rng, out, n);
        let neurons = optimal_neurons(&stats_fc(&b, &v).unwrap(), None, DEFAULT_RCOND).unwrap();
        let psi = frobenius_sq(&v) / n as f64;
        prop_assert!(neurons.lambdas.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(neurons.lambdas.iter().all(|&l| l > 0.0));
        prop_assert!(neurons.lambda_sum_sq() <= psi * (1.0 + 1e-9));
        let rest = frobenius_sq(&(&v - contribution_fc(&neurons, &b))) / n as f64;
        prop_assert!((rest - (psi - neurons.lambda_sum_sq())).abs() <= 1e-8 * psi.max(1e-300));
    }

    #[test]
    fn projected_goal_is_orthogonal_to_inputs(seed in any::<u64>(), d in 1usize..8, out in 1usize..5, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = gaussian(&mut rng, d, n);
        let v = gaussian(&mut rng, out, n);
        let vp = project_goal(&v, &best_update(&b, &v, DEFAULT_RCOND).unwrap(), &b);
        let cross = &vp * b.transpose();
        prop_assert!(cross.norm() <= 1e-9 * (v.norm() * b.norm()).max(1e-300));
        prop_assert!(frobenius_sq(&vp) <= frobenius_sq(&v) * (1.0 + 1e-12));
    }

    #[test]
    fn zero_amplitude_addition_keeps_outputs_bit_identical(seed in any::<u64>(), act in 0u8..3, k in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::mlp(3, &[2, 3], 2, activation(act), &mut rng).unwrap();
        let x = Value::Flat(gaussian(&mut rng, 3, 6));
        let y = gaussian(&mut rng, 2, 6);
        let prop = propose_tiny(&net, &x, &y, Loss::Square, 0, &ProposalConfig { max_neurons: Some(k), ..Default::default() }).unwrap();
        let grown = apply_addition(&net, 0, &prop.neurons, 0.0, Scaling::Sqrt).unwrap();
        let a = net.forward(&x).unwrap().to_flat();
        let b = grown.forward(&x).unwrap().to_flat();
        prop_assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn amplitude_search_never_increases_loss(seed in any::<u64>(), act in 0u8..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::mlp(2, &[2], 1, activation(act), &mut rng).unwrap();
        let x = Value::Flat(gaussian(&mut rng, 2, 12));
        let y = gaussian(&mut rng, 1, 12);
        let prop = propose_tiny(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).unwrap();
        let r = amplitude_factor(&net, 0, &prop.neurons, &x, &y, Loss::Square, &AmplitudeConfig::default()).unwrap();
        prop_assert!(r.fx <= r.f0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact(seed in any::<u64>(), act in 0u8..3, h in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::mlp(4, &[h, 2], 3, activation(act), &mut rng).unwrap();
        let bytes = encode(&net);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &net);
        prop_assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed in any::<u64>(), cut in 0usize..64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bytes = encode(&Network::mlp(2, &[3], 1, Activation::Relu, &mut rng).unwrap());
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode(&bytes[..cut]).is_err());
    }
}
