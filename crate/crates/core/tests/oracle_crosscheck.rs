//! Independent references for the bottleneck formulas. None of these use
//! the library's SVD, pseudo-inverse or whitening: the best update comes
//! from a Cholesky solve of the normal equations and the rank-one neuron
//! from alternating least squares.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use neurogrow::bottleneck::{best_update, bottleneck_value, contribution_fc, optimal_neurons, project_goal, stats_fc};
use neurogrow::growth::{overfit_construct, OverfitOptions};
use neurogrow::net::{Activation, Loss, Network, Value};
use neurogrow::numerics::DEFAULT_RCOND;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Full-row-rank `B`: `dW = V B^T (B B^T)^{-1}` by Cholesky.
fn cholesky_update(b: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = b * b.transpose();
    let chol = gram.cholesky().expect("B has full row rank");
    // dW G = V B^T  <=>  G dW^T = B V^T
    chol.solve(&(b * v.transpose())).transpose()
}

/// `min_{a, w} (1/n) ||T - w a^T B||^2` by alternating exact solves.
fn rank_one_als(b: &DMatrix<f64>, t: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let n = t.ncols() as f64;
    let mut a = gaussian(rng, b.nrows(), 1);
    let gram_chol = (b * b.transpose()).cholesky().expect("B has full row rank");
    let mut best = f64::INFINITY;
    for _ in 0..2000 {
        // fixed a: z = a^T B, best w = T z^T / |z|^2
        let z = a.transpose() * b;
        let w = t * z.transpose() / sq(&z);
        // fixed w: minimize ||T - w (a^T B)||^2 over a, i.e. a^T B = w^T T / |w|^2
        let target = w.transpose() * t / sq(&w);
        a = gram_chol.solve(&(b * target.transpose()));
        let z = a.transpose() * b;
        let w = t * z.transpose() / sq(&z);
        let obj = sq(&(t - &w * &z)) / n;
        if best - obj < 1e-15 * best.abs() {
            best = best.min(obj);
            break;
        }
        best = obj;
    }
    best
}

#[test]
fn best_update_matches_cholesky_on_full_rank_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..25 {
        let d = rng.random_range(1..=8);
        let n = rng.random_range(d + 2..=40);
        let out = rng.random_range(1..=5);
        let b = gaussian(&mut rng, d, n);
        let v = gaussian(&mut rng, out, n);
        let ours = best_update(&b, &v, DEFAULT_RCOND).unwrap();
        let reference = cholesky_update(&b, &v);
        assert!((&ours - &reference).norm() <= 1e-9 * reference.norm().max(1.0));
        let psi = bottleneck_value(&v, &b, DEFAULT_RCOND).unwrap();
        let direct = sq(&(&v - &reference * &b)) / n as f64;
        assert!((psi - direct).abs() <= 1e-9 * direct.max(1e-12));
    }
}

#[test]
fn first_neuron_matches_alternating_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..15 {
        let d = rng.random_range(2..=6);
        let n = rng.random_range(3 * d..=50);
        let out = rng.random_range(2..=4);
        let b = gaussian(&mut rng, d, n);
        let b2 = gaussian(&mut rng, 3, n);
        let v = gaussian(&mut rng, out, n);
        let vp = project_goal(&v, &cholesky_update(&b2, &v), &b2);
        let psi = sq(&vp) / n as f64;
        let stats = stats_fc(&b, &vp).unwrap();
        let neurons = optimal_neurons(&stats, Some(1), DEFAULT_RCOND).unwrap();
        let predicted = psi - neurons.lambda_sum_sq();
        let achieved = sq(&(&vp - contribution_fc(&neurons, &b))) / n as f64;
        // best of several starts guards against a slow ALS run
        let reference = (0..4).map(|_| rank_one_als(&b, &vp, &mut rng)).fold(f64::INFINITY, f64::min);
        assert!((predicted - reference).abs() <= 1e-6 * psi, "predicted {predicted} vs ALS {reference}");
        assert!((achieved - reference).abs() <= 1e-6 * psi, "achieved {achieved} vs ALS {reference}");
    }
}

#[test]
fn square_loss_output_goal_is_twice_the_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let net = Network::mlp(3, &[5], 2, Activation::Tanh, &mut rng).unwrap();
    let x = gaussian(&mut rng, 3, 7);
    let y = gaussian(&mut rng, 2, 7);
    let xv = Value::Flat(x);
    let cache = net.forward_cached(&xv).unwrap();
    let goals = net.loss_and_goals(&cache, &y, Loss::Square).unwrap();
    let f = net.forward(&xv).unwrap().to_flat();
    let expected = (&y - &f) * 2.0;
    let got = goals.v.last().unwrap().to_flat();
    assert!((got - expected).amax() < 1e-14);
}

#[test]
fn overfit_net_interpolates_by_direct_evaluation() {
    // evaluate the grown net by hand: sum_j w_j relu(a.x - b_j)
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let x = gaussian(&mut rng, 2, 20);
    let y = gaussian(&mut rng, 1, 20);
    let t = overfit_construct(&x, &y, &OverfitOptions::default()).unwrap();
    for (sorted, &i) in t.order.iter().enumerate() {
        let p: f64 = x.column(i).iter().zip(&t.direction).map(|(u, v)| u * v).sum();
        let f: f64 = (0..20).map(|j| t.weights[(0, j)] * (p - t.biases[j]).max(0.0)).sum();
        assert!((f - y[(0, i)]).abs() < 1e-8, "sample {i} (sorted {sorted}): {f} vs {}", y[(0, i)]);
    }
}
