//! Constructive interpolation of `n` distinct samples with `n` ReLU units.
//!
//! Samples are projected on a direction `a` with distinct projections and
//! sorted. Unit `j` is `relu(a.x - b_j)` with `b_j` between the projections
//! of samples `j - 1` and `j`, so it is active on samples `j..n` only and the
//! activation matrix restricted to the sorted samples is lower triangular.
//! Units are added from the tail; after each one the trailing triangular
//! system is re-solved for the output weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bottleneck::Neurons;
use crate::net::{Activation, Dense, Layer, Loss, Network, Shape, Value};
use crate::numerics::Matrix;

use super::{apply_addition, GrowthError, Result, Scaling};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasRule {
    /// `b_j = p_j - d + eps` with `eps = eps_fraction * d`, `d` the minimum
    /// gap between sorted projections. Needs `0 < eps_fraction < 1`.
    Offset { eps_fraction: f64 },
    /// `b_j = p_{j-1} + fraction * (p_j - p_{j-1})`; the first knot sits
    /// `(1 - fraction) * d` below `p_0`. Needs `0 <= fraction < 1`.
    ///
    /// Each knot then splits its own gap in a fixed ratio, so the error
    /// carried from one gap to the next is scaled by
    /// `fraction / (1 - fraction)` regardless of how uneven the gaps are.
    Between { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverfitOptions {
    pub direction_trials: usize,
    pub seed: u64,
    pub bias_rule: BiasRule,
}

impl Default for OverfitOptions {
    fn default() -> Self {
        OverfitOptions { direction_trials: 64, seed: 0, bias_rule: BiasRule::Between { fraction: 0.5 } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitTrace {
    pub net: Network,
    pub direction: Vec<f64>,
    /// Sample indices sorted by projection.
    pub order: Vec<usize>,
    /// Knots in sorted order.
    pub biases: Vec<f64>,
    /// Output weights of the final network, in sorted order.
    pub weights: Matrix,
    pub initial_loss: f64,
    /// Training loss after each addition.
    pub losses: Vec<f64>,
}

fn projections(x: &Matrix, a: &[f64]) -> Vec<f64> {
    (0..x.ncols()).map(|i| x.column(i).iter().zip(a).map(|(u, v)| u * v).sum()).collect()
}

fn sorted_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
    order
}

fn min_gap(p: &[f64], order: &[usize]) -> f64 {
    order.windows(2).map(|w| p[w[1]] - p[w[0]]).fold(f64::INFINITY, f64::min)
}

/// Unit direction maximizing the minimum gap between sorted projections,
/// among `trials` Gaussian draws (`a = 1` in one dimension).
pub fn best_direction(x: &Matrix, trials: usize, seed: u64) -> Vec<f64> {
    let d = x.nrows();
    if d == 1 {
        return vec![1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (f64::NEG_INFINITY, vec![0.0; d]);
    for _ in 0..trials.max(1) {
        let mut a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        a.iter_mut().for_each(|v| *v /= norm);
        let p = projections(x, &a);
        let gap = min_gap(&p, &sorted_order(&p));
        if gap > best.0 {
            best = (gap, a);
        }
    }
    best.1
}

/// Lower-triangular solve on the sorted tail `k..n`.
fn solve_tail(p: &[f64], biases: &[f64], y_sorted: &Matrix, k: usize) -> Matrix {
    let n = p.len();
    let mut w = Matrix::zeros(y_sorted.nrows(), n);
    for j in k..n {
        let diag = (p[j] - biases[j]).max(0.0);
        for o in 0..y_sorted.nrows() {
            let mut r = y_sorted[(o, j)];
            for i in k..j {
                r -= (p[j] - biases[i]).max(0.0) * w[(o, i)];
            }
            w[(o, j)] = r / diag;
        }
    }
    w
}

/// One-hidden-layer ReLU network with `n` units interpolating `(x, y)`
/// (samples are columns), grown one unit at a time from width 0.
pub fn overfit_construct(x: &Matrix, y: &Matrix, opts: &OverfitOptions) -> Result<OverfitTrace> {
    let (d, n) = x.shape();
    if n == 0 || y.ncols() != n {
        return Err(GrowthError::Domain(format!("need matching nonempty samples, got {n} inputs and {} targets", y.ncols())));
    }
    for i in 0..n {
        for j in i + 1..n {
            if x.column(i) == x.column(j) {
                return Err(GrowthError::Domain(format!("duplicate samples {i} and {j}")));
            }
        }
    }
    match opts.bias_rule {
        BiasRule::Offset { eps_fraction } if !(eps_fraction > 0.0 && eps_fraction < 1.0) => {
            return Err(GrowthError::Domain(format!("offset fraction must lie in (0, 1), got {eps_fraction}")));
        }
        BiasRule::Between { fraction } if !(0.0..1.0).contains(&fraction) => {
            return Err(GrowthError::Domain(format!("knot fraction must lie in [0, 1), got {fraction}")));
        }
        _ => {}
    }
    let a = best_direction(x, opts.direction_trials, opts.seed);
    let p_raw = projections(x, &a);
    let order = sorted_order(&p_raw);
    let p: Vec<f64> = order.iter().map(|&i| p_raw[i]).collect();
    let gap = if n > 1 { min_gap(&p_raw, &order) } else { 1.0 };
    if gap <= 0.0 {
        return Err(GrowthError::Domain("no direction separates the samples".into()));
    }
    let biases: Vec<f64> = (0..n)
        .map(|j| match opts.bias_rule {
            BiasRule::Offset { eps_fraction } => p[j] - gap + eps_fraction * gap,
            BiasRule::Between { fraction } if j == 0 => p[0] - (1.0 - fraction) * gap,
            BiasRule::Between { fraction } => p[j - 1] + fraction * (p[j] - p[j - 1]),
        })
        .collect();
    let y_sorted = y.select_columns(&order);

    let dout = y.nrows();
    let mut net = Network::new(
        Shape::Flat(d),
        vec![Layer::Dense(Dense::zeros(0, d)), Layer::Activation(Activation::Relu), Layer::Dense(Dense::zeros(dout, 0))],
    )?;
    let xv = Value::Flat(x.clone());
    let initial_loss = net.loss(&xv, y, Loss::Square)?;
    let mut losses = Vec::with_capacity(n);
    let mut w = Matrix::zeros(dout, n);
    for m in 1..=n {
        let k = n - m;
        let mut alpha = Matrix::zeros(d + 1, 1);
        for (r, &av) in a.iter().enumerate() {
            alpha[(r, 0)] = av;
        }
        alpha[(d, 0)] = -biases[k];
        let neurons = Neurons { alpha, omega: Matrix::zeros(dout, 1), lambdas: Vec::new() };
        net = apply_addition(&net, 0, &neurons, 1.0, Scaling::Linear)?;
        w = solve_tail(&p, &biases, &y_sorted, k);
        // hidden unit h was added at step h + 1 and carries sorted index n - 1 - h
        if let Layer::Dense(out) = &mut net.layers_mut()[2] {
            for h in 0..m {
                for o in 0..dout {
                    out.w[(o, h)] = w[(o, n - 1 - h)];
                }
            }
        }
        losses.push(net.loss(&xv, y, Loss::Square)?);
    }
    Ok(OverfitTrace { net, direction: a, order, biases, weights: w, initial_loss, losses })
}
