//! Checks on goals, growth operations and their effect on the loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::bottleneck::Neurons;
use crate::growth::{
    self, apply_addition, apply_best_update, grow_step, normalize_neurons, propose_gradmax, propose_tiny, site, Method,
    NormalizationMode, ProposalConfig, Scaling, StepConfig,
};
use crate::net::{
    conv, random_conv, random_dense, Activation, Conv2d, Dense, Layer, Loss, Network, Shape, Tensor4, Value,
};
use crate::numerics::Matrix;

use super::algebra::gaussian;
use super::oracles::fd_goals;
use super::{tol, CheckResult, Ctx};

/// Randomize every bias so no pre-activation sits at a kink by construction.
fn with_random_biases(net: Network, rng: &mut ChaCha8Rng) -> Network {
    let layers = net
        .layers()
        .iter()
        .cloned()
        .map(|l| match l {
            Layer::Dense(mut d) => {
                let c = d.w.ncols() - 1;
                for r in 0..d.w.nrows() {
                    d.w[(r, c)] = 0.3 * <StandardNormal as rand_distr::Distribution<f64>>::sample(&StandardNormal, rng);
                }
                Layer::Dense(d)
            }
            Layer::Conv2d(mut c) => {
                c.bias.iter_mut().for_each(|b| *b = 0.3 * <StandardNormal as rand_distr::Distribution<f64>>::sample(&StandardNormal, rng));
                Layer::Conv2d(c)
            }
            other => other,
        })
        .collect();
    net.with_layers(layers).expect("same shapes")
}

fn one_hot_targets(rng: &mut ChaCha8Rng, classes: usize, n: usize) -> Matrix {
    let mut y = Matrix::zeros(classes, n);
    for i in 0..n {
        y[(rng.random_range(0..classes), i)] = 1.0;
    }
    y
}

/// Small conv net: conv, act, conv, act, pool, flatten, dense.
fn conv_net(rng: &mut ChaCha8Rng, act: Activation, c: usize, softmax: bool) -> Network {
    let mut layers = vec![
        Layer::Conv2d(random_conv(2, c, 3, 1, rng)),
        Layer::Activation(act),
        Layer::Conv2d(random_conv(2, 2, 3, 1, rng)),
        Layer::Activation(act),
        Layer::AvgPool2d(2),
        Layer::Flatten,
        Layer::Dense(random_dense(3, 18, rng)),
    ];
    if softmax {
        layers.push(Layer::Activation(Activation::Softmax));
    }
    with_random_biases(Network::new(Shape::Image { c, h: 6, w: 6 }, layers).expect("valid conv net"), rng)
}

/// Network, data and loss for family `i`.
fn goal_instance(rng: &mut ChaCha8Rng, i: usize) -> (Network, Value, Matrix, Loss, &'static str) {
    let n = 4;
    match i % 6 {
        0 | 1 | 2 | 3 => {
            let (act, loss, softmax, name) = match i % 6 {
                0 => (Activation::Selu, Loss::Square, false, "dense selu square"),
                1 => (Activation::Relu, Loss::Square, false, "dense relu square"),
                2 => (Activation::Tanh, Loss::CrossEntropy, false, "dense tanh logits ce"),
                _ => (Activation::Selu, Loss::CrossEntropy, true, "dense selu softmax ce"),
            };
            let mut net = Network::mlp(3, &[4, 3], 3, act, rng).expect("valid mlp");
            if softmax {
                let mut layers = net.layers().to_vec();
                layers.push(Layer::Activation(Activation::Softmax));
                net = net.with_layers(layers).expect("softmax head");
            }
            let net = with_random_biases(net, rng);
            let x = Value::Flat(gaussian(rng, 3, n));
            let y = if loss == Loss::Square { gaussian(rng, 3, n) } else { one_hot_targets(rng, 3, n) };
            (net, x, y, loss, name)
        }
        4 => {
            let net = conv_net(rng, Activation::Relu, 1, false);
            let x = Value::Spatial(Tensor4::from_fn(2, 1, 6, 6, |_, _, _, _| StandardNormal.sample(&mut *rng)));
            (net, x, gaussian(rng, 3, 2), Loss::Square, "conv relu square")
        }
        _ => {
            let net = conv_net(rng, Activation::Selu, 2, true);
            let x = Value::Spatial(Tensor4::from_fn(2, 2, 6, 6, |_, _, _, _| StandardNormal.sample(&mut *rng)));
            (net, x, one_hot_targets(rng, 3, 2), Loss::CrossEntropy, "conv selu softmax ce")
        }
    }
}

fn goal_error(net: &Network, x: &Value, y: &Matrix, loss: Loss, eps: f64) -> Result<f64, String> {
    let cache = net.forward_cached(x).map_err(|e| e.to_string())?;
    let goals = net.loss_and_goals(&cache, y, loss).map_err(|e| e.to_string())?;
    let fd = fd_goals(net, x, y, loss, eps).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (a, f) in goals.v.iter().zip(&fd) {
        let diff: f64 = a.as_slice().iter().zip(f.as_slice()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale = a.sq_norm().sqrt();
        worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
    }
    Ok(worst)
}

pub fn goal_finite_difference(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(20);
    let mut worst = (0.0f64, "");
    for i in 0..20 {
        let (net, x, y, loss, name) = goal_instance(&mut rng, i);
        match goal_error(&net, &x, &y, loss, 1e-5) {
            Ok(e) if e > worst.0 || e.is_nan() => worst = (e, name),
            Ok(_) => {}
            Err(e) => return CheckResult::error(e),
        }
    }
    CheckResult::at_most(worst.0, tol::FD_REL, format!("20 nets, worst family: {}", worst.1))
}

pub fn goal_quadratic_exact(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(21);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let net = with_random_biases(Network::mlp(3, &[4], 2, Activation::Identity, &mut rng).expect("valid"), &mut rng);
        let x = Value::Flat(gaussian(&mut rng, 3, 5));
        let y = gaussian(&mut rng, 2, 5);
        match goal_error(&net, &x, &y, Loss::Square, 1e-3) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return CheckResult::error(e),
        }
    }
    CheckResult::at_most(worst, tol::FD_QUADRATIC_REL, "linear net, square loss")
}

fn bits_differ(a: &[f64], b: &[f64]) -> usize {
    if a.len() != b.len() {
        return a.len().max(b.len());
    }
    a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
}

pub fn cache_determinism(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(22);
    let mut differing = 0;
    for i in 0..6 {
        let (net, x, y, loss, _) = goal_instance(&mut rng, i);
        let run = || -> Result<Vec<f64>, String> {
            let c = net.forward_cached(&x).map_err(|e| e.to_string())?;
            let g = net.loss_and_goals(&c, &y, loss).map_err(|e| e.to_string())?;
            let mut all = vec![g.loss];
            for v in c.outputs.iter().chain(&g.v) {
                all.extend_from_slice(v.as_slice());
            }
            Ok(all)
        };
        match (run(), run()) {
            (Ok(a), Ok(b)) => differing += bits_differ(&a, &b),
            (Err(e), _) | (_, Err(e)) => return CheckResult::error(e),
        }
    }
    CheckResult::at_most(differing as f64, tol::CACHE_REPEAT, "entries differing between repeated passes")
}

pub fn unfold_equivalence(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(23);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = rng.random_range(1..=4);
        let (h, w) = (rng.random_range(3..=8), rng.random_range(3..=8));
        let k = rng.random_range(1..=3.min(h).min(w));
        let p = rng.random_range(0..=1);
        let mut cv: Conv2d = random_conv(rng.random_range(1..=4), c, k, p, &mut rng);
        cv.bias.iter_mut().for_each(|b| *b = StandardNormal.sample(&mut rng));
        let x = Tensor4::from_fn(2, c, h, w, |_, _, _, _| StandardNormal.sample(&mut rng));
        let (direct, u) = match (cv.forward(&x), conv::unfold(&x, k, p)) {
            (Ok(d), Ok(u)) => (d, u),
            (Err(e), _) | (_, Err(e)) => return CheckResult::error(e),
        };
        let wm = cv.weight_matrix();
        let kk = u.patch_len();
        for (i, bc) in u.per_sample.iter().enumerate() {
            let z = wm.columns(0, kk) * bc;
            for o in 0..cv.out_ch {
                for (pix, zv) in z.row(o).iter().enumerate() {
                    let (y, xx) = (pix / u.w_out, pix % u.w_out);
                    worst = worst.max((zv + cv.bias[o] - direct.at(i, o, y, xx)).abs());
                }
            }
        }
    }
    CheckResult::at_most(worst, tol::UNFOLD, "50 geometries, channels <= 4, images <= 8x8")
}

/// Dense and conv growable networks with matching inputs.
fn growable_pair(rng: &mut ChaCha8Rng) -> Vec<(Network, Value)> {
    let dense = with_random_biases(Network::mlp(3, &[4, 3], 2, Activation::Selu, rng).expect("valid"), rng);
    let xd = Value::Flat(gaussian(rng, 3, 6));
    let cnet = conv_net(rng, Activation::Relu, 1, false);
    let xc = Value::Spatial(Tensor4::from_fn(3, 1, 6, 6, |_, _, _, _| StandardNormal.sample(&mut *rng)));
    vec![(dense, xd), (cnet, xc)]
}

pub fn zero_neuron_identity(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(24);
    let mut differing = 0;
    for (net, x) in growable_pair(&mut rng) {
        let before = match net.forward(&x) {
            Ok(v) => v,
            Err(e) => return CheckResult::error(e),
        };
        let layer = net.growable_positions()[0];
        let s = site(&net, layer).expect("growable");
        let (a, o) = s.neuron_dims(&net);
        let zero = Neurons { alpha: Matrix::zeros(a, 2), omega: Matrix::zeros(o, 2), lambdas: Vec::new() };
        let random = Neurons { alpha: gaussian(&mut rng, a, 2), omega: gaussian(&mut rng, o, 2), lambdas: Vec::new() };
        for (nr, gamma) in [(&zero, 1.0), (&random, 0.0)] {
            match apply_addition(&net, layer, nr, gamma, Scaling::Sqrt).map_err(|e| e.to_string()).and_then(|g| g.forward(&x).map_err(|e| e.to_string())) {
                Ok(after) => differing += bits_differ(before.as_slice(), after.as_slice()),
                Err(e) => return CheckResult::error(e),
            }
        }
    }
    CheckResult::at_most(differing as f64, tol::ZERO_NEURON, "outputs differing after zero-weight additions")
}

pub fn gradmax_function_preserving(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(25);
    let mut differing = 0;
    for (net, x) in growable_pair(&mut rng) {
        let y = gaussian(&mut rng, net.output_dim(), x.n_samples());
        let before = net.forward(&x).expect("valid");
        for &layer in &net.growable_positions() {
            let grown = (|| -> Result<Network, String> {
                let p = propose_gradmax(&net, &x, &y, Loss::Square, layer, &ProposalConfig { max_neurons: Some(2), ..Default::default() })
                    .map_err(|e| e.to_string())?;
                let nr = normalize_neurons(&p.neurons, NormalizationMode::GradMaxLinear).map_err(|e| e.to_string())?;
                apply_addition(&net, layer, &nr, 1.0, Scaling::Linear).map_err(|e| e.to_string())
            })();
            match grown.and_then(|g| g.forward(&x).map_err(|e| e.to_string())) {
                Ok(after) => differing += bits_differ(before.as_slice(), after.as_slice()),
                Err(e) => return CheckResult::error(e),
            }
        }
    }
    CheckResult::at_most(differing as f64, tol::ZERO_NEURON, "outputs differing after GradMax insertion")
}

pub fn growth_bookkeeping(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(26);
    let mut mismatch = 0usize;
    for (net, _) in growable_pair(&mut rng) {
        for &layer in &net.growable_positions() {
            let s = site(&net, layer).expect("growable");
            let (a, o) = s.neuron_dims(&net);
            let k = rng.random_range(1..=3);
            let nr = Neurons { alpha: gaussian(&mut rng, a, k), omega: gaussian(&mut rng, o, k), lambdas: Vec::new() };
            match apply_addition(&net, layer, &nr, 0.5, Scaling::Sqrt) {
                Ok(g) => mismatch += g.param_count().abs_diff(net.param_count() + k * s.params_per_neuron(&net)),
                Err(e) => return CheckResult::error(e),
            }
        }
    }
    CheckResult::at_most(mismatch as f64, 0.0, "parameter count mismatch, dense and conv")
}

pub fn amplitude_never_increases(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(27);
    let mut worst = f64::NEG_INFINITY;
    let cfgs = [
        StepConfig::for_method(Method::Tiny),
        StepConfig { completed: true, refit: true, ..StepConfig::for_method(Method::Tiny) },
        StepConfig::for_method(Method::GradMax),
        StepConfig::for_method(Method::Random),
    ];
    for t in 0..3u64 {
        for (net, x) in growable_pair(&mut rng) {
            let y = gaussian(&mut rng, net.output_dim(), x.n_samples());
            for cfg in &cfgs {
                let cfg = StepConfig { proposal: ProposalConfig { max_neurons: Some(2), ..cfg.proposal }, ..*cfg };
                match grow_step(&net, net.growable_positions()[0], (&x, &y), (&x, &y), Loss::Square, &cfg, t) {
                    Ok(o) => worst = worst.max(o.loss_after - o.loss_before),
                    Err(e) => return CheckResult::error(e),
                }
            }
        }
    }
    CheckResult::at_most(worst, tol::AMPLITUDE_SLACK, "loss after minus before, all methods")
}

/// Small-sample dense site: 12 inputs, 10 samples, tanh hidden layer. The
/// first-layer input then has full column rank, so the neuron contribution
/// is orthogonal to what the best update already covers.
fn small_sample_instance(rng: &mut ChaCha8Rng, hidden: usize, out: usize) -> (Network, Value, Matrix) {
    let layers = vec![
        Layer::Dense(random_dense(hidden, 12, rng)),
        Layer::Activation(Activation::Tanh),
        Layer::Dense(random_dense(out, hidden, rng)),
    ];
    let net = with_random_biases(Network::new(Shape::Flat(12), layers).expect("valid"), rng);
    (net, Value::Flat(gaussian(rng, 12, 10)), gaussian(rng, out, 10))
}

fn slope_instance(rng: &mut ChaCha8Rng) -> Result<(f64, f64), String> {
    let h = rng.random_range(2..=3);
    let (net, x, y) = small_sample_instance(rng, h, 4);
    let e = |e: growth::GrowthError| e.to_string();
    let p = propose_tiny(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).map_err(e)?;
    let sigma0 = Activation::Tanh.derivative_at_zero();
    let predicted = -(sigma0 * p.gains.delta_theta + p.gains.delta_dw);
    let loss_at = |g: f64| -> Result<f64, String> {
        let up = apply_best_update(&net, 2, &p.delta_w_star, g).map_err(e)?;
        let grown = apply_addition(&up, 0, &p.neurons, g, Scaling::Sqrt).map_err(e)?;
        grown.loss(&x, &y, Loss::Square).map_err(|e| e.to_string())
    };
    let l0 = loss_at(0.0)?;
    let hs = [1e-3, 5e-4, 2.5e-4];
    let mut s = [0.0; 3];
    for (si, &hv) in s.iter_mut().zip(&hs) {
        *si = (loss_at(hv)? - l0) / hv;
    }
    // two Richardson levels remove the O(h) and O(h^2) terms
    let r1 = [2.0 * s[1] - s[0], 2.0 * s[2] - s[1]];
    let measured = (4.0 * r1[1] - r1[0]) / 3.0;
    Ok((measured, predicted))
}

pub fn first_order_slope(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(28);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        match slope_instance(&mut rng) {
            Ok((m, p)) => worst = worst.max((m - p).abs() / p.abs()),
            Err(e) => return CheckResult::error(e),
        }
    }
    CheckResult::at_most(worst, tol::SLOPE_REL, "Richardson slope vs -(sigma'(0) sum lambda^2 + Delta_dW), 10 instances")
}

fn sequential_discrepancy(net: &Network, x: &Value, y: &Matrix, gamma: f64) -> Result<f64, String> {
    let e = |e: growth::GrowthError| e.to_string();
    let cap = |k| ProposalConfig { max_neurons: Some(k), ..Default::default() };
    let both = propose_tiny(net, x, y, Loss::Square, 0, &cap(2)).map_err(e)?;
    if both.neurons.len() < 2 {
        return Err("instance has fewer than two neurons".into());
    }
    let sim = apply_addition(net, 0, &both.neurons, gamma, Scaling::Sqrt).map_err(e)?;
    let first = propose_tiny(net, x, y, Loss::Square, 0, &cap(1)).map_err(e)?;
    let mid = apply_addition(net, 0, &first.neurons, gamma, Scaling::Sqrt).map_err(e)?;
    let second = propose_tiny(&mid, x, y, Loss::Square, 0, &cap(1)).map_err(e)?;
    let seq = apply_addition(&mid, 0, &second.neurons, gamma, Scaling::Sqrt).map_err(e)?;
    let l = |n: &Network| n.loss(x, y, Loss::Square).map_err(|e| e.to_string());
    Ok((l(&sim)? - l(&seq)?).abs())
}

pub fn sequential_vs_simultaneous(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(29);
    let mut worst = f64::INFINITY;
    for _ in 0..10 {
        let (net, x, y) = small_sample_instance(&mut rng, 2, 4);
        match (sequential_discrepancy(&net, &x, &y, 1e-2), sequential_discrepancy(&net, &x, &y, 5e-3)) {
            (Ok(a), Ok(b)) => worst = worst.min(a / b),
            (Err(e), _) | (_, Err(e)) => return CheckResult::error(e),
        }
    }
    CheckResult::at_least(worst, tol::SEQUENTIAL_RATIO, "min discrepancy ratio for gamma 1e-2 vs 5e-3, 10 instances")
}

/// Goal already reachable by the existing layer: the hidden units act as the
/// identity on positive inputs and the target is affine in them.
pub fn discriminating_network() -> (Network, Value, Matrix) {
    let xs = [1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 3.0, 2.0, 4.0];
    let x = Matrix::from_column_slice(2, 5, &xs);
    let y = Matrix::from_iterator(1, 5, x.column_iter().map(|c| c[0] + 2.0 * c[1] - 1.0));
    let w1 = Matrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let layers = vec![
        Layer::Dense(Dense::new(w1).expect("finite")),
        Layer::Activation(Activation::Selu),
        Layer::Dense(Dense::zeros(1, 2)),
    ];
    (Network::new(Shape::Flat(2), layers).expect("valid"), Value::Flat(x), y)
}

pub fn discriminating_instance(_ctx: &Ctx) -> CheckResult {
    let (net, x, y) = discriminating_network();
    let cfg = ProposalConfig::default();
    let (tiny, gm) = match (propose_tiny(&net, &x, &y, Loss::Square, 0, &cfg), propose_gradmax(&net, &x, &y, Loss::Square, 0, &cfg)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return CheckResult::error(e),
    };
    let top = gm.lambdas().first().copied().unwrap_or(0.0);
    let sum_sq = tiny.neurons.lambda_sum_sq();
    CheckResult::all(vec![
        CheckResult::at_most(sum_sq, tol::DISCRIMINATING_TINY, format!("TINY sum lambda^2 {sum_sq:.2e}")),
        CheckResult::at_least(top, tol::DISCRIMINATING_GRADMAX, format!("GradMax top singular value {top:.3e}")),
    ])
}

pub fn random_direction_statistic(ctx: &Ctx) -> CheckResult {
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for (i, (n, d)) in [(10, 64), (10, 512)].into_iter().enumerate() {
        let s = growth::random_direction_statistic(n, d, 2000, ctx.seed.wrapping_add(i as u64));
        let r = (s.std / s.expected_std - 1.0).abs();
        notes.push(format!("n={n} d={d} std {:.4e} vs {:.4e}", s.std, s.expected_std));
        worst = worst.max(r);
    }
    CheckResult::at_most(worst, tol::RANDOM_STD_REL, notes.join(", "))
}
