//! Turning bottleneck proposals into architecture changes.
//!
//! A growth site is a pair of weighted layers `first`, `second = first + 2`
//! with one activation between them; new neurons become extra outputs of
//! `first` (in-weights `alpha`) and extra inputs of `second` (out-weights
//! `omega`). For dense sites `alpha` includes the bias coordinate.

pub mod line_search;
pub mod normalize;
pub mod overfit;
pub mod random_stat;
pub mod schedule;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use thiserror::Error;

use crate::bottleneck::{self, BottleneckError, Gains, Neurons, RMode};
use crate::net::{conv, with_bias_row, Activation, Conv2d, Layer, Loss, NetError, Network, Tensor4, Value};
use crate::numerics::{self, frobenius_sq, Matrix, NumericsError, DEFAULT_RCOND};

pub use line_search::{amplitude_factor, best_update_factor, AmplitudeConfig, Interval, Scaling, SearchResult};
pub use normalize::{normalize_neurons, normalize_proposal, NormalizationMode};
pub use overfit::{overfit_construct, BiasRule, OverfitOptions, OverfitTrace};
pub use random_stat::{random_direction_statistic, RandomDirectionStat};
pub use schedule::{estimation_batch_size, estimation_batch_size_raw, learning_batch_size, GrowthSchedule};

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Bottleneck(#[from] BottleneckError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("layer {0} is not a growable position")]
    NotGrowable(usize),
    #[error("invalid argument: {0}")]
    Domain(String),
}

impl GrowthError {
    /// True for failures of the linear-algebra kernels.
    pub fn is_numerical(&self) -> bool {
        matches!(self, GrowthError::Numerics(_) | GrowthError::Bottleneck(BottleneckError::Numerics(_)))
    }
}

pub type Result<T> = std::result::Result<T, GrowthError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Tiny,
    GradMax,
    Random,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Tiny => "tiny",
            Method::GradMax => "gradmax",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiny" => Some(Method::Tiny),
            "gradmax" => Some(Method::GradMax),
            "random" => Some(Method::Random),
            _ => None,
        }
    }
}

/// Candidate neurons for one site.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthProposal {
    pub layer: usize,
    pub method: Method,
    pub neurons: Neurons,
    /// Best update of the second layer of the site (zero for baselines).
    pub delta_w_star: Matrix,
    pub gains: Gains,
    /// Bottleneck `Psi` of the second layer before any change.
    pub psi_before: f64,
}

impl GrowthProposal {
    pub fn alpha(&self) -> &Matrix {
        &self.neurons.alpha
    }

    pub fn omega(&self) -> &Matrix {
        &self.neurons.omega
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.neurons.lambdas
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn truncate(&self, k: usize) -> Self {
        GrowthProposal { neurons: self.neurons.truncate(k), ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalConfig {
    pub max_neurons: Option<usize>,
    pub rcond: f64,
    pub r_mode: RMode,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig { max_neurons: None, rcond: DEFAULT_RCOND, r_mode: RMode::Min }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub k1: usize,
    pub p1: usize,
    pub k2: usize,
    pub p2: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

/// A growable position resolved against a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Site {
    pub first: usize,
    pub second: usize,
    pub activation: Activation,
    pub conv: Option<ConvGeometry>,
}

impl Site {
    /// Lengths of `alpha` and `omega` for one neuron.
    pub fn neuron_dims(&self, net: &Network) -> (usize, usize) {
        match (self.conv, &net.layers()[self.first], &net.layers()[self.second]) {
            (Some(g), _, _) => (g.in_ch * g.k1 * g.k1, g.out_ch * g.k2 * g.k2),
            (None, Layer::Dense(a), Layer::Dense(b)) => (a.in_dim() + 1, b.out_dim()),
            _ => unreachable!("site validated"),
        }
    }

    /// Parameters added per neuron.
    pub fn params_per_neuron(&self, net: &Network) -> usize {
        let (a, o) = self.neuron_dims(net);
        if self.conv.is_some() {
            a + 1 + o
        } else {
            a + o
        }
    }
}

pub fn site(net: &Network, layer: usize) -> Result<Site> {
    let activation = net.growable_activation(layer).ok_or(GrowthError::NotGrowable(layer))?;
    let second = layer + 2;
    let conv = match (&net.layers()[layer], &net.layers()[second]) {
        (Layer::Conv2d(a), Layer::Conv2d(b)) => {
            Some(ConvGeometry { k1: a.k, p1: a.padding, k2: b.k, p2: b.padding, in_ch: a.in_ch, out_ch: b.out_ch })
        }
        _ => None,
    };
    Ok(Site { first: layer, second, activation, conv })
}

/// Input of the second layer in matrix form (bias row included) and its goal
/// with one column per sample (dense) or per output pixel (conv).
struct SecondLayer {
    b_prev: Matrix,
    v: Matrix,
    n: usize,
    grid: Option<(usize, usize)>,
}

fn second_layer(site: &Site, cache: &crate::net::Cache, goals: &crate::net::Goals) -> Result<SecondLayer> {
    match site.conv {
        None => {
            let b_prev = cache.dense_input_with_bias(site.second)?;
            let v = goals.v[site.second].as_flat()?.clone();
            let n = v.ncols();
            Ok(SecondLayer { b_prev, v, n, grid: None })
        }
        Some(g) => {
            let u2 = conv::unfold(cache.layer_input(site.second).as_spatial()?, g.k2, g.p2)?;
            let vt = goals.v[site.second].as_spatial()?;
            Ok(SecondLayer { b_prev: with_bias_row(&u2.concat()), v: vt.channels_by_pixels(), n: vt.n, grid: Some((vt.h, vt.w)) })
        }
    }
}

/// Bottleneck `Psi` of the second layer of the site at `layer`.
pub fn site_psi(net: &Network, x: &Value, y: &Matrix, loss: Loss, layer: usize, rcond: f64) -> Result<f64> {
    let site = site(net, layer)?;
    let cache = net.forward_cached(x)?;
    let goals = net.loss_and_goals(&cache, y, loss)?;
    let sl = second_layer(&site, &cache, &goals)?;
    Ok(bottleneck::bottleneck_value(&sl.v, &sl.b_prev, rcond)? * (sl.v.ncols() as f64 / sl.n as f64))
}

/// Best update of the second layer of the site at `layer` on `(x, y)`.
pub fn site_best_update(net: &Network, x: &Value, y: &Matrix, loss: Loss, layer: usize, rcond: f64) -> Result<Matrix> {
    let site = site(net, layer)?;
    let cache = net.forward_cached(x)?;
    let goals = net.loss_and_goals(&cache, y, loss)?;
    let sl = second_layer(&site, &cache, &goals)?;
    Ok(bottleneck::best_update(&sl.b_prev, &sl.v, rcond)?)
}

/// TINY: best update of the second layer, projection of its goal, then the
/// optimal neurons for the projected goal.
pub fn propose_tiny(net: &Network, x: &Value, y: &Matrix, loss: Loss, layer: usize, cfg: &ProposalConfig) -> Result<GrowthProposal> {
    let site = site(net, layer)?;
    let cache = net.forward_cached(x)?;
    let goals = net.loss_and_goals(&cache, y, loss)?;
    let sl = second_layer(&site, &cache, &goals)?;
    let dw = bottleneck::best_update(&sl.b_prev, &sl.v, cfg.rcond)?;
    let vp = bottleneck::project_goal(&sl.v, &dw, &sl.b_prev);
    let psi_before = frobenius_sq(&vp) / sl.n as f64;
    let stats = match (site.conv, sl.grid) {
        (Some(g), Some((h, w))) => {
            let vpt = Tensor4::from_channels_by_pixels(&vp, sl.n, h, w)?;
            let u1 = conv::unfold(cache.layer_input(site.first).as_spatial()?, g.k1, g.p1)?;
            bottleneck::stats_conv(&u1, &vpt, g.k2, g.p2, cfg.r_mode)?
        }
        _ => bottleneck::stats_fc(&cache.dense_input_with_bias(site.first)?, &vp)?,
    };
    let neurons = bottleneck::optimal_neurons(&stats, cfg.max_neurons, cfg.rcond)?;
    let gains = bottleneck::first_order_gains_n(&neurons.lambdas, &sl.v, &dw, &sl.b_prev, sl.n);
    Ok(GrowthProposal { layer, method: Method::Tiny, neurons, delta_w_star: dw, gains, psi_before })
}

/// GradMax: zero fan-in, fan-out along the top right singular vectors of
/// `B V^T` built from the raw (unprojected) goal. `lambdas` holds those
/// singular values.
pub fn propose_gradmax(net: &Network, x: &Value, y: &Matrix, loss: Loss, layer: usize, cfg: &ProposalConfig) -> Result<GrowthProposal> {
    let site = site(net, layer)?;
    let cache = net.forward_cached(x)?;
    let goals = net.loss_and_goals(&cache, y, loss)?;
    let sl = second_layer(&site, &cache, &goals)?;
    let psi_before = bottleneck::bottleneck_value(&sl.v, &sl.b_prev, cfg.rcond)? * (sl.v.ncols() as f64 / sl.n as f64);
    let n_tilde = match (site.conv, sl.grid) {
        (Some(g), Some((h, w))) => {
            let vt = Tensor4::from_channels_by_pixels(&sl.v, sl.n, h, w)?;
            let u1 = conv::unfold(cache.layer_input(site.first).as_spatial()?, g.k1, g.p1)?;
            bottleneck::stats_conv(&u1, &vt, g.k2, g.p2, cfg.r_mode)?.n * sl.n as f64
        }
        _ => cache.dense_input_with_bias(site.first)? * sl.v.transpose(),
    };
    let dec = numerics::svd(&n_tilde)?;
    let mut k = bottleneck::numerical_rank(&dec.sigma);
    if let Some(cap) = cfg.max_neurons {
        k = k.min(cap);
    }
    let neurons = Neurons {
        alpha: Matrix::zeros(n_tilde.nrows(), k),
        omega: dec.v.columns(0, k).into_owned(),
        lambdas: dec.sigma[..k].to_vec(),
    };
    let dw = Matrix::zeros(sl.v.nrows(), sl.b_prev.nrows());
    Ok(GrowthProposal {
        layer,
        method: Method::GradMax,
        neurons,
        delta_w_star: dw,
        gains: Gains { delta_theta: 0.0, delta_dw: 0.0 },
        psi_before,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Distribution {
    #[default]
    Gaussian,
    Uniform,
}

impl Distribution {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Some(Distribution::Gaussian),
            "uniform" => Some(Distribution::Uniform),
            _ => None,
        }
    }
}

/// `k` random neurons with i.i.d. entries, rescaled so that
/// `||alpha||^2 / k = ||omega||^2 / k = 1`.
pub fn random_neurons(in_dim: usize, out_dim: usize, k: usize, dist: Distribution, seed: u64) -> Neurons {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, c: usize| -> Matrix {
        Matrix::from_fn(r, c, |_, _| match dist {
            Distribution::Gaussian => StandardNormal.sample(&mut rng),
            Distribution::Uniform => rng.random_range(-1.0..=1.0),
        })
    };
    let alpha = draw(in_dim, k);
    let omega = draw(out_dim, k);
    let unit = |m: Matrix| {
        let ms = frobenius_sq(&m) / k.max(1) as f64;
        if ms > 0.0 {
            m / ms.sqrt()
        } else {
            m
        }
    };
    Neurons { alpha: unit(alpha), omega: unit(omega), lambdas: Vec::new() }
}

pub fn propose_random(net: &Network, layer: usize, k: usize, dist: Distribution, seed: u64) -> Result<GrowthProposal> {
    let site = site(net, layer)?;
    let (a, o) = site.neuron_dims(net);
    let out_rows = match &net.layers()[site.second] {
        Layer::Dense(d) => (d.out_dim(), d.w.ncols()),
        Layer::Conv2d(c) => (c.out_ch, c.in_ch * c.k * c.k + 1),
        _ => unreachable!("site validated"),
    };
    Ok(GrowthProposal {
        layer,
        method: Method::Random,
        neurons: random_neurons(a, o, k, dist, seed),
        delta_w_star: Matrix::zeros(out_rows.0, out_rows.1),
        gains: Gains { delta_theta: 0.0, delta_dw: 0.0 },
        psi_before: f64::NAN,
    })
}

/// Scale factors `(in, out)` applied to `(alpha, omega)` for amplitude
/// `gamma`.
pub fn amplitude_scales(gamma: f64, scaling: Scaling) -> (f64, f64) {
    match scaling {
        Scaling::Sqrt if gamma >= 0.0 => (gamma.sqrt(), gamma.sqrt()),
        Scaling::Sqrt => (-(-gamma).sqrt(), (-gamma).sqrt()),
        Scaling::Linear => (gamma, gamma),
    }
}

/// Append neurons at `layer` with amplitude `gamma`. Dense: rows of
/// `alpha^T` join the first weight matrix (bias coordinate included),
/// columns of `omega` join the second before its bias column. Conv: one new
/// output kernel per neuron in the first layer (bias 0) and one new input
/// slice in every kernel of the second.
pub fn apply_addition(net: &Network, layer: usize, neurons: &Neurons, gamma: f64, scaling: Scaling) -> Result<Network> {
    if !gamma.is_finite() {
        return Err(GrowthError::Domain(format!("amplitude must be finite, got {gamma}")));
    }
    let site = site(net, layer)?;
    let (a_len, o_len) = site.neuron_dims(net);
    if neurons.alpha.nrows() != a_len || neurons.omega.nrows() != o_len || neurons.alpha.ncols() != neurons.omega.ncols() {
        return Err(GrowthError::Net(NetError::Shape(format!(
            "neurons ({}x{}, {}x{}) do not fit site expecting alpha of {a_len} and omega of {o_len}",
            neurons.alpha.nrows(),
            neurons.alpha.ncols(),
            neurons.omega.nrows(),
            neurons.omega.ncols()
        ))));
    }
    let (si, so) = amplitude_scales(gamma, scaling);
    let k = neurons.len();
    let mut layers = net.layers().to_vec();
    match (&layers[site.first], &layers[site.second]) {
        (Layer::Dense(d1), Layer::Dense(d2)) => {
            let (o1, c1) = d1.w.shape();
            let mut w1 = Matrix::zeros(o1 + k, c1);
            w1.view_mut((0, 0), (o1, c1)).copy_from(&d1.w);
            for j in 0..k {
                for c in 0..c1 {
                    w1[(o1 + j, c)] = si * neurons.alpha[(c, j)];
                }
            }
            let (o2, c2) = d2.w.shape();
            let hidden = c2 - 1;
            let mut w2 = Matrix::zeros(o2, c2 + k);
            w2.view_mut((0, 0), (o2, hidden)).copy_from(&d2.w.columns(0, hidden));
            w2.set_column(hidden + k, &d2.w.column(hidden));
            for j in 0..k {
                for r in 0..o2 {
                    w2[(r, hidden + j)] = so * neurons.omega[(r, j)];
                }
            }
            layers[site.first] = Layer::Dense(crate::net::Dense::new(w1)?);
            layers[site.second] = Layer::Dense(crate::net::Dense::new(w2)?);
        }
        (Layer::Conv2d(c1), Layer::Conv2d(c2)) => {
            let mut n1 = c1.clone();
            n1.out_ch += k;
            for j in 0..k {
                n1.kernel.extend(neurons.alpha.column(j).iter().map(|a| si * a));
                n1.bias.push(0.0);
            }
            let q = c2.k * c2.k;
            let mut n2 = Conv2d::zeros(c2.out_ch, c2.in_ch + k, c2.k, c2.padding);
            n2.bias = c2.bias.clone();
            for m in 0..c2.out_ch {
                for c in 0..c2.in_ch + k {
                    for a in 0..c2.k {
                        for b in 0..c2.k {
                            let dst = n2.kidx(m, c, a, b);
                            n2.kernel[dst] = if c < c2.in_ch {
                                c2.kernel[c2.kidx(m, c, a, b)]
                            } else {
                                so * neurons.omega[(m * q + a * c2.k + b, c - c2.in_ch)]
                            };
                        }
                    }
                }
            }
            layers[site.first] = Layer::Conv2d(n1);
            layers[site.second] = Layer::Conv2d(n2);
        }
        _ => return Err(GrowthError::NotGrowable(layer)),
    }
    Ok(net.with_layers(layers)?)
}

/// `W_layer <- W_layer + gamma dW*` (conv weights in `weight_matrix` layout).
pub fn apply_best_update(net: &Network, layer: usize, dw: &Matrix, gamma: f64) -> Result<Network> {
    let mut out = net.clone();
    let l = out.layers_mut().get_mut(layer).ok_or(GrowthError::NotGrowable(layer))?;
    l.add_to_weights(dw, gamma)?;
    if !l.is_finite() {
        return Err(GrowthError::Domain("best update produced non-finite weights".into()));
    }
    Ok(out)
}

/// Number of `lambda_k > rel_threshold * lambda_1`.
pub fn select_neurons(lambdas: &[f64], rel_threshold: f64) -> usize {
    match lambdas.first() {
        None => 0,
        Some(&top) => lambdas.iter().filter(|&&l| l > rel_threshold * top).count(),
    }
}

/// Everything one growth event needs beyond the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub method: Method,
    /// Fall back to random neurons when TINY finds nothing.
    pub completed: bool,
    pub proposal: ProposalConfig,
    pub select_threshold: f64,
    pub normalization: NormalizationMode,
    pub amplitude: AmplitudeConfig,
    /// Line-search the amplitude; otherwise insert with amplitude 1.
    pub amplitude_search: bool,
    /// Apply the TINY best update (with its own line search) first.
    pub best_update: bool,
    /// Add the neurons first and score each amplitude by the loss after
    /// re-solving the best update of the next layer on the grown network;
    /// that best update is then applied. Replaces `best_update`.
    pub refit: bool,
    pub random_dist: Distribution,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            method: Method::Tiny,
            completed: false,
            proposal: ProposalConfig::default(),
            select_threshold: bottleneck::LAMBDA_REL_CUTOFF,
            normalization: NormalizationMode::TinySqrt,
            amplitude: AmplitudeConfig::default(),
            amplitude_search: true,
            best_update: true,
            refit: false,
            random_dist: Distribution::Gaussian,
        }
    }
}

impl StepConfig {
    /// Defaults with the usual normalization for `method`.
    pub fn for_method(method: Method) -> Self {
        let normalization = match method {
            Method::Tiny => NormalizationMode::TinySqrt,
            Method::GradMax => NormalizationMode::GradMaxSqrt,
            Method::Random => NormalizationMode::UnitThenGamma,
        };
        StepConfig { method, normalization, ..Default::default() }
    }
}

/// Record of one growth event.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub net: Network,
    pub added: usize,
    pub gamma: f64,
    pub gamma_best_update: f64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub lambda_sum_sq: f64,
    pub psi_before: f64,
    pub used_fallback: bool,
}

/// One growth event at `layer`: propose on the estimation batch, then
/// line-search and apply on the amplitude batch. The amplitude-batch loss
/// never increases.
pub fn grow_step(
    net: &Network,
    layer: usize,
    est: (&Value, &Matrix),
    amp: (&Value, &Matrix),
    loss: Loss,
    cfg: &StepConfig,
    seed: u64,
) -> Result<StepOutcome> {
    let loss_before = net.loss(amp.0, amp.1, loss)?;
    let mut current = net.clone();
    let mut gamma_dw = 0.0;
    let mut used_fallback = false;
    let k_cap = cfg.proposal.max_neurons.unwrap_or(usize::MAX);
    let (proposal, insert_direct) = match cfg.method {
        Method::Tiny => {
            let p = propose_tiny(net, est.0, est.1, loss, layer, &cfg.proposal)?;
            if cfg.best_update && !cfg.refit && frobenius_sq(&p.delta_w_star) > 0.0 {
                let s = best_update_factor(net, layer + 2, &p.delta_w_star, amp.0, amp.1, loss, &cfg.amplitude)?;
                if s.x != 0.0 {
                    current = apply_best_update(net, layer + 2, &p.delta_w_star, s.x)?;
                    gamma_dw = s.x;
                }
            }
            let keep = select_neurons(p.lambdas(), cfg.select_threshold).min(k_cap);
            let mut p = p.truncate(keep);
            if p.is_empty() && cfg.completed {
                let k = cfg.proposal.max_neurons.unwrap_or(1).max(1);
                let r = propose_random(net, layer, k, cfg.random_dist, seed)?;
                p = GrowthProposal { neurons: r.neurons, ..p };
                used_fallback = true;
            }
            (p, false)
        }
        Method::GradMax => (propose_gradmax(net, est.0, est.1, loss, layer, &cfg.proposal)?, true),
        Method::Random => {
            let k = cfg.proposal.max_neurons.unwrap_or(1).max(1);
            (propose_random(net, layer, k, cfg.random_dist, seed)?, false)
        }
    };
    let lambda_sum_sq = proposal.neurons.lambda_sum_sq();
    let psi_before = proposal.psi_before;
    let mut out = StepOutcome {
        net: current.clone(),
        added: 0,
        gamma: 0.0,
        gamma_best_update: gamma_dw,
        loss_before,
        loss_after: f64::NAN,
        lambda_sum_sq,
        psi_before,
        used_fallback,
    };
    if !proposal.is_empty() {
        let neurons = normalize_neurons(&proposal.neurons, cfg.normalization)?;
        if insert_direct || !cfg.amplitude_search {
            // zero fan-in: the function is unchanged, no amplitude to search
            let scaling = if insert_direct { Scaling::Linear } else { cfg.amplitude.scaling };
            out.net = apply_addition(&current, layer, &neurons, 1.0, scaling)?;
            out.gamma = 1.0;
            out.added = neurons.len();
        } else if cfg.refit {
            let s = line_search::amplitude_factor_refit(&current, layer, &neurons, amp.0, amp.1, loss, &cfg.amplitude)?;
            if s.x != 0.0 {
                out.net = apply_addition(&current, layer, &neurons, s.x, cfg.amplitude.scaling)?;
                out.gamma = s.x;
                out.added = neurons.len();
            }
        } else {
            let s = amplitude_factor(&current, layer, &neurons, amp.0, amp.1, loss, &cfg.amplitude)?;
            if s.x != 0.0 {
                out.net = apply_addition(&current, layer, &neurons, s.x, cfg.amplitude.scaling)?;
                out.gamma = s.x;
                out.added = neurons.len();
            }
        }
    }
    if cfg.refit && cfg.method != Method::GradMax {
        let dw = site_best_update(&out.net, amp.0, amp.1, loss, layer, cfg.proposal.rcond)?;
        let s = best_update_factor(&out.net, layer + 2, &dw, amp.0, amp.1, loss, &cfg.amplitude)?;
        if s.x != 0.0 {
            out.net = apply_best_update(&out.net, layer + 2, &dw, s.x)?;
            out.gamma_best_update = s.x;
        }
    }
    out.loss_after = out.net.loss(amp.0, amp.1, loss)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{random_conv, Shape};

    fn mlp(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::mlp(3, &[4], 2, Activation::Selu, &mut rng).unwrap()
    }

    fn batch(seed: u64, n: usize) -> (Value, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Value::Flat(Matrix::from_fn(3, n, |_, _| rng.random_range(-1.0..1.0))),
            Matrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn select_neurons_examples() {
        assert_eq!(select_neurons(&[2.0, 1.0, 1e-9], 1e-7), 2);
        assert_eq!(select_neurons(&[], 1e-7), 0);
        assert_eq!(select_neurons(&[3.0, 3.0, 3.0], 1e-7), 3);
    }

    #[test]
    fn perfect_fit_gives_empty_proposals() {
        let net = mlp(1);
        let (x, _) = batch(2, 10);
        let y = net.forward(&x).unwrap().to_flat();
        let p = propose_tiny(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).unwrap();
        assert!(p.is_empty());
        let g = propose_gradmax(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn zero_amplitude_and_zero_fan_in_keep_function() {
        let net = mlp(3);
        let (x, y) = batch(4, 12);
        let before = net.forward(&x).unwrap();
        let p = propose_tiny(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).unwrap();
        assert!(!p.is_empty());
        let grown = apply_addition(&net, 0, &p.neurons, 0.0, Scaling::Sqrt).unwrap();
        assert_eq!(grown.forward(&x).unwrap(), before);
        assert_eq!(grown.param_count(), net.param_count() + p.neurons.len() * (4 + 2));

        let g = propose_gradmax(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).unwrap();
        let grown = apply_addition(&net, 0, &g.neurons, 1.0, Scaling::Linear).unwrap();
        assert_eq!(grown.forward(&x).unwrap(), before);
    }

    #[test]
    fn gradmax_rank_one_direction() {
        // one hidden unit feeding two outputs; goal v = u * c^T has rank one
        let w1 = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let w2 = Matrix::zeros(2, 2);
        let net = Network::new(
            Shape::Flat(1),
            vec![
                Layer::Dense(crate::net::Dense::new(w1).unwrap()),
                Layer::Activation(Activation::Identity),
                Layer::Dense(crate::net::Dense::new(w2).unwrap()),
            ],
        )
        .unwrap();
        let x = Value::Flat(Matrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]));
        let dir = [0.6, -0.8];
        let y = Matrix::from_fn(2, 3, |r, c| dir[r] * [1.0, 0.5, 2.0][c]);
        let g = propose_gradmax(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).unwrap();
        assert_eq!(g.neurons.len(), 1);
        let w = g.neurons.omega.column(0);
        assert!((w[0] * dir[1] - w[1] * dir[0]).abs() < 1e-12);
        assert!(g.neurons.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn random_proposal_is_reproducible_and_unit() {
        let net = mlp(5);
        let a = propose_random(&net, 0, 3, Distribution::Gaussian, 9).unwrap();
        let b = propose_random(&net, 0, 3, Distribution::Gaussian, 9).unwrap();
        assert_eq!(a.neurons, b.neurons);
        assert!((frobenius_sq(a.alpha()) / 3.0 - 1.0).abs() < 1e-12);
        let u = propose_random(&net, 0, 2, Distribution::Uniform, 9).unwrap();
        assert!((frobenius_sq(u.omega()) / 2.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn best_update_zero_amplitude_is_identity() {
        let net = mlp(6);
        let dw = Matrix::from_element(2, 5, 0.3);
        assert_eq!(apply_best_update(&net, 2, &dw, 0.0).unwrap(), net);
        assert!(apply_best_update(&net, 2, &Matrix::zeros(3, 3), 1.0).is_err());
    }

    #[test]
    fn consistent_best_update_zeroes_output_goal() {
        // square loss, identity output: half the best update fits exactly
        let net = mlp(7);
        let (x, _) = batch(8, 6);
        let cache = net.forward_cached(&x).unwrap();
        let b = cache.dense_input_with_bias(2).unwrap();
        let m0 = Matrix::from_fn(2, 5, |r, c| (r as f64 + 1.0) * 0.1 - c as f64 * 0.05);
        let y = cache.output().to_flat() + &m0 * &b;
        let p = propose_tiny(&net, &x, &y, Loss::Square, 0, &ProposalConfig::default()).unwrap();
        let updated = apply_best_update(&net, 2, &p.delta_w_star, 0.5).unwrap();
        let c2 = updated.forward_cached(&x).unwrap();
        let goals = updated.loss_and_goals(&c2, &y, Loss::Square).unwrap();
        assert!(goals.v[2].sq_norm().sqrt() < 1e-10);
    }

    #[test]
    fn conv_addition_bookkeeping_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = Network::new(
            Shape::Image { c: 2, h: 5, w: 5 },
            vec![
                Layer::Conv2d(random_conv(3, 2, 3, 1, &mut rng)),
                Layer::Activation(Activation::Selu),
                Layer::Conv2d(random_conv(2, 3, 3, 0, &mut rng)),
            ],
        )
        .unwrap();
        let x = Value::Spatial(Tensor4::from_fn(4, 2, 5, 5, |_, _, _, _| rng.random_range(-1.0..1.0)));
        let y = Matrix::from_fn(2 * 9, 4, |_, _| rng.random_range(-1.0..1.0));
        let p = propose_tiny(&net, &x, &y, Loss::Square, 0, &ProposalConfig { max_neurons: Some(2), ..Default::default() }).unwrap();
        assert_eq!(p.neurons.len(), 2);
        let grown = apply_addition(&net, 0, &p.neurons, 0.0, Scaling::Sqrt).unwrap();
        assert_eq!(grown.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert_eq!(grown.param_count(), net.param_count() + 2 * (2 * 9 + 1 + 2 * 9));
        assert_eq!(site(&net, 0).unwrap().params_per_neuron(&net), 2 * 9 + 1 + 2 * 9);
    }

    #[test]
    fn grow_step_never_increases_loss() {
        let net = mlp(11);
        let (x, y) = batch(12, 30);
        for method in [Method::Tiny, Method::GradMax, Method::Random] {
            let cfg = StepConfig { proposal: ProposalConfig { max_neurons: Some(2), ..Default::default() }, ..StepConfig::for_method(method) };
            let out = grow_step(&net, 0, (&x, &y), (&x, &y), Loss::Square, &cfg, 3).unwrap();
            assert!(out.loss_after <= out.loss_before + 1e-12, "{}", method.name());
        }
    }

    #[test]
    fn refit_step_never_increases_loss() {
        let (x, y) = batch(13, 25);
        for seed in 0..4 {
            let net = mlp(20 + seed);
            for normalization in [NormalizationMode::TinySqrt, NormalizationMode::Unscaled] {
                let cfg = StepConfig { refit: true, completed: true, normalization, ..StepConfig::for_method(Method::Tiny) };
                let out = grow_step(&net, 0, (&x, &y), (&x, &y), Loss::Square, &cfg, seed).unwrap();
                assert!(out.loss_after <= out.loss_before + 1e-12);
                assert_eq!(out.net.param_count(), net.param_count() + out.added * site(&net, 0).unwrap().params_per_neuron(&net));
            }
        }
    }
}
