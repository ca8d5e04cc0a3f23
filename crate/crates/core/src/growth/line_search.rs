//! Derivative-free 1-D minimization for amplitude factors.
//!
//! A uniform grid locates the basin, golden-section refines it, and `0` is
//! always a candidate, so the returned value never does worse than `f(0)`.

use crate::bottleneck::Neurons;
use crate::net::{Loss, Network, Value};
use crate::numerics::Matrix;

use super::{apply_addition, apply_best_update, site, Result};

pub const DEFAULT_BOUND: f64 = 4.0;
pub const GRID_POINTS: usize = 33;
pub const REL_TOLERANCE: f64 = 1e-4;

/// How amplitude `gamma` scales `(alpha, omega)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scaling {
    /// `(sqrt gamma, sqrt gamma)`, sign carried by the fan-in.
    #[default]
    Sqrt,
    /// `(gamma, gamma)`: the added function is quadratic in `gamma`.
    Linear,
}

impl Scaling {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sqrt" => Some(Scaling::Sqrt),
            "linear" => Some(Scaling::Linear),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interval {
    /// `[-L, L]`
    #[default]
    Symmetric,
    /// `[0, L]`
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmplitudeConfig {
    pub bound: f64,
    pub interval: Interval,
    pub scaling: Scaling,
}

impl Default for AmplitudeConfig {
    fn default() -> Self {
        AmplitudeConfig { bound: DEFAULT_BOUND, interval: Interval::Symmetric, scaling: Scaling::Sqrt }
    }
}

impl AmplitudeConfig {
    pub fn range(&self) -> (f64, f64) {
        match self.interval {
            Interval::Symmetric => (-self.bound, self.bound),
            Interval::Positive => (0.0, self.bound),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub x: f64,
    pub fx: f64,
    pub f0: f64,
    pub evaluations: usize,
}

/// Minimize `f` over `[lo, hi]` (which must contain 0). NaN counts as
/// `+inf`; ties go to the smaller `|x|`.
pub fn minimize(mut f: impl FnMut(f64) -> f64, lo: f64, hi: f64, grid: usize, rel_tol: f64) -> SearchResult {
    assert!(lo <= 0.0 && 0.0 <= hi && lo < hi, "search interval must contain 0");
    let grid = grid.max(3);
    let mut evals = 0usize;
    let mut eval = |x: f64| {
        evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let better = |a: (f64, f64), b: (f64, f64)| a.1 < b.1 || (a.1 == b.1 && a.0.abs() < b.0.abs());

    let f0 = eval(0.0);
    let step = (hi - lo) / (grid - 1) as f64;
    let pts: Vec<(f64, f64)> = (0..grid)
        .map(|i| {
            let x = if i == grid - 1 { hi } else { lo + step * i as f64 };
            (x, if x == 0.0 { f0 } else { eval(x) })
        })
        .collect();
    let mut best = (0.0, f0);
    let mut best_i = None;
    for (i, &p) in pts.iter().enumerate() {
        if better(p, best) {
            best = p;
            best_i = Some(i);
        }
    }
    if let Some(i) = best_i {
        let (mut a, mut b) = (pts[i.saturating_sub(1)].0, pts[(i + 1).min(grid - 1)].0);
        let tol = rel_tol * (hi - lo);
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let (mut fc, mut fd) = (eval(c), eval(d));
        while b - a > tol {
            if fc <= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = eval(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = eval(d);
            }
        }
        for p in [(c, fc), (d, fd)] {
            if better(p, best) {
                best = p;
            }
        }
    }
    SearchResult { x: best.0, fx: best.1, f0, evaluations: evals }
}

/// Best amplitude for adding `neurons` at `layer`, measured by mean loss on
/// `(x, y)`. Only the layers from the site onward are re-evaluated.
pub fn amplitude_factor(
    net: &Network,
    layer: usize,
    neurons: &Neurons,
    x: &Value,
    y: &Matrix,
    loss: Loss,
    cfg: &AmplitudeConfig,
) -> Result<SearchResult> {
    site(net, layer)?;
    let n = x.n_samples() as f64;
    let v_in = net.run_range(0, layer, x.clone())?;
    if neurons.is_empty() {
        let l = net.loss_sum_from(layer, v_in, y, loss)? / n;
        return Ok(SearchResult { x: 0.0, fx: l, f0: l, evaluations: 1 });
    }
    // shape errors surface here rather than being masked as +inf
    apply_addition(net, layer, neurons, 0.0, cfg.scaling)?;
    let (lo, hi) = cfg.range();
    Ok(minimize(
        |g| match apply_addition(net, layer, neurons, g, cfg.scaling) {
            Ok(grown) => grown.loss_sum_from(layer, v_in.clone(), y, loss).map(|l| l / n).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        },
        lo,
        hi,
        GRID_POINTS,
        REL_TOLERANCE,
    ))
}

/// Like `amplitude_factor`, but each amplitude is scored by the loss after
/// also applying the best update of the next layer, re-solved on the grown
/// network and scaled by its own line search.
pub fn amplitude_factor_refit(
    net: &Network,
    layer: usize,
    neurons: &Neurons,
    x: &Value,
    y: &Matrix,
    loss: Loss,
    cfg: &AmplitudeConfig,
) -> Result<SearchResult> {
    site(net, layer)?;
    if neurons.is_empty() {
        let l = net.loss(x, y, loss)?;
        return Ok(SearchResult { x: 0.0, fx: l, f0: l, evaluations: 1 });
    }
    apply_addition(net, layer, neurons, 0.0, cfg.scaling)?;
    let refit = |g: f64| -> Result<f64> {
        let grown = apply_addition(net, layer, neurons, g, cfg.scaling)?;
        let dw = super::site_best_update(&grown, x, y, loss, layer, crate::numerics::DEFAULT_RCOND)?;
        Ok(best_update_factor(&grown, layer + 2, &dw, x, y, loss, cfg)?.fx)
    };
    let (lo, hi) = cfg.range();
    Ok(minimize(|g| refit(g).unwrap_or(f64::NAN), lo, hi, GRID_POINTS, REL_TOLERANCE))
}

/// Best factor for `W_layer + gamma dW`.
pub fn best_update_factor(
    net: &Network,
    layer: usize,
    dw: &Matrix,
    x: &Value,
    y: &Matrix,
    loss: Loss,
    cfg: &AmplitudeConfig,
) -> Result<SearchResult> {
    let n = x.n_samples() as f64;
    let v_in = net.run_range(0, layer, x.clone())?;
    apply_best_update(net, layer, dw, 0.0)?;
    let (lo, hi) = cfg.range();
    Ok(minimize(
        |g| match apply_best_update(net, layer, dw, g) {
            Ok(u) => u.loss_sum_from(layer, v_in.clone(), y, loss).map(|l| l / n).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        },
        lo,
        hi,
        GRID_POINTS,
        REL_TOLERANCE,
    ))
}
