//! Expressivity bottleneck of a layer, its best in-layer update and the
//! optimal new neurons.
//!
//! Notation: `B` holds layer inputs (one sample per column, bias row
//! included for dense layers), `V` the desired pre-activation updates.
//! Every `1/n` factor appears here, never inside `V`.

use thiserror::Error;

use crate::net::{Tensor4, Unfolded};
use crate::numerics::{self, frobenius_sq, trace_inner, Matrix, NumericsError};

/// Relative cutoff of the numerical rank of `S^{-1/2} N`.
pub const LAMBDA_REL_CUTOFF: f64 = 1e-7;
/// Absolute floor of the same rank rule.
pub const LAMBDA_ABS_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BottleneckError {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("no samples")]
    Empty,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, BottleneckError>;

fn same_cols(a: &Matrix, b: &Matrix, what: &str) -> Result<usize> {
    if a.ncols() != b.ncols() {
        return Err(BottleneckError::Shape(format!("{what}: {} vs {} columns", a.ncols(), b.ncols())));
    }
    if a.ncols() == 0 {
        return Err(BottleneckError::Empty);
    }
    Ok(a.ncols())
}

/// `dW* = (1/n) V B^T ((1/n) B B^T)^+`, the minimum-norm minimizer of
/// `(1/n) ||dW B - V||^2`.
pub fn best_update(b_prev: &Matrix, v: &Matrix, rcond: f64) -> Result<Matrix> {
    let n = same_cols(b_prev, v, "best_update")? as f64;
    let s = (b_prev * b_prev.transpose()) / n;
    let cross = (v * b_prev.transpose()) / n;
    Ok(cross * numerics::pinv(&s, rcond)?)
}

/// `V_proj = V - dW* B`.
pub fn project_goal(v: &Matrix, dw: &Matrix, b_prev: &Matrix) -> Matrix {
    v - dw * b_prev
}

/// `Psi = (1/n) ||V - dW* B||^2`.
pub fn bottleneck_value(v: &Matrix, b_prev: &Matrix, rcond: f64) -> Result<f64> {
    let dw = best_update(b_prev, v, rcond)?;
    Ok(frobenius_sq(&project_goal(v, &dw, b_prev)) / v.ncols() as f64)
}

/// Where the statistics came from, needed to reshape neuron weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Fc,
    /// `alpha` has `in_ch*k*k` entries, `omega` has `out_ch*k_next*k_next`
    /// entries ordered `(out channel, row, col)`.
    Conv { in_ch: usize, k: usize, out_ch: usize, k_next: usize, r: usize },
}

/// Second-moment `S` of the inputs and cross-moment `N` with the projected
/// goal.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub s: Matrix,
    pub n: Matrix,
    pub n_samples: usize,
    pub geometry: Geometry,
}

/// `S = (1/n) B B^T`, `N = (1/n) B V_proj^T`.
pub fn stats_fc(b: &Matrix, v_proj: &Matrix) -> Result<LayerStats> {
    let n = same_cols(b, v_proj, "stats_fc")?;
    let nf = n as f64;
    Ok(LayerStats {
        s: (b * b.transpose()) / nf,
        n: (b * v_proj.transpose()) / nf,
        n_samples: n,
        geometry: Geometry::Fc,
    })
}

/// Choice of the factor `r` in the convolutional pseudo second moment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RMode {
    /// `r = min` of the patch-matrix shape (the bound stated by the lemma).
    #[default]
    Min,
    /// `r = max` of the same shape (looser).
    Max,
}

/// Pseudo statistics for a new channel between two convolutions.
///
/// `unfolded` is the input of the first convolution unfolded with its kernel;
/// `v_proj` lives on the output grid of the second convolution, whose kernel
/// and padding are `k2`, `p2`.
///
/// `S = (r/n) sum_{i,j} Bt_ij^T Bt_ij`,
/// `N_m = (1/n) sum_{i,j} V_proj[i,m,j] Bt_ij^T`, `N = (N_1 .. N_C2)`.
pub fn stats_conv(unfolded: &Unfolded, v_proj: &Tensor4, k2: usize, p2: usize, r_mode: RMode) -> Result<LayerStats> {
    let n = unfolded.per_sample.len();
    if n == 0 {
        return Err(BottleneckError::Empty);
    }
    let (h2, w2) = crate::net::conv::out_size(unfolded.h_out, unfolded.w_out, k2, p2)
        .map_err(|e| BottleneckError::Shape(e.to_string()))?;
    if v_proj.n != n || v_proj.h != h2 || v_proj.w != w2 {
        return Err(BottleneckError::Shape(format!(
            "projected goal {}x{}x{}x{} does not match {n} samples on a {h2}x{w2} grid",
            v_proj.n, v_proj.c, v_proj.h, v_proj.w
        )));
    }
    let q = k2 * k2;
    let p = unfolded.patch_len();
    let r = match r_mode {
        RMode::Min => q.min(p),
        RMode::Max => q.max(p),
    };
    let c2 = v_proj.c;
    let mut gram = Matrix::zeros(p, p);
    let mut nm = Matrix::zeros(p, c2 * q);
    for i in 0..n {
        for y in 0..h2 {
            for x in 0..w2 {
                let bt = unfolded.selector_patch(i, y, x, k2, p2);
                gram += bt.transpose() * &bt;
                for m in 0..c2 {
                    let g = v_proj.at(i, m, y, x);
                    if g != 0.0 {
                        let mut block = nm.columns_mut(m * q, q);
                        block += bt.transpose() * g;
                    }
                }
            }
        }
    }
    let nf = n as f64;
    Ok(LayerStats {
        s: gram * (r as f64 / nf),
        n: nm / nf,
        n_samples: n,
        geometry: Geometry::Conv { in_ch: unfolded.channels, k: unfolded.k, out_ch: c2, k_next: k2, r },
    })
}

/// New-neuron weights: column `k` of `alpha` / `omega` is neuron `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neurons {
    pub alpha: Matrix,
    pub omega: Matrix,
    pub lambdas: Vec<f64>,
}

impl Neurons {
    pub fn empty(in_dim: usize, out_dim: usize) -> Self {
        Neurons { alpha: Matrix::zeros(in_dim, 0), omega: Matrix::zeros(out_dim, 0), lambdas: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keep the first `k` neurons.
    pub fn truncate(&self, k: usize) -> Self {
        let k = k.min(self.len());
        Neurons {
            alpha: self.alpha.columns(0, k).into_owned(),
            omega: self.omega.columns(0, k).into_owned(),
            lambdas: self.lambdas.iter().take(k).copied().collect(),
        }
    }

    /// `sum_k omega_k alpha_k^T`.
    pub fn outer_sum(&self) -> Matrix {
        &self.omega * self.alpha.transpose()
    }

    pub fn lambda_sum_sq(&self) -> f64 {
        // folded from +0 so an empty set reports 0, not -0
        self.lambdas.iter().fold(0.0, |acc, l| acc + l * l)
    }
}

/// Number of singular values kept by the rank rule
/// `lambda_k > max(LAMBDA_REL_CUTOFF * lambda_1, LAMBDA_ABS_FLOOR)`.
pub fn numerical_rank(lambdas: &[f64]) -> usize {
    let top = lambdas.first().copied().unwrap_or(0.0);
    let cut = (LAMBDA_REL_CUTOFF * top).max(LAMBDA_ABS_FLOOR);
    lambdas.iter().take_while(|&&l| l > cut).count()
}

fn whitened(stats: &LayerStats, rcond: f64) -> Result<Matrix> {
    if stats.n.nrows() != stats.s.nrows() || !stats.s.is_square() {
        return Err(BottleneckError::Shape(format!("S {:?} and N {:?} disagree", stats.s.shape(), stats.n.shape())));
    }
    let s = numerics::repair_psd(&stats.s)?;
    Ok(numerics::inv_sqrt_psd(&s, rcond)?)
}

/// From the SVD `S^{-1/2} N = sum lambda_k u_k v_k^T`:
/// `alpha_k = sqrt(lambda_k) S^{-1/2} u_k`, `omega_k = sqrt(lambda_k) v_k`,
/// truncated to the numerical rank and to `max_k`.
pub fn optimal_neurons(stats: &LayerStats, max_k: Option<usize>, rcond: f64) -> Result<Neurons> {
    let w = whitened(stats, rcond)?;
    let m = &w * &stats.n;
    let dec = numerics::svd(&m)?;
    let mut k = numerical_rank(&dec.sigma);
    if let Some(cap) = max_k {
        k = k.min(cap);
    }
    let mut alpha = Matrix::zeros(stats.s.nrows(), k);
    let mut omega = Matrix::zeros(stats.n.ncols(), k);
    for j in 0..k {
        let root = dec.sigma[j].sqrt();
        alpha.set_column(j, &((&w * dec.u.column(j)) * root));
        omega.set_column(j, &(dec.v.column(j) * root));
    }
    Ok(Neurons { alpha, omega, lambdas: dec.sigma[..k].to_vec() })
}

/// Result of the generalized-eigenproblem path.
#[derive(Debug, Clone, PartialEq)]
pub struct GenEigOutcome {
    pub neurons: Neurons,
    /// `S` was not numerically positive definite; the SVD path was used.
    pub fell_back: bool,
}

/// Solve `N N^T x = mu S x` directly and rescale each pair to the SVD-path
/// convention: with `x^T S x = 1` and `lambda = sqrt(mu)`,
/// `alpha = sqrt(lambda) x`, `omega = N^T x / sqrt(lambda)`.
pub fn optimal_neurons_geneig(stats: &LayerStats, max_k: Option<usize>, rcond: f64) -> Result<GenEigOutcome> {
    let (vals, _) = numerics::sym_eig(&stats.s)?;
    let top = vals.first().copied().unwrap_or(0.0);
    let low = vals.last().copied().unwrap_or(0.0);
    if top <= 0.0 || low <= rcond * top {
        return Ok(GenEigOutcome { neurons: optimal_neurons(stats, max_k, rcond)?, fell_back: true });
    }
    let a = &stats.n * stats.n.transpose();
    let cap = max_k.unwrap_or(usize::MAX).min(stats.s.nrows());
    let pairs = numerics::gen_eig_pairs(&a, &stats.s, cap)?;
    let lambdas: Vec<f64> = pairs.iter().map(|p| p.value.sqrt()).collect();
    let k = numerical_rank(&lambdas);
    let mut alpha = Matrix::zeros(stats.s.nrows(), k);
    let mut omega = Matrix::zeros(stats.n.ncols(), k);
    for j in 0..k {
        let root = lambdas[j].sqrt();
        let x = &pairs[j].vector;
        alpha.set_column(j, &(x * root));
        omega.set_column(j, &((stats.n.transpose() * x) / root));
    }
    Ok(GenEigOutcome { neurons: Neurons { alpha, omega, lambdas: lambdas[..k].to_vec() }, fell_back: false })
}

/// First-order gains of one pipeline run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gains {
    /// `sum lambda_k^2`.
    pub delta_theta: f64,
    /// `(1/n) <V, dW* B>`; non-negative up to rounding.
    pub delta_dw: f64,
}

/// Gains with `n` taken as the column count of `v`.
pub fn first_order_gains(lambdas: &[f64], v: &Matrix, dw: &Matrix, b_prev: &Matrix) -> Gains {
    first_order_gains_n(lambdas, v, dw, b_prev, v.ncols().max(1))
}

/// Gains with an explicit sample count (convolutions sum over pixels).
pub fn first_order_gains_n(lambdas: &[f64], v: &Matrix, dw: &Matrix, b_prev: &Matrix, n: usize) -> Gains {
    let delta_dw = if dw.is_empty() || v.is_empty() { 0.0 } else { trace_inner(v, &(dw * b_prev)) / n as f64 };
    debug_assert!(delta_dw >= -1e-10 * (1.0 + frobenius_sq(v)), "negative best-update gain {delta_dw}");
    Gains { delta_theta: lambdas.iter().map(|l| l * l).sum(), delta_dw }
}

/// Linear effect `sum_k omega_k alpha_k^T B` of dense neurons on the
/// next pre-activation.
pub fn contribution_fc(neurons: &Neurons, b: &Matrix) -> Matrix {
    neurons.outer_sum() * b
}

/// Linear effect of new channels: channel `k` computes `alpha_k` over the
/// unfolded first-layer input, then feeds the second convolution (kernel
/// `k2`, padding `p2`) through `omega_k`.
pub fn contribution_conv(neurons: &Neurons, unfolded: &Unfolded, out_ch: usize, k2: usize, p2: usize) -> Result<Tensor4> {
    let (h2, w2) = crate::net::conv::out_size(unfolded.h_out, unfolded.w_out, k2, p2)
        .map_err(|e| BottleneckError::Shape(e.to_string()))?;
    let q = k2 * k2;
    if neurons.omega.nrows() != out_ch * q || neurons.alpha.nrows() != unfolded.patch_len() {
        return Err(BottleneckError::Shape("neuron weights do not match the conv geometry".into()));
    }
    let n = unfolded.per_sample.len();
    let mut out = Tensor4::zeros(n, out_ch, h2, w2);
    for i in 0..n {
        for y in 0..h2 {
            for x in 0..w2 {
                let bt = unfolded.selector_patch(i, y, x, k2, p2);
                let z = &bt * &neurons.alpha; // q x K
                for m in 0..out_ch {
                    let mut acc = 0.0;
                    for k in 0..neurons.len() {
                        for j in 0..q {
                            acc += neurons.omega[(m * q + j, k)] * z[(j, k)];
                        }
                    }
                    let idx = out.idx(i, m, y, x);
                    out.data[idx] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DEFAULT_RCOND;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn best_update_examples() {
        let v = dmatrix![1.0, 2.0; 3.0, 4.0];
        let dw = best_update(&Matrix::identity(2, 2), &v, DEFAULT_RCOND).unwrap();
        assert!((dw - &v).amax() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(4, 20, &mut rng);
        let m0 = random(3, 4, &mut rng);
        let dw = best_update(&b, &(&m0 * &b), DEFAULT_RCOND).unwrap();
        assert!((dw - m0).amax() < 1e-10);

        let b = dmatrix![1.0, 1.0; 0.0, 0.0];
        let v = dmatrix![1.0, -1.0];
        let dw = best_update(&b, &v, DEFAULT_RCOND).unwrap();
        assert!(dw.amax() < 1e-15);
        let psi = bottleneck_value(&v, &b, DEFAULT_RCOND).unwrap();
        assert!((psi - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projection_is_orthogonal_to_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(5, 12, &mut rng);
        let v = random(3, 12, &mut rng);
        let dw = best_update(&b, &v, DEFAULT_RCOND).unwrap();
        let vp = project_goal(&v, &dw, &b);
        assert!((&vp * b.transpose()).norm() <= 1e-8 * v.norm() * b.norm());
        assert_eq!(project_goal(&v, &Matrix::zeros(3, 5), &b), v);
    }

    #[test]
    fn stats_fc_examples() {
        let st = stats_fc(&dmatrix![1.0], &dmatrix![2.0]).unwrap();
        assert_eq!((st.s[(0, 0)], st.n[(0, 0)]), (1.0, 2.0));
        let z = stats_fc(&dmatrix![1.0, 2.0], &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(z.n, Matrix::zeros(1, 3));
        assert!(matches!(stats_fc(&Matrix::zeros(2, 0), &Matrix::zeros(1, 0)), Err(BottleneckError::Empty)));
    }

    #[test]
    fn scalar_whitened_case() {
        let st = stats_fc(&dmatrix![1.0], &dmatrix![2.0]).unwrap();
        let nr = optimal_neurons(&st, None, DEFAULT_RCOND).unwrap();
        assert_eq!(nr.lambdas.len(), 1);
        assert!((nr.lambdas[0] - 2.0).abs() < 1e-14);
        assert!((nr.alpha[(0, 0)].abs() - 2f64.sqrt()).abs() < 1e-14);
        assert!((nr.omega[(0, 0)].abs() - 2f64.sqrt()).abs() < 1e-14);
        assert!((contribution_fc(&nr, &dmatrix![1.0])[(0, 0)] - 2.0).abs() < 1e-14);
        let g = first_order_gains(&nr.lambdas, &dmatrix![2.0], &Matrix::zeros(1, 1), &dmatrix![1.0]);
        assert!((g.delta_theta - 4.0).abs() < 1e-13);

        let ge = optimal_neurons_geneig(&st, None, DEFAULT_RCOND).unwrap();
        assert!(!ge.fell_back);
        assert!((ge.neurons.lambdas[0].powi(2) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_goal_gives_no_neurons() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = stats_fc(&random(3, 8, &mut rng), &Matrix::zeros(2, 8)).unwrap();
        let nr = optimal_neurons(&st, None, DEFAULT_RCOND).unwrap();
        assert!(nr.is_empty());
        let g = first_order_gains(&[], &Matrix::zeros(2, 8), &Matrix::zeros(2, 3), &random(3, 8, &mut rng));
        assert_eq!((g.delta_theta, g.delta_dw), (0.0, 0.0));
    }

    #[test]
    fn fc_identity_holds_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b2 = random(6, 40, &mut rng);
        let vp = random(4, 40, &mut rng);
        let st = stats_fc(&b2, &vp).unwrap();
        let nr = optimal_neurons(&st, None, DEFAULT_RCOND).unwrap();
        let after = frobenius_sq(&(contribution_fc(&nr, &b2) - &vp)) / 40.0;
        let predicted = frobenius_sq(&vp) / 40.0 - nr.lambda_sum_sq();
        assert!((after - predicted).abs() <= 1e-8 * (1.0 + predicted.abs()));
    }

    #[test]
    fn best_update_gain_is_projection_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random(4, 15, &mut rng);
        let v = random(2, 15, &mut rng);
        let dw = best_update(&b, &v, DEFAULT_RCOND).unwrap();
        let g = first_order_gains(&[], &v, &dw, &b);
        let direct = frobenius_sq(&(&dw * &b)) / 15.0;
        assert!((g.delta_dw - direct).abs() < 1e-8);
    }

    #[test]
    fn conv_collapse_to_fc() {
        // 1x1 kernels on 1x1 images: pseudo stats are fc stats times r = 1
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, c, c2) = (9, 3, 2);
        let x = Tensor4::from_fn(n, c, 1, 1, |_, _, _, _| rng.random_range(-1.0..1.0));
        let v = Tensor4::from_fn(n, c2, 1, 1, |_, _, _, _| rng.random_range(-1.0..1.0));
        let u = crate::net::conv::unfold(&x, 1, 0).unwrap();
        let st = stats_conv(&u, &v, 1, 0, RMode::Min).unwrap();
        let fc = stats_fc(&x.to_matrix(), &v.to_matrix()).unwrap();
        assert!((st.s - fc.s).amax() < 1e-14);
        assert!((st.n - fc.n).amax() < 1e-14);
    }
}
