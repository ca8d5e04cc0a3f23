//! Checks on the linear-algebra layer: primitives, the best update, the
//! optimal neurons and the convolutional pseudo statistics.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bottleneck::{self, Neurons, RMode};
use crate::net::{conv, Tensor4};
use crate::numerics::{self, frobenius_sq, trace_inner, Matrix, DEFAULT_RCOND};

use super::oracles::{oracle_least_squares, oracle_neuron_objective, row_space_basis};
use super::{tol, CheckResult, Ctx, Fault};

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Gaussian matrix of rank at most `rank`.
pub(crate) fn low_rank(rng: &mut ChaCha8Rng, r: usize, c: usize, rank: usize) -> Matrix {
    gaussian(rng, r, rank) * gaussian(rng, rank, c)
}

fn rel(err: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

/// Layer input with a bias row; rank-deficient for roughly a third of draws.
fn layer_input(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Matrix {
    let core = if rng.random_bool(1.0 / 3.0) && d > 1 {
        let rank = rng.random_range(1..d);
        low_rank(rng, d, n, rank)
    } else {
        gaussian(rng, d, n)
    };
    bottleneck_input(&core)
}

fn bottleneck_input(core: &Matrix) -> Matrix {
    crate::net::with_bias_row(core)
}

/// A projected goal: random goal minus what the second layer already
/// achieves.
fn projected_goal(rng: &mut ChaCha8Rng, out: usize, n: usize) -> Matrix {
    let h = rng.random_range(1..=4);
    let b2 = bottleneck_input(&gaussian(rng, h, n));
    let v = gaussian(rng, out, n);
    let dw = bottleneck::best_update(&b2, &v, DEFAULT_RCOND).expect("finite instance");
    bottleneck::project_goal(&v, &dw, &b2)
}

fn apply_fault(mut n: Neurons, fault: Fault) -> Neurons {
    if fault == Fault::FlipNeuronSign && !n.is_empty() {
        n.omega.column_mut(0).neg_mut();
    }
    n
}

pub fn pinv_penrose(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let rank = rng.random_range(0..=r.min(c));
        let a = low_rank(&mut rng, r, c, rank);
        let x = match numerics::pinv(&a, DEFAULT_RCOND) {
            Ok(x) => x,
            Err(e) => return CheckResult::error(e),
        };
        let (ax, xa) = (&a * &x, &x * &a);
        let errs = [
            rel((&ax * &a - &a).norm(), a.norm()),
            rel((&xa * &x - &x).norm(), x.norm()),
            rel((&ax - ax.transpose()).norm(), ax.norm()),
            rel((&xa - xa.transpose()).norm(), xa.norm()),
        ];
        worst = errs.iter().fold(worst, |m, &e| m.max(e));
    }
    CheckResult::at_most(worst, tol::PENROSE_REL, "100 matrices, ranks 0..min(dim)")
}

pub fn inv_sqrt_projector(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(1..=10);
        let r = rng.random_range(1..=12);
        let x = gaussian(&mut rng, r, d);
        let s = x.transpose() * &x;
        let w = match numerics::inv_sqrt_psd(&s, DEFAULT_RCOND) {
            Ok(w) => w,
            Err(e) => return CheckResult::error(e),
        };
        let basis = match row_space_basis(&x) {
            Ok(b) => b,
            Err(e) => return CheckResult::error(e),
        };
        let proj = &basis * basis.transpose();
        worst = worst.max((&w * &s * &w - proj).amax());
    }
    CheckResult::at_most(worst, tol::PROJECTOR, "S = X^T X, rank-deficient when rows < cols")
}

pub fn svd_determinism(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(3);
    let mut differing = 0usize;
    for _ in 0..20 {
        let (r, c) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let m = gaussian(&mut rng, r, c);
        match (numerics::svd(&m), numerics::svd(&m)) {
            (Ok(a), Ok(b)) => {
                let same = a.u.as_slice().iter().zip(b.u.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.v.as_slice().iter().zip(b.v.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.sigma.iter().zip(&b.sigma).all(|(x, y)| x.to_bits() == y.to_bits());
                differing += usize::from(!same);
            }
            (Err(e), _) | (_, Err(e)) => return CheckResult::error(e),
        }
    }
    CheckResult::at_most(differing as f64, tol::SVD_REPEAT, "repeated calls differing")
}

/// SPD `S` with a non-degenerate whitened cross moment.
fn spd_instance(rng: &mut ChaCha8Rng) -> bottleneck::LayerStats {
    let d = rng.random_range(2..=8);
    let n = rng.random_range(3 * d..=6 * d);
    let m = rng.random_range(d..=d + 4);
    let b = gaussian(rng, d, n);
    let v = gaussian(rng, m, n);
    bottleneck::stats_fc(&b, &v).expect("matched instance")
}

pub fn geneig_vectors(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(4);
    let (mut val_err, mut col_err) = (0.0f64, 0.0f64);
    for _ in 0..30 {
        let st = spd_instance(&mut rng);
        let d = st.s.nrows();
        let res = (|| -> Result<(), numerics::NumericsError> {
            let w = numerics::inv_sqrt_psd(&st.s, DEFAULT_RCOND)?;
            let dec = numerics::svd(&(&w * &st.n))?;
            let pairs = numerics::gen_eig_pairs(&(&st.n * st.n.transpose()), &st.s, d)?;
            let top = dec.sigma[0] * dec.sigma[0];
            for (j, p) in pairs.iter().enumerate() {
                val_err = val_err.max((p.value - dec.sigma[j] * dec.sigma[j]).abs() / top);
                let x = &w * dec.u.column(j);
                let cos = (x.dot(&p.vector) / (x.norm() * p.vector.norm())).abs();
                col_err = col_err.max(1.0 - cos);
            }
            Ok(())
        })();
        if let Err(e) = res {
            return CheckResult::error(e);
        }
    }
    CheckResult::all(vec![
        CheckResult::at_most(val_err, tol::GENEIG_VALUE_REL, format!("eigenvalue rel err {val_err:.2e}")),
        CheckResult::at_most(col_err, tol::GENEIG_COLLINEAR, format!("1-|cos| {col_err:.2e}")),
    ])
}

/// One dense instance of the neuron problem, scored three ways.
struct FcScores {
    achieved: f64,
    predicted: f64,
    oracle: f64,
    scale: f64,
}

fn fc_instance(rng: &mut ChaCha8Rng, fault: Fault) -> Result<FcScores, String> {
    let d = rng.random_range(1..=31);
    let out = rng.random_range(1..=32);
    let n = rng.random_range(2..=128);
    let b = layer_input(rng, d, n);
    let vp = projected_goal(rng, out, n);
    let stats = bottleneck::stats_fc(&b, &vp).map_err(|e| e.to_string())?;
    let full = bottleneck::optimal_neurons(&stats, None, DEFAULT_RCOND).map_err(|e| e.to_string())?;
    let k = if rng.random_bool(0.5) || full.len() <= 1 { full.len() } else { rng.random_range(1..full.len()) };
    let neurons = apply_fault(full.truncate(k), fault);
    let nf = n as f64;
    let psi = frobenius_sq(&vp) / nf;
    let achieved = frobenius_sq(&(&vp - bottleneck::contribution_fc(&neurons, &b))) / nf;
    let oracle = oracle_neuron_objective(&b, &vp, k).map_err(|e| e.to_string())?;
    Ok(FcScores { achieved, predicted: psi - neurons.lambda_sum_sq(), oracle, scale: psi })
}

pub fn fc_exactness(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(5);
    let start = Instant::now();
    let (mut vs_formula, mut vs_oracle) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        match fc_instance(&mut rng, ctx.fault) {
            Ok(s) => {
                vs_formula = vs_formula.max(rel((s.achieved - s.predicted).abs(), s.scale));
                vs_oracle = vs_oracle.max(rel((s.achieved - s.oracle).abs(), s.scale));
            }
            Err(e) => return CheckResult::error(e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    CheckResult::all(vec![
        CheckResult::at_most(secs, tol::FC_SECONDS, format!("{secs:.2} s")),
        CheckResult::at_most(vs_oracle, tol::FC_EXACT_REL, format!("vs rank-K oracle {vs_oracle:.2e}")),
        CheckResult::at_most(vs_formula, tol::FC_EXACT_REL, format!("vs Psi - sum lambda^2 {vs_formula:.2e}")),
    ])
}

pub fn best_update_optimality(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(6);
    let (mut oracle_err, mut worst_margin) = (0.0f64, f64::NEG_INFINITY);
    for _ in 0..100 {
        let d = rng.random_range(1..=31);
        let m = rng.random_range(1..=32);
        let n = rng.random_range(2..=128);
        let b = layer_input(&mut rng, d, n);
        let v = gaussian(&mut rng, m, n);
        let nf = n as f64;
        let dw = match bottleneck::best_update(&b, &v, DEFAULT_RCOND) {
            Ok(x) => x,
            Err(e) => return CheckResult::error(e),
        };
        let resid = &dw * &b - &v;
        let best = frobenius_sq(&resid) / nf;
        let scale = (frobenius_sq(&v) / nf).max(f64::MIN_POSITIVE);
        match oracle_least_squares(&b, &v) {
            Ok(o) => oracle_err = oracle_err.max((best - o).abs() / scale),
            Err(e) => return CheckResult::error(e),
        }
        for _ in 0..100 {
            let eps = 10f64.powf(rng.random_range(-4.0..0.0));
            let e = gaussian(&mut rng, m, d + 1) * eps;
            // objective of dW* + E, expanded around the optimum
            let eb = &e * &b;
            let cand = (frobenius_sq(&(&resid + &eb))) / nf;
            worst_margin = worst_margin.max((best - cand) / scale);
        }
    }
    CheckResult::all(vec![
        CheckResult::at_most(worst_margin, tol::LSQ_PERTURB_SLACK, format!("best minus perturbed {worst_margin:.2e}")),
        CheckResult::at_most(oracle_err, tol::LSQ_ORACLE_REL, format!("vs SVD oracle {oracle_err:.2e}")),
    ])
}

pub fn normal_equations(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(7);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (d, m, n) = (rng.random_range(1..=16), rng.random_range(1..=8), rng.random_range(2..=64));
        let b = layer_input(&mut rng, d, n);
        let v = gaussian(&mut rng, m, n);
        let dw = match bottleneck::best_update(&b, &v, DEFAULT_RCOND) {
            Ok(x) => x,
            Err(e) => return CheckResult::error(e),
        };
        let vp = bottleneck::project_goal(&v, &dw, &b);
        worst = worst.max((&vp * b.transpose()).norm() / (v.norm() * b.norm()));
    }
    CheckResult::at_most(worst, tol::NORMAL_EQUATIONS, "||V_proj B^T|| / (||V|| ||B||)")
}

pub fn geneig_cross_path(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(8);
    let (mut contrib, mut values, mut fallbacks) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..30 {
        let st = spd_instance(&mut rng);
        let (svd_path, eig) = match (
            bottleneck::optimal_neurons(&st, None, DEFAULT_RCOND),
            bottleneck::optimal_neurons_geneig(&st, None, DEFAULT_RCOND),
        ) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return CheckResult::error(e),
        };
        fallbacks += usize::from(eig.fell_back);
        let eig = eig.neurons;
        if eig.len() != svd_path.len() {
            return CheckResult::at_most(f64::INFINITY, tol::GENEIG_CONTRIBUTION_REL, "paths disagree on the rank");
        }
        let top = svd_path.lambdas[0] * svd_path.lambdas[0];
        for k in 0..svd_path.len() {
            let c1 = svd_path.omega.column(k) * svd_path.alpha.column(k).transpose();
            let c2 = eig.omega.column(k) * eig.alpha.column(k).transpose();
            contrib = contrib.max((&c1 - &c2).norm() / c1.norm());
            values = values.max((eig.lambdas[k].powi(2) - svd_path.lambdas[k].powi(2)).abs() / top);
        }
    }
    CheckResult::all(vec![
        CheckResult::at_most(fallbacks as f64, 0.0, format!("{fallbacks} fallbacks")),
        CheckResult::at_most(values, tol::GENEIG_VALUE_REL, format!("eigenvalues vs sigma^2 {values:.2e}")),
        CheckResult::at_most(contrib, tol::GENEIG_CONTRIBUTION_REL, format!("rank-1 contributions {contrib:.2e}")),
    ])
}

fn fc_problem(rng: &mut ChaCha8Rng) -> Result<(Matrix, Matrix, Neurons), String> {
    let (d, out, n) = (rng.random_range(2..=12), rng.random_range(2..=8), rng.random_range(4..=64));
    let b = layer_input(rng, d, n);
    let vp = projected_goal(rng, out, n);
    let st = bottleneck::stats_fc(&b, &vp).map_err(|e| e.to_string())?;
    let nr = bottleneck::optimal_neurons(&st, None, DEFAULT_RCOND).map_err(|e| e.to_string())?;
    Ok((b, vp, nr))
}

pub fn contribution_orthogonality(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(9);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, _, nr) = match fc_problem(&mut rng) {
            Ok(x) => x,
            Err(e) => return CheckResult::error(e),
        };
        let parts: Vec<Matrix> =
            (0..nr.len()).map(|k| nr.omega.column(k) * (nr.alpha.column(k).transpose() * &b)).collect();
        for i in 0..parts.len() {
            for j in 0..i {
                let c = trace_inner(&parts[i], &parts[j]) / (parts[i].norm() * parts[j].norm());
                worst = worst.max(c.abs());
            }
        }
    }
    CheckResult::at_most(worst, tol::ORTHOGONALITY, "max |cos| between neuron contributions")
}

pub fn scalar_product_value(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(10);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (b, vp, nr) = match fc_problem(&mut rng) {
            Ok(x) => x,
            Err(e) => return CheckResult::error(e),
        };
        let nf = b.ncols() as f64;
        let ip = trace_inner(&vp, &bottleneck::contribution_fc(&nr, &b)) / nf;
        worst = worst.max((ip - nr.lambda_sum_sq()).abs() / (frobenius_sq(&vp) / nf));
    }
    CheckResult::at_most(worst, tol::SCALAR_PRODUCT, "(1/n)<V_proj, sum omega alpha^T B> vs sum lambda^2")
}

pub fn local_invertibility(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(11);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = rng.random_range(2..=10);
        let n = rng.random_range(2..=40);
        let (rank, m) = (rng.random_range(1..d), rng.random_range(1..=5));
        let b = low_rank(&mut rng, d, n, rank);
        let v = gaussian(&mut rng, m, n);
        let s = (&b * b.transpose()) / n as f64;
        let (half, inv_half) = match (numerics::sqrt_psd(&s, DEFAULT_RCOND), numerics::inv_sqrt_psd(&s, DEFAULT_RCOND)) {
            (Ok(a), Ok(c)) => (a, c),
            (Err(e), _) | (_, Err(e)) => return CheckResult::error(e),
        };
        let bv = &b * v.transpose();
        worst = worst.max((&half * &inv_half * &bv - &bv).norm() / bv.norm());
    }
    CheckResult::at_most(worst, tol::LOCAL_INVERTIBILITY, "S^1/2 S^-1/2 B V^T = B V^T with rank-deficient S")
}

pub fn trace_inequality(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(12);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let rank = rng.random_range(1..=d);
        let a = low_rank(&mut rng, d, d, rank);
        let rank = match numerics::svd(&a) {
            Ok(s) => s.rank(1e-10),
            Err(e) => return CheckResult::error(e),
        };
        let lhs = a.trace().powi(2);
        let rhs = rank as f64 * frobenius_sq(&a);
        worst = worst.max((lhs - rhs) / frobenius_sq(&a));
    }
    CheckResult::at_most(worst, tol::TRACE_INEQUALITY, "(tr(A)^2 - rank ||A||^2) / ||A||^2")
}

pub fn equi_norm(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(13);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (d, m, n) = (rng.random_range(1..=10), rng.random_range(1..=6), rng.random_range(2..=50));
        let b = layer_input(&mut rng, d, n);
        let target = gaussian(&mut rng, m, n);
        let argmin = match bottleneck::best_update(&b, &target, DEFAULT_RCOND) {
            Ok(h) => h * &b,
            Err(e) => return CheckResult::error(e),
        };
        let c = frobenius_sq(&argmin);
        // max <D, HB> over ||HB||^2 <= c: HB = sqrt(c) D W W^T / ||D W||
        let w = match row_space_basis(&b) {
            Ok(w) => w,
            Err(e) => return CheckResult::error(e),
        };
        let dw = &target * &w;
        let argmax = (&dw * w.transpose()) * (c.sqrt() / dw.norm());
        worst = worst.max((&argmin - &argmax).norm() / argmin.norm());
    }
    CheckResult::at_most(worst, tol::EQUI_NORM, "least-squares vs norm-constrained inner-product maximizer")
}

/// `(1/n) ||DEG(A, Omega) - V_proj||^2` by explicit convolution versus the
/// pseudo-statistics bound, for the optimal neurons and random ones.
pub fn conv_bound(ctx: &Ctx) -> CheckResult {
    let mut rng = ctx.rng(14);
    let (mut gap, mut growth) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for _ in 0..30 {
        match conv_instance(&mut rng) {
            Ok((g, r)) => {
                gap = gap.max(g);
                growth = growth.max(r);
            }
            Err(e) => return CheckResult::error(e),
        }
    }
    CheckResult::all(vec![
        CheckResult::at_most(growth, 0.0, format!("residual after minus before {growth:.2e}")),
        CheckResult::at_most(gap, tol::CONV_BOUND, format!("max LHS - RHS {gap:.2e}")),
    ])
}

fn conv_instance(rng: &mut ChaCha8Rng) -> Result<(f64, f64), String> {
    let n = rng.random_range(1..=3);
    let c = rng.random_range(1..=2);
    let side = rng.random_range(4..=6);
    let (k1, p1) = (rng.random_range(1..=3), rng.random_range(0..=1));
    let p2 = rng.random_range(0..=1);
    // the second kernel must fit the first layer's output
    let mid = side + 2 * p1 + 1 - k1;
    let k2 = rng.random_range(1..=3.min(mid + 2 * p2));
    let c2 = rng.random_range(1..=3);
    let x = Tensor4::from_fn(n, c, side, side, |_, _, _, _| StandardNormal.sample(&mut *rng));
    let u = conv::unfold(&x, k1, p1).map_err(|e| e.to_string())?;
    let (h2, w2) = conv::out_size(u.h_out, u.w_out, k2, p2).map_err(|e| e.to_string())?;
    let vp = Tensor4::from_fn(n, c2, h2, w2, |_, _, _, _| StandardNormal.sample(&mut *rng));
    let st = bottleneck::stats_conv(&u, &vp, k2, p2, RMode::Min).map_err(|e| e.to_string())?;
    let s = numerics::repair_psd(&st.s).map_err(|e| e.to_string())?;
    let half = numerics::sqrt_psd(&s, DEFAULT_RCOND).map_err(|e| e.to_string())?;
    let inv_half = numerics::inv_sqrt_psd(&s, DEFAULT_RCOND).map_err(|e| e.to_string())?;
    let whitened = &inv_half * &st.n;
    let nf = n as f64;
    let before = vp.data.iter().map(|v| v * v).sum::<f64>() / nf;
    let score = |nr: &Neurons| -> Result<(f64, f64), String> {
        let deg = bottleneck::contribution_conv(nr, &u, c2, k2, p2).map_err(|e| e.to_string())?;
        let lhs = deg.data.iter().zip(&vp.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nf;
        let prod = &nr.alpha * nr.omega.transpose();
        let rhs = frobenius_sq(&(&half * prod - &whitened)) - frobenius_sq(&whitened) + before;
        Ok((lhs, rhs))
    };
    let opt = bottleneck::optimal_neurons(&st, None, DEFAULT_RCOND).map_err(|e| e.to_string())?;
    let (lhs, rhs) = score(&opt)?;
    let mut gap = lhs - rhs;
    let growth = lhs - before;
    for _ in 0..3 {
        let k = rng.random_range(1..=3);
        let nr = Neurons {
            alpha: gaussian(rng, st.s.nrows(), k),
            omega: gaussian(rng, st.n.ncols(), k),
            lambdas: Vec::new(),
        };
        let (l, r) = score(&nr)?;
        gap = gap.max(l - r);
    }
    Ok((gap, growth))
}
