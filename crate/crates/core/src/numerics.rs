//! Dense linear-algebra substrate.
//!
//! Everything downstream is phrased in terms of four primitives: a sorted,
//! sign-normalized SVD, a Moore–Penrose pseudo-inverse, the inverse square
//! root of a positive semi-definite matrix, and a generalized symmetric
//! eigensolver obtained by whitening. Rank cutoffs are always relative to the
//! largest singular (or eigen) value.

use nalgebra::DMatrix;
use thiserror::Error;

/// Dense real matrix. Samples are stored one per column throughout the crate.
pub type Matrix = DMatrix<f64>;

/// Default relative cutoff below which singular / eigen values count as zero.
pub const DEFAULT_RCOND: f64 = 1e-10;

const SVD_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("decomposition did not converge")]
    NoConvergence,
    #[error("matrix is not positive semi-definite (eigenvalue {eigenvalue:e}, tolerance {tolerance:e})")]
    NotPsd { eigenvalue: f64, tolerance: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Thin singular value decomposition `M = U diag(sigma) V^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self, rcond: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rcond * top).count()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite)
    }
}

/// Index of the entry with the largest magnitude, first index on ties.
fn dominant_index(col: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in col.enumerate() {
        let a = x.abs();
        match best {
            Some((_, b)) if a <= b => {}
            _ => best = Some((i, a)),
        }
    }
    best.map(|(i, _)| i)
}

/// Thin SVD with singular values sorted non-increasing.
///
/// Sign convention: in every left singular vector the entry of largest
/// magnitude (first index on ties) is non-negative; the matching right
/// vector is flipped with it.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    ensure_finite(m)?;
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok(SvdResult {
            u: Matrix::zeros(rows, 0),
            sigma: Vec::new(),
            v: Matrix::zeros(cols, 0),
        });
    }
    // nalgebra's bidiagonal sweep can return a wrong factorization of
    // rank-deficient input, so the decomposition itself comes from faer.
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let raw = fm.thin_svd().map_err(|_| NumericsError::NoConvergence)?;
    let (u_f, v_f, s_f) = (raw.U(), raw.V(), raw.S().column_vector());
    let u_raw = Matrix::from_fn(rows, k, |i, j| u_f[(i, j)]);
    let vt_raw = Matrix::from_fn(k, cols, |i, j| v_f[(j, i)]);
    let singular_values: Vec<f64> = (0..k).map(|j| s_f[j]).collect();
    let mut order: Vec<usize> = (0..k).collect();
    // stable sort keeps the decomposition deterministic on ties
    order.sort_by(|&a, &b| singular_values[b].total_cmp(&singular_values[a]));

    let mut u = Matrix::zeros(rows, k);
    let mut v = Matrix::zeros(cols, k);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let s = singular_values[src];
        if !s.is_finite() {
            return Err(NumericsError::NoConvergence);
        }
        sigma.push(s.max(0.0));
        let ucol = u_raw.column(src);
        let flip = match dominant_index(ucol.iter().copied()) {
            Some(i) => ucol[i] < 0.0,
            None => false,
        };
        let sign = if flip { -1.0 } else { 1.0 };
        for r in 0..rows {
            u[(r, dst)] = sign * ucol[r];
        }
        for c in 0..cols {
            v[(c, dst)] = sign * vt_raw[(src, c)];
        }
    }
    if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(NumericsError::NoConvergence);
    }
    Ok(SvdResult { u, sigma, v })
}

/// Moore–Penrose pseudo-inverse; singular values `<= rcond * sigma_max` are
/// treated as zero.
pub fn pinv(m: &Matrix, rcond: f64) -> Result<Matrix> {
    if !(rcond >= 0.0) {
        return Err(NumericsError::Domain(format!("rcond must be >= 0, got {rcond}")));
    }
    let dec = svd(m)?;
    let top = dec.sigma.first().copied().unwrap_or(0.0);
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (j, &s) in dec.sigma.iter().enumerate() {
        if s <= rcond * top || s == 0.0 {
            continue;
        }
        let vj = dec.v.column(j);
        let uj = dec.u.column(j);
        out += (vj * uj.transpose()) / s;
    }
    Ok(out)
}

/// Symmetric eigen-decomposition of `(S + S^T)/2`, eigenvalues sorted
/// non-increasing. Returned as `(values, vectors-as-columns)`.
pub fn sym_eig(s: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure_finite(s)?;
    if !s.is_square() {
        return Err(NumericsError::Shape(format!("expected square matrix, got {:?}", s.shape())));
    }
    let n = s.nrows();
    if n == 0 {
        return Ok((Vec::new(), Matrix::zeros(0, 0)));
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = sym
        .try_symmetric_eigen(f64::EPSILON, SVD_MAX_ITER)
        .ok_or(NumericsError::NoConvergence)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut vecs = Matrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        vals.push(eig.eigenvalues[src]);
        let col = eig.eigenvectors.column(src);
        let flip = dominant_index(col.iter().copied()).map(|i| col[i] < 0.0).unwrap_or(false);
        let sign = if flip { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[(r, dst)] = sign * col[r];
        }
    }
    Ok((vals, vecs))
}

/// Floating-point slack for eigenvalues of a PSD matrix built from products.
fn psd_noise(top: f64, n: usize) -> f64 {
    64.0 * f64::EPSILON * top.abs() * (n.max(1) as f64)
}

fn psd_spectrum(s: &Matrix, rcond: f64) -> Result<(Vec<f64>, Matrix, f64)> {
    if !(rcond >= 0.0) {
        return Err(NumericsError::Domain(format!("rcond must be >= 0, got {rcond}")));
    }
    let (vals, vecs) = sym_eig(s)?;
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let tolerance = (rcond * top).max(psd_noise(top, s.nrows()));
    if let Some(&low) = vals.last() {
        if low < -tolerance {
            return Err(NumericsError::NotPsd { eigenvalue: low, tolerance });
        }
    }
    Ok((vals, vecs, (rcond * top).max(0.0)))
}

fn spectral_map(vals: &[f64], vecs: &Matrix, cutoff: f64, f: impl Fn(f64) -> f64) -> Matrix {
    let n = vecs.nrows();
    let mut out = Matrix::zeros(n, n);
    for (j, &l) in vals.iter().enumerate() {
        if l <= cutoff || l <= 0.0 {
            continue;
        }
        let c = vecs.column(j);
        out += (c * c.transpose()) * f(l);
    }
    (&out + out.transpose()) * 0.5
}

/// `O diag(1/sqrt(sigma)) O^T` with eigenvalues `<= rcond * lambda_max`
/// mapped to zero.
pub fn inv_sqrt_psd(s: &Matrix, rcond: f64) -> Result<Matrix> {
    let (vals, vecs, cutoff) = psd_spectrum(s, rcond)?;
    Ok(spectral_map(&vals, &vecs, cutoff, |l| 1.0 / l.sqrt()))
}

/// Principal square root of a PSD matrix (same cutoff convention).
pub fn sqrt_psd(s: &Matrix, rcond: f64) -> Result<Matrix> {
    let (vals, vecs, cutoff) = psd_spectrum(s, rcond)?;
    Ok(spectral_map(&vals, &vecs, cutoff, f64::sqrt))
}

/// Clamp a nearly-PSD matrix onto the PSD cone: symmetrize, then zero any
/// negative eigenvalues.
pub fn repair_psd(s: &Matrix) -> Result<Matrix> {
    let (vals, vecs) = sym_eig(s)?;
    let n = s.nrows();
    let mut out = Matrix::zeros(n, n);
    for (j, &l) in vals.iter().enumerate() {
        if l > 0.0 {
            let c = vecs.column(j);
            out += (c * c.transpose()) * l;
        }
    }
    Ok((&out + out.transpose()) * 0.5)
}

/// One generalized eigenpair `A x = value * B x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: nalgebra::DVector<f64>,
}

/// Top-`k` pairs of the generalized symmetric problem `A x = lambda B x`
/// (typically `A = N N^T`, `B = S`), by reduction
/// `B^{-1/2} A B^{-1/2} = P diag(mu) P^T`, `x = B^{-1/2} p`.
///
/// Vectors are normalized so that `x^T B x = 1`. If `k` exceeds the numerical
/// rank of the reduced problem only rank-many pairs are returned.
pub fn gen_eig_pairs(a: &Matrix, b: &Matrix, k: usize) -> Result<Vec<EigenPair>> {
    if !a.is_square() || a.shape() != b.shape() {
        return Err(NumericsError::Shape(format!(
            "A {:?} and B {:?} must be square and equal-sized",
            a.shape(),
            b.shape()
        )));
    }
    ensure_finite(a)?;
    let w = inv_sqrt_psd(b, DEFAULT_RCOND)?;
    let reduced = &w * a * &w;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let dec = svd(&reduced)?;
    let top = dec.sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for (j, &mu) in dec.sigma.iter().enumerate().take(k) {
        if mu <= 1e-12 * top {
            break;
        }
        let x = &w * dec.u.column(j);
        out.push(EigenPair { value: mu, vector: x });
    }
    Ok(out)
}

pub fn frobenius_sq(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum()
}

/// Trace inner product `<A, B>_Tr = sum_ij A_ij B_ij`.
pub fn trace_inner(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_rank(rows: usize, cols: usize, rank: usize, rng: &mut ChaCha8Rng) -> Matrix {
        random(rows, rank, rng) * random(rank, cols, rng)
    }

    #[test]
    fn svd_of_diagonal() {
        let m = Matrix::from_diagonal(&nalgebra::dvector![3.0, 1.0]);
        let d = svd(&m).unwrap();
        assert_eq!(d.sigma, vec![3.0, 1.0]);
        assert!((d.u.clone() - Matrix::identity(2, 2)).amax() < 1e-15);
        assert!((d.v.clone() - Matrix::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn svd_of_zero_matrix() {
        let m = Matrix::zeros(2, 3);
        let d = svd(&m).unwrap();
        assert_eq!(d.sigma, vec![0.0, 0.0]);
        assert_eq!(d.reconstruct().amax(), 0.0);
    }

    #[test]
    fn svd_reconstructs_and_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(5, 7), (7, 5), (1, 4), (6, 6)] {
            let m = random(r, c, &mut rng);
            let d = svd(&m).unwrap();
            let resid = (d.reconstruct() - &m).norm();
            assert!(resid <= 1e-8 * (1.0 + m.norm()), "residual {resid}");
            let k = r.min(c);
            assert!((d.u.transpose() * &d.u - Matrix::identity(k, k)).amax() < 1e-10);
            assert!((d.v.transpose() * &d.v - Matrix::identity(k, k)).amax() < 1e-10);
            assert!(d.sigma.windows(2).all(|w| w[0] >= w[1]));
            for j in 0..k {
                let col = d.u.column(j);
                let i = dominant_index(col.iter().copied()).unwrap();
                assert!(col[i] >= 0.0);
            }
        }
    }

    #[test]
    fn svd_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(6, 4, &mut rng);
        assert_eq!(svd(&m).unwrap(), svd(&m).unwrap());
    }

    #[test]
    fn svd_rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert_eq!(svd(&m), Err(NumericsError::NonFinite));
    }

    #[test]
    fn pinv_examples() {
        let eye = Matrix::identity(3, 3);
        assert!((pinv(&eye, DEFAULT_RCOND).unwrap() - &eye).amax() < 1e-15);
        let m = Matrix::from_diagonal(&nalgebra::dvector![2.0, 0.0]);
        let p = pinv(&m, DEFAULT_RCOND).unwrap();
        assert!((p - Matrix::from_diagonal(&nalgebra::dvector![0.5, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn svd_reconstructs_rank_one_tall_input() {
        let a = Matrix::from_column_slice(
            4,
            2,
            &[
                0.09567574198529509,
                -0.27943790149579195,
                -0.22553017200820966,
                0.7182657232652352,
                -0.2561785271307187,
                0.7482146314652388,
                0.603872894944266,
                -1.9232069828405296,
            ],
        );
        let d = svd(&a).unwrap();
        let s = Matrix::from_diagonal(&nalgebra::DVector::from_vec(d.sigma.clone()));
        assert!((&d.u * s * d.v.transpose() - &a).norm() < 1e-12);
        assert!((d.sigma[0] - a.norm()).abs() < 1e-12);
    }

    #[test]
    fn pinv_satisfies_penrose_on_rank_deficient_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_rank(4, 4, 2, &mut rng);
        let p = pinv(&m, DEFAULT_RCOND).unwrap();
        let scale = m.norm();
        assert!((&m * &p * &m - &m).norm() <= 1e-8 * scale);
    }

    #[test]
    fn inv_sqrt_examples() {
        let s = Matrix::from_diagonal(&nalgebra::dvector![4.0, 1.0]);
        let r = inv_sqrt_psd(&s, DEFAULT_RCOND).unwrap();
        assert!((r - Matrix::from_diagonal(&nalgebra::dvector![0.5, 1.0])).amax() < 1e-15);
        let s = Matrix::from_diagonal(&nalgebra::dvector![4.0, 0.0]);
        let r = inv_sqrt_psd(&s, DEFAULT_RCOND).unwrap();
        assert!((r - Matrix::from_diagonal(&nalgebra::dvector![0.5, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn inv_sqrt_rejects_indefinite() {
        let s = Matrix::from_diagonal(&nalgebra::dvector![1.0, -0.5]);
        assert!(matches!(inv_sqrt_psd(&s, DEFAULT_RCOND), Err(NumericsError::NotPsd { .. })));
    }

    #[test]
    fn inv_sqrt_whitens_to_range_projector() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // rank 3 in dimension 5
        let x = random(3, 5, &mut rng);
        let s = x.transpose() * &x;
        let w = inv_sqrt_psd(&s, DEFAULT_RCOND).unwrap();
        let proj = &w * &s * &w;
        // oracle: projector onto the row space of x from its SVD
        let d = svd(&x).unwrap();
        let v = d.v.columns(0, 3).into_owned();
        let oracle = &v * v.transpose();
        assert!((proj - oracle).amax() < 1e-8);
    }

    #[test]
    fn gen_eig_examples() {
        let a = Matrix::from_diagonal(&nalgebra::dvector![4.0, 1.0]);
        let b = Matrix::identity(2, 2);
        let pairs = gen_eig_pairs(&a, &b, 2).unwrap();
        assert_eq!(pairs.len(), 2);
        assert!((pairs[0].value - 4.0).abs() < 1e-14 && (pairs[1].value - 1.0).abs() < 1e-14);
        assert!((pairs[0].vector.clone() - nalgebra::dvector![1.0, 0.0]).amax() < 1e-14);
        assert!((pairs[1].vector.clone() - nalgebra::dvector![0.0, 1.0]).amax() < 1e-14);

        let zero = Matrix::zeros(2, 2);
        assert!(gen_eig_pairs(&zero, &b, 2).unwrap().is_empty());
    }

    #[test]
    fn gen_eig_matches_whitened_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = random(4, 30, &mut rng);
        let s = &x * x.transpose() / 30.0;
        let n = random(4, 3, &mut rng);
        let pairs = gen_eig_pairs(&(&n * n.transpose()), &s, 3).unwrap();
        let w = inv_sqrt_psd(&s, DEFAULT_RCOND).unwrap();
        let d = svd(&(&w * &n)).unwrap();
        assert_eq!(pairs.len(), 3);
        for (k, p) in pairs.iter().enumerate() {
            let expect = d.sigma[k] * d.sigma[k];
            assert!((p.value - expect).abs() <= 1e-8 * expect);
            let other = &w * d.u.column(k);
            let cos = p.vector.dot(&other) / (p.vector.norm() * other.norm());
            assert!(cos.abs() >= 1.0 - 1e-8);
            // residual of the generalized problem
            let lhs = &n * n.transpose() * &p.vector;
            let rhs = &s * &p.vector * p.value;
            assert!((lhs - rhs).norm() < 1e-8 * p.value);
        }
    }

    #[test]
    fn gen_eig_truncates_to_rank() {
        let n = Matrix::from_column_slice(3, 1, &[1.0, 2.0, 0.5]);
        let pairs = gen_eig_pairs(&(&n * n.transpose()), &Matrix::identity(3, 3), 3).unwrap();
        assert_eq!(pairs.len(), 1);
        assert!((pairs[0].value - 5.25).abs() < 1e-12);
    }
}
