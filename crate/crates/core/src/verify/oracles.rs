//! Reference computations that certify the bottleneck formulas.
//!
//! None of these call `pinv`, `inv_sqrt_psd` or the proposal code; the only
//! shared primitive is `numerics::svd`.

use crate::net::{Loss, NetError, Network, Value};
use crate::numerics::{frobenius_sq, svd, Matrix, NumericsError};

/// Orthonormal basis (as columns) of the row space of `b`, from its SVD.
pub fn row_space_basis(b: &Matrix) -> Result<Matrix, NumericsError> {
    if b.nrows() == 0 || b.ncols() == 0 {
        return Ok(Matrix::zeros(b.ncols(), 0));
    }
    let dec = svd(b)?;
    let top = dec.sigma.first().copied().unwrap_or(0.0);
    let tol = top * f64::EPSILON * (b.nrows().max(b.ncols()) as f64) * 8.0;
    let r = dec.sigma.iter().take_while(|&&s| s > tol && s > 0.0).count();
    Ok(dec.v.columns(0, r).into_owned())
}

/// `min_dW (1/n) ||dW B - V||^2`, from the row space of `B`:
/// the optimum leaves exactly the part of `V` orthogonal to it.
pub fn oracle_least_squares(b: &Matrix, v: &Matrix) -> Result<f64, NumericsError> {
    assert_eq!(b.ncols(), v.ncols(), "B and V must have one column per sample");
    let n = v.ncols().max(1) as f64;
    let w = row_space_basis(b)?;
    let kept = v * &w;
    Ok(((frobenius_sq(v) - frobenius_sq(&kept)).max(0.0)) / n)
}

/// `min_{rank M <= K} ||T - M||^2 = sum_{k > K} sigma_k^2`.
pub fn oracle_rank_k(target: &Matrix, k: usize) -> Result<f64, NumericsError> {
    if target.is_empty() {
        return Ok(0.0);
    }
    let dec = svd(target)?;
    Ok(dec.sigma.iter().skip(k).map(|s| s * s).sum())
}

/// `min_{rank C <= K} (1/n) ||V - C B||^2`, the value the optimal neurons must
/// reach on a dense site (`V` the projected goal, `B` the first-layer input).
///
/// With `W` a row-space basis of `B`, every `C B` equals `G W^T` for some `G`
/// of the same rank, so the problem splits into the part of `V` outside the
/// row space plus a plain rank-`K` truncation of `V W`.
pub fn oracle_neuron_objective(b: &Matrix, v: &Matrix, k: usize) -> Result<f64, NumericsError> {
    let n = v.ncols().max(1) as f64;
    let w = row_space_basis(b)?;
    let kept = v * &w;
    let outside = (frobenius_sq(v) - frobenius_sq(&kept)).max(0.0);
    Ok((outside + oracle_rank_k(&kept, k)?) / n)
}

/// Goals by central differences: entry `j` of layer output `i` is shifted by
/// `+-eps` and the summed loss re-evaluated from layer `i + 1` on.
pub fn fd_goals(net: &Network, x: &Value, y: &Matrix, loss: Loss, eps: f64) -> Result<Vec<Value>, NetError> {
    assert!((1e-7..=1e-3).contains(&eps), "eps must lie in [1e-7, 1e-3]");
    let cache = net.forward_cached(x)?;
    let mut out = Vec::with_capacity(net.layers().len());
    for (i, base) in cache.outputs.iter().enumerate() {
        let mut g = base.zeros_like();
        for j in 0..base.as_slice().len() {
            let mut shifted = base.clone();
            shifted.as_mut_slice()[j] += eps;
            let up = net.loss_sum_from(i + 1, shifted.clone(), y, loss)?;
            shifted.as_mut_slice()[j] -= 2.0 * eps;
            let down = net.loss_sum_from(i + 1, shifted, y, loss)?;
            g.as_mut_slice()[j] = -(up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_targets_cost_nothing() {
        let b = Matrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 1.0, 3.0]);
        let m = Matrix::from_row_slice(3, 2, &[1.0, -2.0, 0.0, 4.0, 2.0, 2.0]);
        let v = &m * &b;
        assert!(oracle_least_squares(&b, &v).unwrap() < 1e-14 * frobenius_sq(&v));
    }

    #[test]
    fn zero_inputs_leave_everything() {
        let v = Matrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(oracle_least_squares(&Matrix::zeros(3, 4), &v).unwrap(), 30.0 / 4.0);
    }

    #[test]
    fn rank_k_tail() {
        let t = Matrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        assert!((oracle_rank_k(&t, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(oracle_rank_k(&t, 2).unwrap() < 1e-24);
        assert!(oracle_rank_k(&t, 5).unwrap() < 1e-24);
    }
}
