//! Rescaling of proposed neurons before the amplitude search.
//!
//! Norms are mean squares over the new neurons: `||M||_F^2 / k`.

use crate::bottleneck::Neurons;
use crate::numerics::frobenius_sq;

use super::{GrowthError, GrowthProposal, Result};

/// Target mean square for the small-scale modes.
pub const TARGET_MEAN_SQUARE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationMode {
    /// `alpha` and `omega` each rescaled to mean square `1e-3`.
    #[default]
    TinySqrt,
    /// `omega` rescaled to mean square `1e-6`, `alpha` zeroed.
    GradMaxLinear,
    /// `omega` rescaled to mean square `1e-3`.
    GradMaxSqrt,
    /// Unit mean square; the amplitude search picks the scale.
    UnitThenGamma,
    /// Natural scale from the bottleneck solution.
    Unscaled,
}

impl NormalizationMode {
    pub fn name(&self) -> &'static str {
        match self {
            NormalizationMode::TinySqrt => "tiny_sqrt",
            NormalizationMode::GradMaxLinear => "gradmax_linear",
            NormalizationMode::GradMaxSqrt => "gradmax_sqrt",
            NormalizationMode::UnitThenGamma => "unit_then_gamma",
            NormalizationMode::Unscaled => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tiny_sqrt" => Some(NormalizationMode::TinySqrt),
            "gradmax_linear" => Some(NormalizationMode::GradMaxLinear),
            "gradmax_sqrt" => Some(NormalizationMode::GradMaxSqrt),
            "unit_then_gamma" => Some(NormalizationMode::UnitThenGamma),
            "none" | "unscaled" => Some(NormalizationMode::Unscaled),
            _ => None,
        }
    }
}

fn mean_square(m: &crate::numerics::Matrix, k: usize) -> f64 {
    frobenius_sq(m) / k as f64
}

/// Factor taking mean square `ms` to `target`.
fn factor(ms: f64, target: f64, what: &str) -> Result<f64> {
    if ms > 0.0 && ms.is_finite() {
        Ok((target / ms).sqrt())
    } else {
        Err(GrowthError::Domain(format!("cannot rescale {what} with mean square {ms}")))
    }
}

pub fn normalize_neurons(n: &Neurons, mode: NormalizationMode) -> Result<Neurons> {
    let k = n.len();
    if k == 0 {
        return Ok(n.clone());
    }
    let (fa, fw) = match mode {
        NormalizationMode::TinySqrt => (
            factor(mean_square(&n.alpha, k), TARGET_MEAN_SQUARE, "alpha")?,
            factor(mean_square(&n.omega, k), TARGET_MEAN_SQUARE, "omega")?,
        ),
        NormalizationMode::GradMaxLinear => (0.0, factor(mean_square(&n.omega, k), TARGET_MEAN_SQUARE * TARGET_MEAN_SQUARE, "omega")?),
        NormalizationMode::GradMaxSqrt => (1.0, factor(mean_square(&n.omega, k), TARGET_MEAN_SQUARE, "omega")?),
        NormalizationMode::UnitThenGamma => (factor(mean_square(&n.alpha, k), 1.0, "alpha")?, factor(mean_square(&n.omega, k), 1.0, "omega")?),
        NormalizationMode::Unscaled => (1.0, 1.0),
    };
    Ok(Neurons { alpha: &n.alpha * fa, omega: &n.omega * fw, lambdas: n.lambdas.clone() })
}

pub fn normalize_proposal(p: &GrowthProposal, mode: NormalizationMode) -> Result<GrowthProposal> {
    Ok(GrowthProposal { neurons: normalize_neurons(&p.neurons, mode)?, ..p.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use proptest::prelude::*;

    fn neurons(a: Vec<f64>, w: Vec<f64>, k: usize) -> Neurons {
        let ra = a.len() / k;
        let rw = w.len() / k;
        Neurons { alpha: Matrix::from_vec(ra, k, a), omega: Matrix::from_vec(rw, k, w), lambdas: vec![1.0; k] }
    }

    #[test]
    fn tiny_sqrt_example() {
        let n = neurons(vec![3.0, 4.0], vec![1.0, 0.0], 1);
        let out = normalize_neurons(&n, NormalizationMode::TinySqrt).unwrap();
        assert!((frobenius_sq(&out.alpha) - 1e-3).abs() < 1e-15);
        assert!((frobenius_sq(&out.omega) - 1e-3).abs() < 1e-15);
        assert!((out.alpha[(1, 0)] / out.alpha[(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn formula_examples() {
        let n = neurons(vec![1.0, 3.0], vec![2.0], 1);
        let out = normalize_neurons(&n, NormalizationMode::TinySqrt).unwrap();
        assert!((out.alpha[(0, 0)] - 1e-2).abs() < 1e-15);
        let twice = normalize_neurons(&out, NormalizationMode::TinySqrt).unwrap();
        assert!((frobenius_sq(&twice.alpha) - 1e-3).abs() < 1e-16);
        let w = neurons(vec![0.0], vec![0.6, 0.8], 1);
        let out = normalize_neurons(&w, NormalizationMode::GradMaxLinear).unwrap();
        assert!((out.omega[(1, 0)] - 0.8e-3).abs() < 1e-16);
    }

    #[test]
    fn zero_norm_is_a_domain_error() {
        let n = neurons(vec![0.0, 0.0], vec![1.0], 1);
        assert!(normalize_neurons(&n, NormalizationMode::TinySqrt).is_err());
        assert!(normalize_neurons(&n, NormalizationMode::GradMaxSqrt).is_ok());
    }

    #[test]
    fn gradmax_linear_zeroes_fan_in() {
        let n = neurons(vec![1.0, 2.0], vec![2.0, 0.0], 1);
        let out = normalize_neurons(&n, NormalizationMode::GradMaxLinear).unwrap();
        assert!(out.alpha.iter().all(|&a| a == 0.0));
        assert!((frobenius_sq(&out.omega).sqrt() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn empty_passes_through() {
        let n = Neurons::empty(3, 2);
        for mode in [NormalizationMode::TinySqrt, NormalizationMode::UnitThenGamma] {
            assert_eq!(normalize_neurons(&n, mode).unwrap(), n);
        }
    }

    proptest! {
        #[test]
        fn directions_preserved(a in proptest::collection::vec(-5.0f64..5.0, 6), w in proptest::collection::vec(-5.0f64..5.0, 4)) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && w.iter().any(|x| x.abs() > 1e-3));
            let n = neurons(a, w, 2);
            for mode in [NormalizationMode::TinySqrt, NormalizationMode::UnitThenGamma, NormalizationMode::GradMaxSqrt] {
                let out = normalize_neurons(&n, mode).unwrap();
                let ca = out.alpha.dot(&n.alpha) / (out.alpha.norm() * n.alpha.norm());
                let cw = out.omega.dot(&n.omega) / (out.omega.norm() * n.omega.norm());
                prop_assert!((ca - 1.0).abs() < 1e-12 && (cw - 1.0).abs() < 1e-12);
            }
        }
    }
}
