use crate::numerics::Matrix;

use super::value::Value;
use super::NetError;

const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Activation families. Every hidden family satisfies `sigma(0) = 0`.
///
/// Derivatives at the kink of `Relu` and `Selu` use the right-hand branch, so
/// `derivative_at_zero` agrees with what backpropagation sees for a neuron
/// whose pre-activation is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Selu,
    Relu,
    Tanh,
    Identity,
    /// Column-wise softmax; only allowed as the final layer.
    Softmax,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Selu => "selu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
            Activation::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "selu" => Activation::Selu,
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "identity" | "linear" => Activation::Identity,
            "softmax" => Activation::Softmax,
            _ => return None,
        })
    }

    pub fn code(&self) -> u32 {
        match self {
            Activation::Selu => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Identity => 3,
            Activation::Softmax => 4,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Some(match c {
            0 => Activation::Selu,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Identity,
            4 => Activation::Softmax,
            _ => return None,
        })
    }

    pub fn is_elementwise(&self) -> bool {
        !matches!(self, Activation::Softmax)
    }

    /// Scalar map; panics for softmax, which is not elementwise.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x > 0.0 {
                    SELU_SCALE * x
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
            Activation::Softmax => panic!("softmax is not elementwise"),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Selu => {
                if x >= 0.0 {
                    SELU_SCALE
                } else {
                    SELU_SCALE * SELU_ALPHA * x.exp()
                }
            }
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
            Activation::Softmax => panic!("softmax is not elementwise"),
        }
    }

    /// The factor `sigma'(0)` of the first-order gain.
    pub fn derivative_at_zero(&self) -> f64 {
        match self {
            Activation::Softmax => f64::NAN,
            other => other.derivative(0.0),
        }
    }

    pub fn forward(&self, a: &Value) -> Result<Value, NetError> {
        match self {
            Activation::Softmax => Ok(Value::Flat(softmax_columns(a.as_flat()?))),
            f => Ok(a.map(|x| f.eval(x))),
        }
    }

    /// Chain rule: gradient w.r.t. the input given the gradient w.r.t. the
    /// output `g`. For softmax `out` must be the forward output.
    pub fn backward(&self, input: &Value, out: &Value, g: &Value) -> Result<Value, NetError> {
        match self {
            Activation::Softmax => {
                let p = out.as_flat()?;
                let g = g.as_flat()?;
                let mut r = Matrix::zeros(p.nrows(), p.ncols());
                for j in 0..p.ncols() {
                    let s: f64 = (0..p.nrows()).map(|i| p[(i, j)] * g[(i, j)]).sum();
                    for i in 0..p.nrows() {
                        r[(i, j)] = p[(i, j)] * (g[(i, j)] - s);
                    }
                }
                Ok(Value::Flat(r))
            }
            f => {
                let mut r = g.clone();
                for (o, x) in r.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *o *= f.derivative(*x);
                }
                Ok(r)
            }
        }
    }
}

pub fn softmax_columns(z: &Matrix) -> Matrix {
    let mut p = z.clone();
    for mut col in p.column_iter_mut() {
        let m = col.max();
        col.iter_mut().for_each(|v| *v = (*v - m).exp());
        let s = col.sum();
        col /= s;
    }
    p
}

/// `log(sum(exp(z)))` per column, computed stably.
pub fn log_sum_exp_columns(z: &Matrix) -> Vec<f64> {
    z.column_iter()
        .map(|col| {
            let m = col.max();
            m + col.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hidden_families_vanish_at_zero() {
        for f in [Activation::Selu, Activation::Relu, Activation::Tanh, Activation::Identity] {
            assert_eq!(f.eval(0.0), 0.0, "{}", f.name());
        }
    }

    #[test]
    fn derivative_matches_central_difference_away_from_kinks() {
        for f in [Activation::Selu, Activation::Relu, Activation::Tanh, Activation::Identity] {
            for &x in &[-2.0, -0.3, 0.4, 1.7] {
                let h = 1e-6;
                let fd = (f.eval(x + h) - f.eval(x - h)) / (2.0 * h);
                assert!((fd - f.derivative(x)).abs() < 1e-7, "{} at {x}", f.name());
            }
        }
    }

    #[test]
    fn codes_round_trip() {
        for c in 0..5 {
            assert_eq!(Activation::from_code(c).unwrap().code(), c);
        }
        assert!(Activation::from_code(9).is_none());
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let z = Matrix::from_row_slice(3, 2, &[1.0, 700.0, 2.0, 0.0, 3.0, -700.0]);
        let p = softmax_columns(&z);
        for col in p.column_iter() {
            assert!((col.sum() - 1.0).abs() < 1e-15);
        }
        let lse = log_sum_exp_columns(&z);
        assert!((lse[1] - 700.0).abs() < 1e-12);
    }
}
