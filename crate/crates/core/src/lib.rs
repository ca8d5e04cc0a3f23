//! Grow neural networks where their layers cannot follow the loss gradient.
//!
//! - [`numerics`]: SVD, pseudo-inverse, PSD square roots, generalized eigenpairs.
//! - [`net`]: dense and convolutional networks with per-layer goals.
//! - [`bottleneck`]: the best in-layer update, the bottleneck `Psi` and the
//!   optimal new neurons.
//! - [`growth`]: proposals (TINY, GradMax, random), normalization, amplitude
//!   search, schedules and the constructive overfit.
//! - [`harness`]: data, TOML configs, the experiment driver, CSV logs and
//!   checkpoints.
//! - [`verify`]: the invariant and oracle suite.
//!
//! ```
//! use neurogrow::bottleneck::{best_update, bottleneck_value};
//! use neurogrow::numerics::{Matrix, DEFAULT_RCOND};
//!
//! let b = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 1.0, 1.0, 1.0]);
//! let v = Matrix::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
//! let dw = best_update(&b, &v, DEFAULT_RCOND).unwrap();
//! assert_eq!(dw.shape(), (1, 2));
//! // a line through (1, 0), (2, 1), (3, 0) misses by 2/3 in total square
//! assert!((bottleneck_value(&v, &b, DEFAULT_RCOND).unwrap() - 2.0 / 9.0).abs() < 1e-12);
//! ```

pub mod bottleneck;
pub mod growth;
pub mod harness;
pub mod net;
pub mod numerics;
pub mod verify;
