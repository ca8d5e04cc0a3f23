//! The guide in `book/` as doc-tests: every Rust listing in a chapter runs
//! under `cargo test`, so the book cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/bottleneck.md")]
pub mod bottleneck {}
#[doc = include_str!("../../../book/src/neurons.md")]
pub mod neurons {}
#[doc = include_str!("../../../book/src/growth.md")]
pub mod growth {}
#[doc = include_str!("../../../book/src/conv.md")]
pub mod conv {}
#[doc = include_str!("../../../book/src/overfit.md")]
pub mod overfit {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}
