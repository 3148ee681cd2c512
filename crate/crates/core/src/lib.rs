pub mod cv;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod penalty;
pub mod process;
pub mod simulate;
pub mod solver;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/estimator.md")]
    mod estimator {}
    #[doc = include_str!("../../../book/src/penalties.md")]
    mod penalties {}
    #[doc = include_str!("../../../book/src/cross_validation.md")]
    mod cross_validation {}
    #[doc = include_str!("../../../book/src/monte_carlo.md")]
    mod monte_carlo {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
}
