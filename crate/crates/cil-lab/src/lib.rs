//! Desk-scale class-incremental learning laboratory.
//!
//! The crate trains small MLP classifiers phase by phase, regularizes the
//! initial phase with class-wise decorrelation or oracle mimicking, keeps
//! per-class exemplar memories selected by herding, and analyzes
//! representation geometry through covariance eigen-spectra. Everything is
//! `f64`, everything is seeded, and every reported number is bit-reproducible
//! per platform.
//!
//! Start with [`engine::run_protocol`] for the full incremental loop, or the
//! guide in `book/` for a concept-by-concept walkthrough; its code blocks
//! run as doctests of this crate.

pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod mat;
pub mod memory;
pub mod model;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
pub use mat::Mat;

// The book's code blocks are compiled and run by `cargo test --doc`, which
// keeps the guide in sync with the library.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/decorrelation.md")]
    mod decorrelation {}
    #[doc = include_str!("../../../book/src/spectra.md")]
    mod spectra {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
