//! Gradient descent with row-wise hard thresholding (GDT) for estimating
//! matrices that are simultaneously low rank and row/column sparse.
//!
//! The solver works on a factorization `Θ = UVᵀ`: each iteration takes a
//! gradient step on both factors (plus a penalty keeping them balanced) and
//! keeps only the `s₁` / `s₂` rows of largest norm.
//!
//! ```
//! use gdt_core::{gdt, linalg, Mat};
//!
//! let m = Mat::from_rows(&[[3.0, 0.0], [1.0, 1.0], [0.0, 0.1]]).unwrap();
//! let kept = linalg::hard_threshold_rows(&m, 2);
//! assert_eq!(kept.nonzero_rows(), 2);
//! # let _ = gdt::DEFAULT_KAPPA;
//! ```

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod error;
pub mod experiment;
pub mod gdt;
pub mod io;
pub mod linalg;
pub mod matrix;
pub mod mtl;
pub mod mtrl;

pub use error::{GdtError, Result};
pub use gdt::{solve, GdtConfig, Objective, SolveReport};
pub use linalg::{FactorPair, Svd};
pub use matrix::Mat;
pub use mtl::{LassoConfig, MtlObjective};
