//! Nearest-point retractions onto submanifolds of R^n, C^1-closeness
//! certificates and retraction-based trivialization of deformations.

// `!(a < b)` is used deliberately so that NaN counts as a failed check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod deformation;
pub mod equivalence;
pub mod error;
pub mod expr;
pub mod field;
pub mod linalg;
pub mod manifold;
pub mod retraction;
pub mod rng;
pub mod shapes;
pub mod solver;
pub mod subspace;

pub use error::{Error, Result};
pub use manifold::{BoundingBox, Manifold, Patch, Representation, Smoothness, TangentFrame};
