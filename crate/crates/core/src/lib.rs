//! Numerical laboratory for the logarithmic gradient flow ∂u/∂t = (1/n) ln det D²u.
// `!(x > 0.0)` is the NaN-rejecting guard; index loops run over fixed [f64; 3] points.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod config;
pub mod expander;
pub mod experiment;
pub mod flow;
pub mod grid;
pub mod heat;
pub mod legendre;
pub mod linalg;
pub mod mcf;
pub mod snapshot;
