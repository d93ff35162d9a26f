//! Wrapped Gaussian process latent variable models for manifold-valued data,
//! expected pullback metrics on the latent space, and latent geodesics.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod eval;
pub mod geodesics;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod lvm;
pub mod manifolds;
pub mod optim;
pub mod pullback;
pub mod synthetic;

pub use error::{Error, Result};
