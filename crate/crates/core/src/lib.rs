//! Numerical laboratory for quenched limit theorems of random dynamical systems.
//!
//! A random dynamical system here is a stationary symbol process (the base,
//! [`base_env`]) selecting at every time step one full-branch expanding map of
//! the unit interval ([`fiber_maps`]). Transfer operators of those maps are
//! discretised by the Ulam method ([`transfer`]), which gives equivariant
//! densities, operator cocycles and correlation decay along a frozen base
//! path. On top of that sit the martingale-coboundary decomposition
//! ([`decomp`]), the Birkhoff / iterated-sum statistics and their Monte Carlo
//! tests ([`stats`]), and a fast-slow homogenization experiment
//! ([`fast_slow`]).

// NaN-rejecting comparisons and index loops over small matrices are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod base_env;
pub mod decomp;
pub mod error;
pub mod fast_slow;
pub mod fiber_maps;
pub mod numerics;
pub mod observable;
pub mod seed;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};
