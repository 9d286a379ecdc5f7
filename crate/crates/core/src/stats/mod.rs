//! Trajectory sampling, Birkhoff and iterated sums, covariance estimators
//! and the Monte Carlo limit tests.

pub mod estimators;
pub mod limits;
pub mod sums;
pub mod trajectory;
