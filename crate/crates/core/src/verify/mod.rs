//! Correctness machinery: gradient checking, brute-force oracles and
//! analytic cost accounting.

pub mod cost;
pub mod gradcheck;
pub mod oracle;
pub mod suites;

pub use cost::{count_arch, count_preset, CostReport, CostRow, Preset};
pub use gradcheck::{gradcheck, probe, Differentiable, FnPair, GradReport, TensorCheck};
pub use oracle::{oracle_compare, OracleReport};
