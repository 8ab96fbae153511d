// NaN inputs must fail validation, so `!(x >= lo)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod evolution;
pub mod gamma;
pub mod inverse;
pub mod mittag_leffler;
pub mod output;
pub mod quad;
pub mod spectral;
pub mod stability;
pub mod tridiag;
