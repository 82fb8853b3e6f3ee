//! Sector-level disaggregation of aggregate electricity load.
//!
//! Daily load curves are factored as `X ≈ C S`: the rows of `S` are
//! normalized daily profiles of latent sources, the rows of `C` give each
//! day's source concentrations. Monthly sector consumption enters as a soft
//! linear constraint, which makes the factorization interpretable and lets
//! sector consumption be estimated ahead of official statistics.

pub mod calendar;
pub mod constraints;
pub mod curves;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod nnls;
pub mod nowcast;
pub mod pipeline;
pub mod rank;
pub mod report;
pub mod solver;
pub mod stats;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
