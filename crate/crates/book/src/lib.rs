//! The chapters of the guide in `book/`, included so that `cargo test` runs
//! their code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/getting-started.md")]
pub mod getting_started {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/constraints.md")]
pub mod constraints {}

#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}

#[doc = include_str!("../../../book/src/ensemble.md")]
pub mod ensemble {}

#[doc = include_str!("../../../book/src/nowcast.md")]
pub mod nowcast {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("../../../book/src/outputs.md")]
pub mod outputs {}
