//! Runnable companion to the guide under `book/`.
//!
//! Each chapter of the guide is included here verbatim, so every Rust code
//! block in the book compiles and runs as a doc-test of this crate. A book
//! edit that breaks an example fails `cargo test --workspace` instead of
//! silently rotting on the rendered page.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/assumptions.md")]
pub mod assumptions {}

#[doc = include_str!("../../../book/src/configuration.md")]
pub mod configuration {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
