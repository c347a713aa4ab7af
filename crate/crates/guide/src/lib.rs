//! The book in `book/src`, one module per chapter, so that `cargo test`
//! runs every listing as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/network.md")]
pub mod network {}
#[doc = include_str!("../../../book/src/filtration.md")]
pub mod filtration {}
#[doc = include_str!("../../../book/src/adaptation.md")]
pub mod adaptation {}
#[doc = include_str!("../../../book/src/protocol.md")]
pub mod protocol {}
#[doc = include_str!("../../../book/src/edge-and-cloud.md")]
pub mod edge_and_cloud {}
#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
