//! The guide in `book/` compiled as doctests.
//!
//! mdbook cannot run listings against a workspace crate, so every chapter is
//! pulled in as the documentation of an empty module and `cargo test --doc`
//! runs its code blocks. A failing doctest names the module, which names the
//! chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/latents.md")]
pub mod latents {}
#[doc = include_str!("../../../book/src/generator.md")]
pub mod generator {}
#[doc = include_str!("../../../book/src/masking.md")]
pub mod masking {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
