//! Entity-and-relation aware transformer for grounding referring
//! expressions in 3D scenes, with a synthetic scene generator, a small
//! reverse-mode autodiff engine and a training loop.
//!
//! The guide in `book/` walks through each layer; its code blocks are
//! compiled and run as doctests of this crate.

pub mod attention;
pub mod config;
pub mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
