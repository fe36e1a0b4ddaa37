//! Task-prefix multi-task training on a small transformer encoder, with
//! probing of prefix embeddings for task relationships and transfer
//! experiments to check them.
//!
//! The guide in `book/` walks through each module.

pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod probing;
pub mod seed;
pub mod synthetic;
pub mod tokenizer;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/format.md")]
    mod format {}
    #[doc = include_str!("../../../book/src/sequences.md")]
    mod sequences {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/objective.md")]
    mod objective {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/probing.md")]
    mod probing {}
    #[doc = include_str!("../../../book/src/transfer.md")]
    mod transfer {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
