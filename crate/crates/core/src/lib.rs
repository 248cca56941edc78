//! Few-shot named entity recognition with prompt-based span detection and
//! span classification.

pub mod autograd;
pub mod classifier;
pub mod config;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod harness;
pub mod inference;
pub mod prompt;
pub mod selftest;
pub mod span_detector;
pub mod synthetic;
pub mod tensor;
pub mod tensorfile;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../README.md")]
    pub mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    pub mod episodes {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    pub mod prompts {}
    #[doc = include_str!("../../../book/src/span-detection.md")]
    pub mod span_detection {}
    #[doc = include_str!("../../../book/src/classification.md")]
    pub mod classification {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    pub mod configuration {}
}
