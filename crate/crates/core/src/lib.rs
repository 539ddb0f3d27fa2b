//! Trainable post-hoc attention explanations for frozen image classifiers.
//!
//! The crate covers the whole workflow on desk-scale toy models: a
//! procedural shape dataset ([`data`]), two frozen classifiers ([`backbone`]),
//! the attention mechanism that turns their feature maps into per-class
//! explanation maps ([`attention`]), its training loop ([`training`]),
//! gradient-based and perturbation-based reference explainers
//! ([`baselines`]), faithfulness measures ([`evaluation`]) and sanity
//! checks ([`sanity`]).

// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod adapter;
pub mod attention;
pub mod backbone;
pub mod baselines;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explainer;
pub mod io;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sanity;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Book chapters, compiled and run as doc-tests so the guide stays in step
/// with the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/backbones.md")]
    mod backbones {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/sanity.md")]
    mod sanity {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
