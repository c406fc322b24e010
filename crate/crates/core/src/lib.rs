//! Causal attention: in-sample and cross-sample attention realizing the
//! front-door adjustment, with an exact discrete causal oracle and a
//! confounded-data benchmark.
//!
//! Layout:
//! - [`tensor`], [`autodiff`], [`gradcheck`], [`checkpoint`]: dense f64
//!   tensors and a reverse-mode tape.
//! - [`attention`]: multi-head scaled dot-product, IS-ATT, CS-ATT, the CATT
//!   block and the additive scorer.
//! - [`dictionary`]: the global dictionary and its K-means initialization.
//! - [`model`]: the toy encoder/decoder built from CATT blocks.
//! - [`oracle`]: exact enumeration over discrete front-door models.
//! - [`datagen`]: confounded token-sequence tasks.
//! - [`config`], [`commands`]: the command-line harness.
//! - [`par`]: data-parallel helpers (rayon behind the `parallel` feature).

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod datagen;
pub mod dictionary;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod oracle;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
