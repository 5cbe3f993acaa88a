//! Parameter-efficient adaptation of a frozen vision transformer to paired
//! infrared-visible inputs.
//!
//! The backbone is a small pre-norm ViT encoder whose weights stay frozen.
//! Adaptation happens through modality-aware prompter blocks: an entry block
//! fuses visible and infrared patch embeddings in a low-dimensional latent
//! space to seed a prompt stream, and per-layer blocks inject additive
//! token-shaped corrections after the attention and feed-forward stages.
//! Only the infrared patch embedding, the prompter blocks and the linear
//! decode head train.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff
//! engine with a finite-difference verifier, SGD/Adam/AdamW optimizers, a
//! synthetic aligned infrared-visible benchmark where the infrared channel
//! is required to solve the task, and two diagnostics — layer-wise PCA
//! explained-variance ratios and radial frequency-band energy — for
//! inspecting what adaptation does to the feature space.
//!
//! Start with the runnable examples (`cargo run --example <name>`); the
//! `ivtune` binary exposes the same pipeline as `gen-data`, `train` and
//! `analyze` subcommands.

pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod prompter;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
