//! Class-imbalance-aware multimodal emotion recognition in conversations.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`augment`]: an emotion-conditioned GAN synthesizes minority-class
//!    utterances before training.
//! 2. [`fusion`]: a joint variational autoencoder fuses text, audio and visual
//!    features into one Gaussian latent.
//! 3. [`context`]: a bidirectional LSTM adds dialogue context.
//! 4. [`graph`]: a relational graph network with attention edge weights and
//!    random node masking propagates speaker-aware context and reconstructs
//!    node features.
//! 5. [`classify`]: focal loss drives training; a SAMME boosting ensemble over
//!    the final embeddings is the deployed classifier.
//!
//! [`harness`] ties the stages into reproducible experiments, ablations and
//! sweeps. Everything is built on the small reverse-mode autodiff in [`tape`].

pub mod augment;
pub mod checkpoint;
pub mod classify;
pub mod context;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod io;
pub mod nn;
pub mod tape;

pub use error::{Error, Result};
