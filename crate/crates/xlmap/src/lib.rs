//! File formats, corpus pipelines and the command line around the mapping
//! model in `xlmap-core`.
//!
//! The core crate owns the numerical work: the multi-encoder single-decoder
//! network, its training loop, decoding and metrics. This crate owns
//! everything that touches a filesystem: binary posterior and feature files
//! (`.xlpo` / `.xlft`), model checkpoints (`.xlck`), JSON-lines manifests and
//! reports, the synthetic demo corpus with its toy acoustic models, and the
//! `xlmap` binary gluing those into an experiment loop.
//!
//! All on-disk products are deterministic functions of their inputs and the
//! seed, byte for byte. Parallelism (`--jobs`) only distributes independent
//! per-utterance work and never changes what gets written.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod synth;
pub mod xlpo;

pub use error::Error;
