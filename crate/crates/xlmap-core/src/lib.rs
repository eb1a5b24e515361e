//! Core library for mapping phone posteriorgrams between languages.
//!
//! The centrepiece is [`mesd::MesdModel`], a multi-encoder single-decoder
//! recurrent network: one bidirectional tanh RNN encoder per source language
//! feeding a shared bidirectional decoder and a softmax projection into the
//! target phone token space. Training minimises a per-frame KL divergence
//! against target-language posteriors, combining the per-language losses
//! either uniformly or with rank-sum weights.
//!
//! Everything here is pure computation over `f64` buffers: no files, no
//! threads, no global state. The crate builds without `std` (`alloc` is
//! required); the companion `xlmap` crate carries IO, file formats and the
//! command line front end.
//!
//! Determinism is part of the contract. All randomness flows from a single
//! `u64` seed through ChaCha8, collections with observable iteration order
//! are `BTreeMap`s, and reductions run in a fixed order, so identical seeds
//! reproduce identical parameters bit for bit on any platform.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod corpus;
pub mod decode;
pub mod error;
pub mod evaluation;
mod math;
pub mod mesd;
pub mod numerics;
pub mod training;

pub use error::Error;
