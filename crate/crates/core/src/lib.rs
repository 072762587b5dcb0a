//! Desk-scale laboratory for KV cache eviction in transformer inference.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithm of the
//! laboratory: a small reverse-mode autodiff engine ([`tensor`]), a toy
//! grouped-query-attention decoder with an explicit per-head KV cache
//! ([`model`]), hard-concrete head gates with a Lagrangian sparsity
//! controller ([`gates`]), chunked and post-fill eviction policies
//! ([`eviction`]), lifecycle accounting of KV entries ([`ledger`]),
//! synthetic token streams ([`data`]) and training loops ([`trainer`]).
//!
//! File formats, sweeps and the command line live in the `kvlab` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
mod error;
pub mod eviction;
pub mod gates;
pub mod ledger;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
