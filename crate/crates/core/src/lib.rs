//! Permutation-invariant neural networks for classifying unordered,
//! variable-size point sets.
//!
//! A network embeds every set element with a shared function, pools the
//! embeddings with an order-independent operator and classifies the pooled
//! vector. The crate implements the per-element (convolutional) family as
//! well as the max-centered equivariant and pairwise-averaging families,
//! with hand-written backward passes checked against finite differences.


pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod numkit;
pub mod optim;
pub mod params;
pub mod setbatch;
pub mod train;
pub mod verify;


pub use error::{Error, Result};
pub use numkit::{Matrix, Rng};
pub use setbatch::{Permutation, SetBatch};
