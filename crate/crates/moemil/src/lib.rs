//! moemil — structure-aware selective state-space modeling for
//! multiple-instance classification of multi-resolution bags.
//!
//! A bag is one slide's worth of patch feature tokens spread over a
//! resolution hierarchy. The model serializes the hierarchy with a
//! region-nested scan, encodes each resolution level with a dedicated
//! static expert, runs a stack of Mamba-style blocks whose second
//! sub-layer is a sparse mixture of experts with learned top-k routing,
//! and aggregates tokens with attention-based MIL pooling.
//!
//! The crate is organized around a reverse-mode gradient tape
//! ([`tensor::Tape`]) that every layer records onto; training is plain
//! Adam over the taped gradients. All numeric kernels are data-parallel
//! via rayon when the `parallel` feature (default) is enabled and fall
//! back to sequential loops otherwise; both paths are bit-identical.

pub mod data;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod heatmap;
pub mod hierarchy;
pub mod model;
pub(crate) mod init;
pub(crate) mod par;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use par::configure_threads_from_env;
