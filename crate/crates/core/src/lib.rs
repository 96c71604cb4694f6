//! Sparsely-connected neural networks whose connection masks come from
//! linear-feedback shift registers.
//!
//! A mask column is the output of a comparator fed by an LFSR, so a whole
//! mask is reproducible from a handful of seeds. That lets a trained layer
//! be stored as kept weights only ([`store`]) and lets a hardware neuron skip
//! weight reads without storing any indexes ([`hwsim`]).
//!
//! ```
//! use spnn::lfsr::{LfsrConfig, LfsrMode};
//! use spnn::mask::{generate_mask, SngConfig};
//!
//! let lfsr = LfsrConfig::standard(10, 1, LfsrMode::DeBruijn)?;
//! let sng = SngConfig::from_sparsity(lfsr, 0.75)?;
//! let mask = generate_mask(1024, 4, &sng, 1)?;
//! assert_eq!(mask.column_popcount(0)?, 256);
//! # Ok::<(), spnn::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hwsim;
pub mod layers;
pub mod lfsr;
pub mod mask;
pub mod quantize;
pub mod store;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Matrix, Scalar};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/lfsr-masks.md")]
    mod lfsr_masks {}
    #[doc = include_str!("../../../book/src/sparse-layers.md")]
    mod sparse_layers {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/datapath.md")]
    mod datapath {}
}
