//! Product-quantized visual tokenization with next-block prediction.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndiff`]: reverse-mode differentiation core with stop-gradient and a
//!   finite-difference oracle.
//! - [`codebook`]: k-means initialization, sub-codebook partition, frozen
//!   centers with learnable per-subspace projections, `CBK1` files.
//! - [`pq`]: subspace projection, nearest-entry quantization, straight-through
//!   training path, VQ loss, sum-pool fusion, unified embedding table.
//! - [`quantalt`]: finite scalar and residual quantizers behind the same
//!   patch-quantizer contract.
//! - [`nbp`]: block construction, packing, block encoding and block loss.
//! - [`toymodel`]: tiny causal backbone plus block decoder, joint training and
//!   generation.
//! - [`synth`]: synthetic corpora, `EMB1` dumps and brute-force references.
//! - [`ablate`]: run configurations and the ablation sweep harness.

pub mod ablate;
mod binio;
pub mod codebook;
pub mod error;
pub mod nbp;
pub mod ndiff;
pub mod pq;
pub mod quantalt;
pub mod synth;
pub mod toymodel;

pub use error::{Error, Result};
