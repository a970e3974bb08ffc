//! Sparse atom decomposition of vision-transformer patch embeddings for
//! learning assurance.
//!
//! The pipeline: fit a K-SVD dictionary over exported patch embeddings
//! ([`ksvd`]), sparse-code every patch with Matching Pursuit ([`pursuit`]),
//! split atoms into contentful and stylistic by how evenly they fire across
//! visual subsets and measure how much a soft-argmax keypoint head relies on
//! each side ([`atoms`], [`head`]), then train a sign-constrained L1 logistic
//! detector over binary atom supports of attention-pooled image summaries to
//! flag out-of-model-scope inputs ([`ooms`]). [`synth`] plants ground truth
//! for all of the above and [`crop`] implements the BOGO crop samplers.

pub mod atoms;
pub mod crop;
pub mod data;
pub mod error;
pub mod head;
pub mod ksvd;
pub mod numeric;
pub mod ooms;
pub mod pursuit;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
