//! Bayesian last-layer uncertainty for dual-encoder contrastive models.
//!
//! The crate fits Kronecker-factored Laplace posteriors over the image and
//! text projection layers from precomputed encoder features, propagates the
//! resulting Gaussian embeddings through cosine similarity, and turns them
//! into calibrated class probabilities. The [`active`] module drives a
//! simulated active-learning loop on top of those uncertainties.

pub mod active;
pub mod error;
pub mod io;
pub mod laplace;
pub mod linalg;
pub mod metrics;
pub mod probcosine;
pub mod rng;
pub mod sampling;
pub mod synthetic;

pub use error::{Error, Result};
pub use io::{DatasetManifest, EmbeddingMatrix, ModelBundle};
pub use laplace::{KfacPosterior, KroneckerFactors, LossContext, LossKind};
pub use probcosine::{CosineDistribution, GaussianEmbedding, Predictive};
