//! Receptor-conditioned denoising diffusion over fixed-length peptide
//! embedding matrices.
//!
//! The crate is organized bottom-up:
//!
//! - [`schedule`]: cosine noise schedule and learning-rate warmup.
//! - [`autodiff`]: small reverse-mode engine used by the denoiser.
//! - [`denoiser`]: the attention network that predicts the added noise.
//! - [`diffusion`]: forward noising, reverse steps and the sampling loop.
//! - [`trainer`]: losses, feature normalization, Adam and the training loop.
//! - [`codec`]: pluggable sequence/embedding codecs and the embedding container.
//! - [`explore`]: latent perturbation with σ escalation and artifact filters.
//! - [`metrics`]: alignment, superposition and embedding diversity metrics.
//! - [`dataio`]: record ingestion, cluster-level splits, FASTA and RCSB fetch.

pub mod autodiff;
pub mod codec;
pub mod dataio;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod explore;
pub mod metrics;
pub mod schedule;
pub mod seed;
pub mod sequence;
pub mod trainer;

pub use embedding::EmbeddingMatrix;
pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use sequence::PeptideSequence;
