//! Permutation-invariant pooling of variable-size embedding bags.
//!
//! The crate fuses a bag of `N` instance embeddings (for example the vision
//! encoder outputs of every image of one product) into a single embedding
//! with one of four operators: average, max, attention, or gated attention.
//! Every operator has an exact backward pass, so the pooling layer can be
//! trained together with whatever consumes the fused embedding.
//!
//! Around the operators sit the pieces needed to run small experiments:
//! single-image and concatenation baselines, a linear-head classifier with
//! SGD/Adam training, binary dataset and checkpoint formats, a synthetic
//! multiple-instance task generator, metrics, and attention exports.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod gradcheck;
pub mod model;
pub mod numkern;
pub mod par;
pub mod pooling;

pub use error::{LoadError, MivcError, Result};
pub use numkern::{Matrix, Rng, Vector};
pub use pooling::{
    attention_scores, pool, pool_attention, pool_avg, pool_backward, pool_max, Bag,
    InstanceEmbedding, PoolGradients, PooledOutput, PoolingKind, PoolingParams,
};
pub use model::{Model, Strategy, TrainConfig};
