//! Federated LoRA fine-tuning at desk scale.
//!
//! Clients adapt a frozen toy transformer classifier with low-rank adapters on
//! their own non-IID shard, an aggregator averages the reconstructed adapter
//! updates and re-factorizes the mean back to rank `r`, and the evaluation kit
//! reports per-client accuracy with Macro-Acc, Min-Acc and H-mean.
//!
//! Module map:
//!
//! - [`linalg`]: dense matrices, truncated SVD, seeded init
//! - [`lora`]: base model, adapters, forward/backward, AdamW, pretraining
//! - [`data`]: synthetic non-IID task generation and sharding
//! - [`aggregation`]: weighted adapter averaging with SVD re-factorization
//! - [`identity`]: Ed25519 update signing, key registry, hash-chained reward ledger
//! - [`proto`]: wire format, transports, aggregator and client loops
//! - [`evalkit`]: accuracy, fairness metrics, comparison tables, PCA, round logs
//! - [`experiment`]: end-to-end experiment runner writing a report bundle

pub mod aggregation;
pub mod config;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod identity;
pub mod linalg;
pub mod lora;
pub mod proto;

pub use config::FedConfig;
pub use error::{FedError, Result};
pub use linalg::Matrix;

/// Derives an independent 64-bit stream seed from a base seed and a tag
/// (SplitMix64 finalizer over the combined value).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chains [`derive_seed`] over several tags.
pub fn derive_seed_path(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base, |s, &t| derive_seed(s, t))
}
