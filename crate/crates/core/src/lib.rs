//! Dynamic prompt coreset for continual test-time adaptation.
//!
//! A frozen feature extractor is steered by a small learnable prompt. Each
//! incoming batch either refines a weighted mix of stored prompts or, when
//! it looks like a new domain, gets a prompt of its own learned from
//! scratch. Everything runs on a synthetic testbed so the behaviour can be
//! checked end to end without a vision backbone.

pub mod adapt;
pub mod coreset;
pub mod error;
pub mod extractor;
pub mod gradcheck;
pub mod seed;
pub mod simplified;
pub mod stats;
pub mod streams;
pub mod testbed;

pub use coreset::{CoresetConfig, OverflowPolicy, PromptCoreset};
pub use error::{Error, Result};
pub use extractor::{ExtractorKind, ExtractorSpec, InputBatch, Prompt};
pub use stats::{compute_stats, stats_distance, DomainStats, FeatureBatch};
