//! Multimodal retrieval-augmented generation pipeline.
//!
//! Query rewriting, dual-pathway text/image embedding, offline+online
//! retrieval with attention fusion, the rearrange/initial/rethink/final
//! generation cycle with citation tracking, reward scoring with a
//! policy-gradient estimator, and a text-generation evaluation harness.
//!
//! Every neural model sits behind a provider contract (rewriter, embedder,
//! generator, judge, web search); deterministic reference implementations
//! ship in-crate, so the whole pipeline runs and tests without a model.

pub mod config;
pub mod domain;
pub mod encode;
pub mod fusion;
pub mod hash;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod retrieve;
pub mod rewrite;
pub mod rng;
pub mod rtra;
pub mod store;
pub mod websearch;

pub use config::{ConfigError, PipelineConfig};
pub use domain::{
    validate_bundle, Embedding, ImageRef, Modality, Query, RagBundle, RetrievedEntry, Source,
};
pub use pipeline::{run_session, PipelineError, ProviderSet, QueryInput, SessionOutput};
pub use store::{IndexRecord, RecordPayload, VectorIndex};
