//! Set-of-patch-embeddings to single-vector slide representations.
//!
//! A whole-slide image arrives as a bag of patch embeddings (an N×D matrix).
//! This crate turns such bags into one vector per slide with several
//! aggregation families — static pooling, Deep Sets, memory networks, focal
//! attention, GMM Fisher vectors, and VAE-gradient Fisher vectors (sparse or
//! binary) — and evaluates them under a stratified 5-fold k-NN retrieval
//! protocol. The non-aggregating median-of-minimums set distance is included
//! as a baseline.
//!
//! The crate is `no_std`-compatible (requires `alloc`); file formats, the
//! CLI, and wall-clock benchmarking live in the companion `slideagg` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod dataset;
pub mod embedding;
pub mod fd;
pub mod gmm;
pub mod graph;
pub mod mathx;
pub mod method;
pub mod nn;
pub mod poolers;
pub mod retrieval;
pub mod set_distance;
pub mod sweep;
pub mod tensor;
pub mod vae;

pub use dataset::{FoldPlan, PatchSet, SyntheticDataset, SyntheticSpec, NUM_FOLDS};
pub use embedding::{BinaryEmbedding, BitMatrix, SlideEmbedding};
pub use graph::{Graph, NodeId};
pub use method::{AggregatorModel, Method, MethodParams, PoolKind, TrainConfig};
pub use retrieval::{FoldMetrics, NeighborQuery, RetrievalMetric, RetrievalReport};
pub use tensor::Tensor;
