//! Graph-attention transformer embeddings for DNS query sequences.
//!
//! The pipeline runs raw traffic through [`ingest`] (pcap or JSONL, host
//! filtering, request cleaning), packs each host's stream into sequences with
//! [`sequencer`], tokenizes with [`vocab`], and trains the masked-GAT encoder in
//! [`model`] using the autodiff engine in [`tensor`]. [`baselines`] holds the
//! Word2Vec comparison models, [`evalx`] the metrics and embedding analyses, and
//! [`synth`] a seeded traffic generator with planted structure.

pub mod baselines;
pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod evalx;
pub mod ingest;
pub mod model;
pub mod sequencer;
pub mod synth;
pub mod tensor;
pub mod topology;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
