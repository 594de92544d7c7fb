//! Knowledge-graph tokenisation for generative next-POI recommendation.
//!
//! The pipeline parses check-ins ([`ingest`]), builds a typed knowledge graph
//! ([`kg`]), encodes it with relational graph convolutions ([`rgcn`]),
//! residual-quantises the encodings into structural ids ([`tokenizer`]),
//! serialises multi-task prompts ([`corpus`]), trains a small decoder-only
//! transformer ([`lm`]) and scores constrained generations ([`eval`]).

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod io;
pub mod kg;
pub mod lm;
pub mod pipeline;
pub mod rgcn;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
