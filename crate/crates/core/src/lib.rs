//! Auditable FAQ chatbot for election-administration questions.
//!
//! Answers are only ever copied verbatim from a curated corpus; anything the
//! policy forbids is deflected and every turn is written to a hash-chained
//! audit log.

pub mod config;
pub mod corpus;
pub mod dialogue;
pub mod evalharness;
pub mod nlu;
pub mod paraphrase;
pub mod safety;
pub mod service;
