//! Expert-augmented soft-label contrastive fine-tuning at desk scale.
//!
//! The pipeline builds labeled query/passage pairs from grouped questions
//! ([`pairgen`]), scores each pair with a panel of expert embedding models and
//! derives soft targets ([`experts`]), trains a linear adapter over frozen
//! base embeddings against hard or soft targets ([`adapter`]), and evaluates
//! retrieval quality and similarity distributions ([`evalkit`]).
//! [`synth`] generates self-contained synthetic worlds and [`pipeline`]
//! runs every stage end to end.

pub mod adapter;
pub mod corpus;
pub mod evalkit;
pub mod experts;
pub mod pairgen;
pub mod pipeline;
pub mod seed;
pub mod synth;
