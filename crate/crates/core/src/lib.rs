//! Speculative decoding for semantic-ID generative recommendation.
//!
//! A small decoder-only target model generates lists of items, each written
//! as a tuple of semantic-ID codes. A one-layer draft model that knows each
//! token's slot inside its item and its own drafting depth proposes candidate
//! trees, and the target verifies them in one batched call.

pub mod bench;
pub mod block;
pub mod checkpoint;
pub mod datagen;
pub mod draft;
pub mod error;
pub mod kvfile;
pub mod numkit;
pub mod specdec;
pub mod target;
pub mod tokenspace;
pub mod trainer;

pub use error::{Error, Result};
