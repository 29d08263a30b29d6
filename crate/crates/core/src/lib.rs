//! Cacheable binary token representations for retrieval-augmented readers.
//!
//! Passage tokens are encoded once by the lower layers of a decomposed
//! encoder-decoder reader, binarized to one bit per dimension plus a scale,
//! compressed offline by bipartite Hamming merging and stored in a
//! checksummed single-file store. At query time the reader looks the bits up,
//! restores their scale and finishes the upper encoder and decoder with
//! runtime token merging.

pub mod bench;
pub mod binarizer;
pub mod bitvec;
pub mod checksum;
mod codec;
pub mod compress;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod merge;
pub mod oracle;
pub mod reader;
pub mod selftest;
pub mod store;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
