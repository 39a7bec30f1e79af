//! Search-space shrinkage for one-shot architecture search.
//!
//! A path filter learned from confidently-weak paths (positive-unlabeled
//! learning) rejects weak architectures during sampling and search, and its
//! operation embeddings drive merging of redundant candidates. A tabular
//! benchmark with a noisy evaluation view stands in for the supernet.

pub mod cli;
pub mod confidence;
pub mod config;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod oracle;
pub mod pu;
pub mod search;
pub mod shrinkage;
pub mod space;

pub use error::{Error, Result};
pub use space::{Architecture, OpDesc, SearchSpace};
