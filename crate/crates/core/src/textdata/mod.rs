//! Bangla tokenization, vocabularies, dataset ingestion and the toy generator.

mod dataset;
mod tokenize;
pub mod toy;
mod vocab;

pub use dataset::*;
pub use tokenize::{is_separator, tokenize, tokenize_bytes};
pub use vocab::*;
