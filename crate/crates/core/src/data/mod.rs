//! Byte-level tokenization, corpus ingestion and batch sampling.

mod corpus;
mod sampler;
pub mod synthetic;
mod tokenizer;

pub use corpus::{load_corpus, parse_corpus, read_lines, Corpus, Split};
pub use sampler::sample_batch;
pub use tokenizer::{detokenize, tokenize, Origin, TokenSeq, BOS, BYTE_VOCAB, EOS};
