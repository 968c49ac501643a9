//! Corpus ingestion, vocabulary and MLM+NSP batch generation.
//!
//! Corpus format: UTF-8 text, one sentence per line, documents separated by
//! blank lines.

mod batch;
mod instances;
pub mod synthetic;
mod vocab;

pub use batch::{apply_mlm_mask, random_batch, Batch, BatchStream, MaskStats};
pub use instances::{make_instances, Instance, InstanceGenerator};
pub use vocab::{build_vocab, parse_corpus, tokenize, Vocab};

use crate::error::Result;
use crate::rng::{self, Stream};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Label for positions that carry no MLM target.
pub const IGNORE_INDEX: i64 = -1;

/// Fraction of maskable positions selected for MLM.
pub const MLM_RATE: f64 = 0.15;

/// Vocabulary and a fixed pool of `pool_size` NSP instances drawn from
/// corpus `text`.
pub fn training_pool(
    text: &str,
    vocab_cap: usize,
    seq_len: usize,
    pool_size: usize,
    seed: u64,
) -> Result<(Vocab, Vec<Instance>)> {
    let vocab = build_vocab(text, vocab_cap)?;
    let docs = parse_corpus(text);
    let pool = make_instances(&docs, &vocab, seq_len, rng::rng(seed, Stream::Instances))?
        .take(pool_size)
        .collect();
    Ok((vocab, pool))
}
