//! Data ingestion and persistence: SNLI-format files, tokenization,
//! vocabularies, pretrained embeddings, padded batches, the synthetic toy
//! task, and checkpoints.

mod batch;
pub mod checkpoint;
mod embeddings;
mod snli;
mod tokenize;
mod toy;
mod vocab;

pub use batch::{make_batches, sequential_batches, NliBatch, PaddedIds};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use embeddings::{load_embeddings, EmbeddingReport, EmbeddingTable};
pub use snli::{parse_snli, parse_snli_reader, write_snli, SnliData};
pub use tokenize::{tokenize, PAD_TOKEN, UNK_TOKEN};
pub use toy::{gen_toy_nli, is_distractor, is_subsequence, toy_tokens, CONTENT_TOKENS, DISTRACTOR_TOKENS};
pub use vocab::{Vocab, PAD_ID, UNK_ID};

use crate::head::NliLabel;

/// A tokenized premise/hypothesis pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextPair {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: NliLabel,
}

/// A premise/hypothesis pair as vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NliExample {
    pub premise: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub label: NliLabel,
}
