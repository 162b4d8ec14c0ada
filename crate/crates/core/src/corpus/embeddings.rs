use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocab, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::NumArray;

/// Range of the uniform initialiser for rows without a pretrained vector.
pub const RANDOM_INIT_BOUND: f64 = 0.1;

/// Word vectors indexed by vocabulary id. Row 0 (padding) is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table: NumArray,
    /// `true` where the row came from a pretrained file.
    pub pretrained: Vec<bool>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingReport {
    /// Real vocabulary tokens that received a pretrained vector.
    pub pretrained: usize,
    /// Real vocabulary tokens (reserved ids excluded).
    pub vocab_tokens: usize,
    /// File lines that repeated an earlier token; the last one wins.
    pub duplicates: usize,
}

impl EmbeddingTable {
    /// Every row drawn from `U(−0.1, 0.1)` in id order, padding zeroed.
    pub fn random(vocab_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(vocab_len * dim);
        for _ in 0..vocab_len * dim {
            data.push(rng.gen_range(-RANDOM_INIT_BOUND..RANDOM_INIT_BOUND));
        }
        let pad = dim.min(data.len());
        data[..pad].iter_mut().for_each(|x| *x = 0.0);
        Self {
            table: NumArray::matrix(vocab_len, dim, data).expect("length matches"),
            pretrained: vec![false; vocab_len],
            trainable: false,
        }
    }

    pub fn vocab_len(&self) -> usize {
        self.table.rows()
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn with_trainable(mut self, trainable: bool) -> Self {
        self.trainable = trainable;
        self
    }

    /// Zeroes the padding row.
    pub(crate) fn clear_padding(&mut self) {
        let d = self.dim();
        self.table.data_mut()[PAD_ID * d..(PAD_ID + 1) * d].iter_mut().for_each(|x| *x = 0.0);
    }
}

/// Reads `token v1 … ve` lines. Vocabulary tokens missing from the file keep
/// their seeded random row.
pub fn load_embeddings(path: &Path, vocab: &Vocab, dim: usize, seed: u64) -> Result<(EmbeddingTable, EmbeddingReport)> {
    let mut table = EmbeddingTable::random(vocab.len(), dim, seed);
    let mut duplicates = 0;
    let mut seen = std::collections::HashSet::new();
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                path: PathBuf::from(path),
                line: i + 1,
                msg: format!("expected {dim} values for `{token}`, found {}", values.len()),
            });
        }
        if !seen.insert(token.to_string()) {
            duplicates += 1;
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        let row = &mut table.table.data_mut()[id * dim..(id + 1) * dim];
        for (slot, v) in row.iter_mut().zip(values) {
            *slot = v.parse::<f64>().map_err(|e| Error::Parse {
                path: PathBuf::from(path),
                line: i + 1,
                msg: format!("bad value `{v}`: {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    path: PathBuf::from(path),
                    line: i + 1,
                    msg: format!("non-finite value `{v}`"),
                });
            }
        }
        table.pretrained[id] = true;
    }
    table.clear_padding();
    let report = EmbeddingReport {
        pretrained: table.pretrained.iter().filter(|&&p| p).count(),
        vocab_tokens: vocab.len().saturating_sub(2),
        duplicates,
    };
    Ok((table, report))
}
