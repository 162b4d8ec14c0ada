use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::PAD_ID;
use super::NliExample;
use crate::error::{Error, Result};
use crate::head::NliLabel;

/// Id sequences right-padded to a common width, with a mask marking real
/// tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub rows: usize,
    pub width: usize,
}

impl PaddedIds {
    pub fn from_sequences(seqs: &[&[usize]]) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut mask = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(true, s.len()));
            ids.extend(std::iter::repeat_n(PAD_ID, width - s.len()));
            mask.extend(std::iter::repeat_n(false, width - s.len()));
        }
        Self {
            ids,
            mask,
            rows: seqs.len(),
            width,
        }
    }

    pub fn row(&self, i: usize) -> (&[usize], &[bool]) {
        let r = i * self.width..(i + 1) * self.width;
        (&self.ids[r.clone()], &self.mask[r])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NliBatch {
    pub premise: PaddedIds,
    pub hypothesis: PaddedIds,
    pub labels: Vec<NliLabel>,
}

impl NliBatch {
    pub fn from_examples(examples: &[&NliExample]) -> Self {
        let p: Vec<&[usize]> = examples.iter().map(|e| e.premise.as_slice()).collect();
        let h: Vec<&[usize]> = examples.iter().map(|e| e.hypothesis.as_slice()).collect();
        Self {
            premise: PaddedIds::from_sequences(&p),
            hypothesis: PaddedIds::from_sequences(&h),
            labels: examples.iter().map(|e| e.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

/// Shuffles with `seed`, then cuts consecutive batches of `batch_size`
/// (the last one may be smaller).
pub fn make_batches(examples: &[NliExample], batch_size: usize, seed: u64) -> Result<Vec<NliBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| NliBatch::from_examples(&idx.iter().map(|&i| &examples[i]).collect::<Vec<_>>()))
        .collect())
}

/// Batches in dataset order.
pub fn sequential_batches(examples: &[NliExample], batch_size: usize) -> Result<Vec<NliBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(examples
        .chunks(batch_size)
        .map(|c| NliBatch::from_examples(&c.iter().collect::<Vec<_>>()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(p: usize, h: usize) -> NliExample {
        NliExample {
            premise: (2..2 + p).collect(),
            hypothesis: (2..2 + h).collect(),
            label: NliLabel::Entailment,
        }
    }

    #[test]
    fn batch_sizes() {
        let data = vec![ex(1, 1), ex(2, 2), ex(3, 3)];
        let sizes: Vec<usize> = make_batches(&data, 2, 0).unwrap().iter().map(NliBatch::len).collect();
        assert_eq!(sizes, vec![2, 1]);
        assert!(make_batches(&data, 0, 0).is_err());
    }

    #[test]
    fn padding_and_masks() {
        let data = vec![ex(3, 1), ex(5, 2)];
        let b = &sequential_batches(&data, 2).unwrap()[0];
        assert_eq!(b.premise.width, 5);
        assert_eq!(b.premise.row(0).1, &[true, true, true, false, false]);
        assert_eq!(b.premise.row(1).1, &[true; 5]);
        assert_eq!(b.premise.row(0).0, &[2, 3, 4, PAD_ID, PAD_ID]);
        assert_eq!(b.hypothesis.width, 2);
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        let data: Vec<NliExample> = (1..40).map(|i| ex(i % 6 + 1, i % 4 + 1)).collect();
        assert_eq!(make_batches(&data, 8, 42).unwrap(), make_batches(&data, 8, 42).unwrap());
        assert_ne!(make_batches(&data, 8, 42).unwrap(), make_batches(&data, 8, 43).unwrap());
    }
}
