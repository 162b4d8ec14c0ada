//! Synthetic three-way entailment data.
//!
//! Premises are 4–8 distinct content tokens. An entailed hypothesis is an
//! ordered 2–4 token subsequence of the premise; a contradiction is such a
//! subsequence with exactly one token swapped for a distractor; a neutral
//! hypothesis is 2–4 content tokens drawn without looking at the premise.

use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TextPair;
use crate::error::{Error, Result};
use crate::head::NliLabel;

pub const CONTENT_TOKENS: usize = 40;
pub const DISTRACTOR_TOKENS: usize = 10;

fn content(i: usize) -> String {
    format!("c{i:02}")
}

fn distractor(i: usize) -> String {
    format!("d{i:02}")
}

/// The 50 toy tokens: content first, then distractors.
pub fn toy_tokens() -> Vec<String> {
    (0..CONTENT_TOKENS)
        .map(content)
        .chain((0..DISTRACTOR_TOKENS).map(distractor))
        .collect()
}

pub fn is_distractor(token: &str) -> bool {
    token.starts_with('d')
}

/// Whether `needle` occurs in `haystack` in order (not necessarily
/// contiguously).
pub fn is_subsequence<T: PartialEq>(needle: &[T], haystack: &[T]) -> bool {
    let mut it = haystack.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

fn content_sample<R: Rng>(rng: &mut R, len: usize) -> Vec<String> {
    sample(rng, CONTENT_TOKENS, len).into_iter().map(content).collect()
}

fn ordered_subsequence<R: Rng>(rng: &mut R, premise: &[String]) -> Vec<String> {
    let k = rng.gen_range(2..=4);
    let mut picks = sample(rng, premise.len(), k).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| premise[i].clone()).collect()
}

/// `count` examples with label counts balanced to within one.
pub fn gen_toy_nli(seed: u64, count: usize) -> Result<Vec<TextPair>> {
    if count < 3 {
        return Err(Error::Config(format!("toy dataset needs at least 3 examples, got {count}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let label = NliLabel::ALL[k % 3];
        let plen = rng.gen_range(4..=8);
        let premise = content_sample(&mut rng, plen);
        let hypothesis = match label {
            NliLabel::Entailment => ordered_subsequence(&mut rng, &premise),
            NliLabel::Contradiction => {
                let mut h = ordered_subsequence(&mut rng, &premise);
                let at = rng.gen_range(0..h.len());
                h[at] = distractor(rng.gen_range(0..DISTRACTOR_TOKENS));
                h
            }
            NliLabel::Neutral => {
                let hlen = rng.gen_range(2..=4);
                content_sample(&mut rng, hlen)
            }
        };
        out.push(TextPair {
            premise,
            hypothesis,
            label,
        });
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_rules_hold() {
        let data = gen_toy_nli(11, 600).unwrap();
        for ex in &data {
            assert!((4..=8).contains(&ex.premise.len()));
            assert!((2..=4).contains(&ex.hypothesis.len()));
            assert!(ex.premise.iter().all(|t| !is_distractor(t)));
            let d = ex.hypothesis.iter().filter(|t| is_distractor(t)).count();
            match ex.label {
                NliLabel::Entailment => {
                    assert!(is_subsequence(&ex.hypothesis, &ex.premise));
                    assert_eq!(d, 0);
                }
                NliLabel::Contradiction => assert_eq!(d, 1),
                NliLabel::Neutral => assert_eq!(d, 0),
            }
        }
    }

    #[test]
    fn balanced_histogram() {
        let data = gen_toy_nli(7, 300).unwrap();
        let mut hist = [0; 3];
        for ex in &data {
            hist[ex.label.index()] += 1;
        }
        assert_eq!(hist, [100, 100, 100]);

        let data = gen_toy_nli(7, 301).unwrap();
        let mut hist = [0; 3];
        for ex in &data {
            hist[ex.label.index()] += 1;
        }
        assert!(hist.iter().max().unwrap() - hist.iter().min().unwrap() <= 1);
    }

    #[test]
    fn seed_determinism_and_validation() {
        assert_eq!(gen_toy_nli(3, 30).unwrap(), gen_toy_nli(3, 30).unwrap());
        assert_ne!(gen_toy_nli(3, 30).unwrap(), gen_toy_nli(4, 30).unwrap());
        assert!(gen_toy_nli(3, 2).is_err());
    }

    #[test]
    fn vocabulary_is_fifty_tokens() {
        let t = toy_tokens();
        assert_eq!(t.len(), 50);
        assert_eq!(t.iter().filter(|x| is_distractor(x)).count(), 10);
    }

    #[test]
    fn subsequence_check() {
        assert!(is_subsequence(&[1, 3], &[1, 2, 3]));
        assert!(!is_subsequence(&[3, 1], &[1, 2, 3]));
    }
}
