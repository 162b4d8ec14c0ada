use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::tokenize::{PAD_TOKEN, UNK_TOKEN};
use super::{NliExample, TextPair};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Token ↔ id mapping. Ids 0 and 1 are reserved for padding and unknown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocab {
    /// Builds a vocabulary whose real tokens get ids 2, 3, … in the given
    /// order. Reserved tokens and repeats in the input are ignored.
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut v = Self {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD_ID);
        v.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    /// Tokens seen at least `min_count` times, ordered by descending
    /// frequency and then lexicographically.
    pub fn build(examples: &[TextPair], min_count: usize) -> Self {
        let min_count = min_count.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for ex in examples {
            for t in ex.premise.iter().chain(&ex.hypothesis) {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn id(&self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&PAD_ID) | None => UNK_ID,
            Some(&id) => id,
        }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.get(token).is_some_and(|&id| id > UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_pair(&self, pair: &TextPair) -> NliExample {
        NliExample {
            premise: self.encode(&pair.premise),
            hypothesis: self.encode(&pair.hypothesis),
            label: pair.label,
        }
    }
}

impl Serialize for Vocab {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(serde::de::Error::custom("vocabulary must start with the reserved tokens"));
        }
        let v = Self::from_tokens(tokens[2..].iter().cloned());
        if v.len() != tokens.len() {
            return Err(serde::de::Error::custom("vocabulary contains duplicate tokens"));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::NliLabel;

    fn pair(p: &str, h: &str) -> TextPair {
        TextPair {
            premise: p.split(' ').map(String::from).collect(),
            hypothesis: h.split(' ').map(String::from).collect(),
            label: NliLabel::Neutral,
        }
    }

    #[test]
    fn frequency_then_lexicographic() {
        let v = Vocab::build(&[pair("a a", "b")], 1);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        let v = Vocab::build(&[pair("a a", "b")], 2);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("b"), UNK_ID);

        let v = Vocab::build(&[pair("z y x", "y z")], 1);
        assert_eq!(v.tokens()[2..], ["y", "z", "x"]);
    }

    #[test]
    fn reserved_ids_never_produced_by_tokens() {
        let v = Vocab::build(&[pair("<pad> <unk> cat", "cat")], 1);
        assert_eq!(v.id("<pad>"), UNK_ID);
        assert_eq!(v.id("cat"), 2);
        assert!(!v.contains("<unk>"));
    }

    #[test]
    fn deterministic_across_runs() {
        let data: Vec<TextPair> = (0..50)
            .map(|i| pair(&format!("t{} t{} t{}", i % 7, i % 5, i % 3), &format!("t{}", i % 11)))
            .collect();
        assert_eq!(Vocab::build(&data, 1), Vocab::build(&data, 1));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocab::from_tokens(["b", "a"]);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"["<pad>","<unk>","b","a"]"#);
        assert_eq!(serde_json::from_str::<Vocab>(&s).unwrap(), v);
        assert!(serde_json::from_str::<Vocab>(r#"["a"]"#).is_err());
    }
}
