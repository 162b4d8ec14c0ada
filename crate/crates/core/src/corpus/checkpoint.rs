//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `SUFISENT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a compact JSON header, then every
//! array as raw little-endian `f64` in directory order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingTable;
use super::vocab::Vocab;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadParams};
use crate::model::{Model, EMBEDDINGS_NAME};
use crate::tensor::NumArray;
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SUFISENT";
const PREAMBLE: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub model: Model,
    pub best_val_acc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    head: HeadConfig,
    train: TrainConfig,
    vocab: Vocab,
    embeddings_trainable: bool,
    pretrained_rows: Vec<usize>,
    best_val_acc: f64,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in values from the start of the data section.
    offset: usize,
    len: usize,
}

fn layout(encoder: &EncoderConfig, head: &HeadConfig, vocab_len: usize) -> Vec<(String, Vec<usize>)> {
    let mut out = EncoderParams::expected_layout(encoder);
    out.extend(HeadParams::expected_layout(head));
    out.push((EMBEDDINGS_NAME.to_string(), vec![vocab_len, encoder.embed]));
    out
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ckpt.model;
    if m.embeddings.vocab_len() != ckpt.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "embedding table has {} rows but vocabulary has {} tokens",
            m.embeddings.vocab_len(),
            ckpt.vocab.len()
        )));
    }
    let mut arrays: Vec<(String, &NumArray)> = m.encoder.array_names().into_iter().zip(m.encoder.arrays()).collect();
    arrays.extend(m.head.array_names().into_iter().zip(m.head.arrays()));
    arrays.push((EMBEDDINGS_NAME.to_string(), &m.embeddings.table));

    let mut offset = 0;
    let entries = arrays
        .iter()
        .map(|(name, a)| {
            let e = ArrayEntry {
                name: name.clone(),
                shape: a.shape().to_vec(),
                offset,
                len: a.len(),
            };
            offset += a.len();
            e
        })
        .collect();
    let header = Header {
        encoder: m.encoder_config,
        head: m.head.config,
        train: ckpt.train,
        vocab: ckpt.vocab.clone(),
        embeddings_trainable: m.embeddings.trainable,
        pretrained_rows: (0..m.embeddings.pretrained.len()).filter(|&i| m.embeddings.pretrained[i]).collect(),
        best_val_acc: ckpt.best_val_acc,
        arrays: entries,
    };
    let json = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(PREAMBLE + json.len() + offset * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, a) in &arrays {
        for x in a.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let data_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("file is truncated inside the header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start])?;
    let data = &bytes[data_start..];

    let expected = layout(&header.encoder, &header.head, header.vocab.len());
    if header.arrays.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} arrays for this configuration, found {}",
            expected.len(),
            header.arrays.len()
        )));
    }
    let mut arrays = Vec::with_capacity(expected.len());
    let mut next_offset = 0;
    for (entry, (name, shape)) in header.arrays.iter().zip(&expected) {
        let fail = |msg: String| Error::CheckpointArray {
            name: entry.name.clone(),
            msg,
        };
        if &entry.name != name {
            return Err(fail(format!("expected array `{name}` at this position")));
        }
        if &entry.shape != shape {
            return Err(fail(format!("shape {:?} does not match configuration {:?}", entry.shape, shape)));
        }
        if entry.len != shape.iter().product::<usize>() || entry.offset != next_offset {
            return Err(fail(format!("inconsistent offset {} / length {}", entry.offset, entry.len)));
        }
        next_offset += entry.len;
        let (start, end) = (entry.offset * 8, (entry.offset + entry.len) * 8);
        if end > data.len() {
            return Err(fail("file is truncated".into()));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push(NumArray::new(shape.clone(), values)?);
    }
    if next_offset * 8 != data.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last array",
            data.len() - next_offset * 8
        )));
    }

    let table = arrays.pop().expect("embeddings entry present");
    let head_arrays = arrays.split_off(arrays.len() - 6);
    let encoder = EncoderParams::from_arrays(&header.encoder, arrays)?;
    encoder.validate(&header.encoder)?;
    let head = HeadParams::from_arrays(header.head, head_arrays)?;
    let mut pretrained = vec![false; header.vocab.len()];
    for &i in &header.pretrained_rows {
        *pretrained
            .get_mut(i)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained row {i} out of range")))? = true;
    }
    Ok(Checkpoint {
        train: header.train,
        vocab: header.vocab,
        model: Model {
            encoder_config: header.encoder,
            encoder,
            head,
            embeddings: EmbeddingTable {
                table,
                pretrained,
                trainable: header.embeddings_trainable,
            },
        },
        best_val_acc: header.best_val_acc,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Variant;

    fn sample(variant: Variant) -> Checkpoint {
        let vocab = Vocab::from_tokens(["a", "b", "c"]);
        let cfg = EncoderConfig::new(variant, 3, 2).unwrap();
        let head = HeadConfig {
            fc_dim: 4,
            ..HeadConfig::new(cfg.encoding_dim())
        };
        let mut emb = EmbeddingTable::random(vocab.len(), 2, 3);
        emb.pretrained[3] = true;
        Checkpoint {
            train: TrainConfig::default(),
            vocab,
            model: Model::init(cfg, head, emb, 9).unwrap(),
            best_val_acc: 0.1 + 0.2,
        }
    }

    #[test]
    fn round_trip_is_exact_for_all_variants() {
        for v in Variant::ALL {
            let c = sample(v);
            let bytes = encode_checkpoint(&c).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = encode_checkpoint(&sample(Variant::SufiSent)).unwrap();
        bytes[8] = 7;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn tampered_shape_names_array() {
        let bytes = encode_checkpoint(&sample(Variant::SufiSent)).unwrap();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let needle = "\"name\":\"head.out.w\",\"shape\":[4,3]";
        assert!(text.contains(needle));
        let patched = text.replace(needle, "\"name\":\"head.out.w\",\"shape\":[3,4]");
        // replacement keeps the byte length, so only the header text changes
        let mut tampered = bytes.clone();
        let at = text.find(needle).unwrap();
        tampered[at..at + needle.len()].copy_from_slice(&patched.as_bytes()[at..at + needle.len()]);
        let err = decode_checkpoint(&tampered).unwrap_err();
        assert!(err.to_string().contains("head.out.w"), "{err}");
    }

    #[test]
    fn truncation_detected() {
        let bytes = encode_checkpoint(&sample(Variant::SufiSentCatTied)).unwrap();
        for cut in [4, 30, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }
}
