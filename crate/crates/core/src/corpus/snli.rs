use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use super::TextPair;
use crate::error::{Error, Result};
use crate::head::NliLabel;

#[derive(Debug, Serialize, Deserialize)]
struct SnliRecord {
    sentence1: String,
    sentence2: String,
    gold_label: String,
}

#[derive(Debug, Clone, Default)]
pub struct SnliData {
    pub pairs: Vec<TextPair>,
    /// Lines whose gold label is `-` (annotators did not agree).
    pub skipped: usize,
}

pub fn parse_snli(path: &Path) -> Result<SnliData> {
    let file = File::open(path)?;
    parse_snli_reader(BufReader::new(file), path)
}

/// Reads one JSON object per line. Blank lines are ignored.
pub fn parse_snli_reader<R: BufRead>(reader: R, path: &Path) -> Result<SnliData> {
    let mut data = SnliData::default();
    let err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SnliRecord = serde_json::from_str(&line).map_err(|e| err(lineno, format!("malformed record: {e}")))?;
        let label = match rec.gold_label.as_str() {
            "entailment" => NliLabel::Entailment,
            "neutral" => NliLabel::Neutral,
            "contradiction" => NliLabel::Contradiction,
            "-" => {
                data.skipped += 1;
                continue;
            }
            other => return Err(err(lineno, format!("unknown gold_label `{other}`"))),
        };
        data.pairs.push(TextPair {
            premise: tokenize(&rec.sentence1),
            hypothesis: tokenize(&rec.sentence2),
            label,
        });
    }
    Ok(data)
}

/// Writes pairs in the same line format [`parse_snli`] reads, joining tokens
/// with single spaces.
pub fn write_snli(path: &Path, pairs: &[TextPair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        let rec = SnliRecord {
            sentence1: p.premise.join(" "),
            sentence2: p.hypothesis.join(" "),
            gold_label: p.label.name().to_string(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
