//! FASTA reading and writing. A record may carry a `#SS3 <labels>` line after
//! its sequence.

use std::path::Path;

use crate::data::write_atomic;
use crate::diffusion::TokenSequence;
use crate::error::{Error, Result};
use crate::guidance::Annotation;
use crate::vocab::{UnknownPolicy, Vocab, MASK_CHAR};

const ANNOTATION_PREFIX: &str = "#SS3";

/// One record. `ids` may contain the mask token (infill templates).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FastaRecord {
    pub id: String,
    pub ids: Vec<usize>,
    pub annotation: Option<Annotation>,
}

impl FastaRecord {
    pub fn new(id: impl Into<String>, sequence: &TokenSequence) -> Self {
        Self {
            id: id.into(),
            ids: sequence.ids().to_vec(),
            annotation: None,
        }
    }

    pub fn with_annotation(mut self, annotation: Annotation) -> Self {
        self.annotation = Some(annotation);
        self
    }

    /// The record as a clean sequence; fails if it contains the mask.
    pub fn to_sequence(&self, vocab: &Vocab) -> Result<TokenSequence> {
        TokenSequence::new(self.ids.clone(), vocab)
    }
}

/// Parses FASTA text. `source` names the input in error messages.
pub fn parse_fasta(text: &str, source: &str, vocab: &Vocab, policy: UnknownPolicy) -> Result<Vec<FastaRecord>> {
    let err = |line: usize, msg: String| Error::Fasta {
        path: source.to_string(),
        line,
        msg,
    };
    let mut records: Vec<FastaRecord> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            let id = header.trim();
            if id.is_empty() {
                return Err(err(line_no, "empty header".into()));
            }
            records.push(FastaRecord {
                id: id.to_string(),
                ids: Vec::new(),
                annotation: None,
            });
            continue;
        }
        let Some(record) = records.last_mut() else {
            return Err(err(line_no, "sequence data before the first header".into()));
        };
        if let Some(labels) = line.strip_prefix(ANNOTATION_PREFIX) {
            let annotation = Annotation::parse(labels).map_err(|e| err(line_no, e.to_string()))?;
            if annotation.len() != record.ids.len() {
                return Err(err(
                    line_no,
                    format!("{} labels for a sequence of length {}", annotation.len(), record.ids.len()),
                ));
            }
            record.annotation = Some(annotation);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if record.annotation.is_some() {
            return Err(err(line_no, "sequence data after the annotation line".into()));
        }
        for (col, c) in line.chars().enumerate() {
            if c.is_whitespace() {
                continue;
            }
            let id = vocab
                .encode_char(c, policy)
                .ok_or_else(|| err(line_no, format!("illegal character {c:?} at column {}", col + 1)))?;
            record.ids.push(id);
        }
    }
    Ok(records)
}

pub fn read_fasta(path: &Path, vocab: &Vocab, policy: UnknownPolicy) -> Result<Vec<FastaRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_fasta(&text, &path.display().to_string(), vocab, policy)
}

/// One line per sequence; the mask is written as `X`.
pub fn format_fasta(records: &[FastaRecord], vocab: &Vocab) -> String {
    let mut out = String::new();
    for r in records {
        out.push('>');
        out.push_str(&r.id);
        out.push('\n');
        for &id in &r.ids {
            if id == vocab.mask_id() {
                out.push(MASK_CHAR);
            } else {
                out.push_str(vocab.symbol(id));
            }
        }
        out.push('\n');
        if let Some(a) = &r.annotation {
            out.push_str(&format!("{ANNOTATION_PREFIX} {a}\n"));
        }
    }
    out
}

/// Writes atomically (temporary file, then rename).
pub fn write_fasta(records: &[FastaRecord], path: &Path, vocab: &Vocab) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to write".into()));
    }
    if let Some(r) = records.iter().find(|r| r.ids.iter().any(|&id| vocab.is_special(id))) {
        return Err(Error::InvalidInput(format!("record {} contains a special token", r.id)));
    }
    write_atomic(path, format_fasta(records, vocab).as_bytes())
}
