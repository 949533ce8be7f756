//! JSON-lines utterance records paired with a CDIE embedding file.

use std::collections::HashMap;
use std::path::Path;

use cdi_core::corpus::{Corpus, Utterance};
use serde::{Deserialize, Serialize};

use super::cdie::{self, Embeddings};
use crate::{Error, Result};

/// One dataset line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<String>,
}

/// Parses JSON-lines text; a single trailing newline is allowed.
pub fn parse_records(text: &str, name: &str) -> Result<Vec<Record>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, raw) in body.split('\n').enumerate() {
        let line = i + 1;
        let err = |message: String| Error::Text {
            source_name: name.to_string(),
            line,
            message,
        };
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if raw.trim().is_empty() {
            return Err(err("blank line".into()));
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        if let Some(first) = seen.insert(rec.id.clone(), line) {
            return Err(err(format!("duplicate id `{}` (first seen on line {first})", rec.id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn render_records(records: &[Record]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Joins parsed records with an embedding matrix, row `i` to line `i`.
pub fn assemble(records: Vec<Record>, emb: &Embeddings, emb_name: &str) -> Result<Corpus> {
    if records.len() != emb.count {
        return Err(Error::CountMismatch {
            dataset: records.len(),
            embeddings: emb.count,
        });
    }
    for row in 0..emb.count {
        if let Some(col) = emb.row(row).iter().position(|v| !v.is_finite()) {
            return Err(Error::Binary {
                source_name: emb_name.to_string(),
                offset: emb.offset_of(row, col),
                message: format!("non-finite value at row {row}, column {col}"),
            });
        }
    }
    let utterances = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| Utterance {
            id: r.id,
            text: r.text,
            gold_label: r.label,
            base_embedding: emb.row(i).to_vec(),
        })
        .collect();
    Ok(Corpus::new(utterances)?)
}

/// Reads a corpus from a JSON-lines dataset and a CDIE embedding file.
pub fn load_corpus(dataset: &Path, embeddings: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(dataset).map_err(|e| Error::io(dataset, e))?;
    let records = parse_records(&text, &dataset.display().to_string())?;
    let emb = cdie::read(embeddings)?;
    assemble(records, &emb, &embeddings.display().to_string())
}

/// Splits a corpus back into its record list and embedding matrix.
pub fn disassemble(corpus: &Corpus) -> (Vec<Record>, Embeddings) {
    let records = corpus
        .utterances()
        .iter()
        .map(|u| Record {
            id: u.id.clone(),
            text: u.text.clone(),
            label: u.gold_label.clone(),
        })
        .collect();
    let data = corpus
        .utterances()
        .iter()
        .flat_map(|u| u.base_embedding.iter().copied())
        .collect();
    let emb = Embeddings {
        count: corpus.len(),
        dim: corpus.dim(),
        data,
    };
    (records, emb)
}

pub fn save_corpus(corpus: &Corpus, dataset: &Path, embeddings: &Path) -> Result<()> {
    let (records, emb) = disassemble(corpus);
    std::fs::write(dataset, render_records(&records)).map_err(|e| Error::io(dataset, e))?;
    cdie::write(embeddings, &emb)
}
