//! Records the annotator operates on: cell graphs, SMILES token sequences
//! and raw text, each with a canonical text serialization.

mod cell;
mod smiles;
mod split;

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cell::{
    parse_cell_graph, random_cell_graph, serialize_cell_graph, CellGraph, Edge, OperatorVocabulary, FIRST_INTERMEDIATE,
    IN_DEGREE,
};
pub use smiles::{tokenize_smiles, TokenSequence};
pub use split::{
    kfold_split, split_dataset, DatasetSplit, FoldAssignment, DEFAULT_FOLDS, DEFAULT_SUPPORT_N, DEFAULT_VALIDATION_N,
};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("syntax error at byte {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("invalid cell: {0}")]
    Semantic(String),
    #[error("invalid operator vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("unclosed '[' at byte {position}")]
    UnclosedBracket { position: usize },
    #[error("need {needed} records for support and validation, only {available} available")]
    InsufficientRecords { needed: usize, available: usize },
    #[error("cannot split {available} records into {k} folds (need k >= 2 and at least k records)")]
    TooFewRecords { k: usize, available: usize },
    #[error("duplicate record id {id:?}{}", line.map(|l| format!(" on line {l}")).unwrap_or_default())]
    DuplicateId { id: String, line: Option<usize> },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: Box<DatasetError>,
    },
    #[error("line is not of the form id<TAB>payload")]
    MissingTab,
    #[error("empty record id")]
    EmptyId,
    #[error("empty payload")]
    EmptyPayload,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown record format {0:?} (expected cellgraph, smiles or text)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    CellGraph,
    Smiles,
    Text,
}

impl FromStr for RecordFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cellgraph" => Ok(Self::CellGraph),
            "smiles" => Ok(Self::Smiles),
            "text" => Ok(Self::Text),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for RecordFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::CellGraph => "cellgraph",
            Self::Smiles => "smiles",
            Self::Text => "text",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Payload {
    CellGraph(CellGraph),
    TokenSequence(TokenSequence),
    RawText(String),
}

impl Payload {
    pub fn canonical_text(&self) -> String {
        match self {
            Payload::CellGraph(g) => serialize_cell_graph(g),
            Payload::TokenSequence(t) => t.to_text(),
            Payload::RawText(s) => normalize_whitespace(s),
        }
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub payload: Payload,
    pub canonical_text: String,
}

impl Record {
    pub fn new(id: impl Into<String>, payload: Payload) -> Self {
        let canonical_text = payload.canonical_text();
        Self {
            id: id.into(),
            payload,
            canonical_text,
        }
    }

    pub fn cell(id: impl Into<String>, graph: CellGraph) -> Self {
        Self::new(id, Payload::CellGraph(graph))
    }

    pub fn raw_text(id: impl Into<String>, text: impl AsRef<str>) -> Self {
        Self::new(id, Payload::RawText(normalize_whitespace(text.as_ref())))
    }

    /// Parses one payload in the given format. `vocabulary` is only used for cells.
    pub fn parse(
        id: impl Into<String>,
        text: &str,
        format: RecordFormat,
        vocabulary: &OperatorVocabulary,
    ) -> Result<Self, DatasetError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(DatasetError::EmptyPayload);
        }
        let payload = match format {
            RecordFormat::CellGraph => Payload::CellGraph(parse_cell_graph(text, vocabulary)?),
            RecordFormat::Smiles => Payload::TokenSequence(tokenize_smiles(text)?),
            RecordFormat::Text => Payload::RawText(normalize_whitespace(text)),
        };
        Ok(Self::new(id, payload))
    }

    pub fn format(&self) -> RecordFormat {
        match self.payload {
            Payload::CellGraph(_) => RecordFormat::CellGraph,
            Payload::TokenSequence(_) => RecordFormat::Smiles,
            Payload::RawText(_) => RecordFormat::Text,
        }
    }

    /// Canonical form of `text` when it parses in this record's format,
    /// otherwise the trimmed text itself.
    pub fn canonicalize<'a>(&self, text: &'a str) -> std::borrow::Cow<'a, str> {
        use std::borrow::Cow;
        let parsed = match &self.payload {
            Payload::CellGraph(g) => parse_cell_graph(text, g.vocabulary())
                .ok()
                .map(|g| serialize_cell_graph(&g)),
            Payload::TokenSequence(_) => tokenize_smiles(text.trim()).ok().map(|t| t.to_text()),
            Payload::RawText(_) => Some(normalize_whitespace(text)),
        };
        match parsed {
            Some(s) => Cow::Owned(s),
            None => Cow::Borrowed(text.trim()),
        }
    }
}

/// Reads `id<TAB>payload` lines. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_records(
    path: &Path,
    format: RecordFormat,
    vocabulary: &OperatorVocabulary,
) -> Result<Vec<Record>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_records(&text, format, vocabulary)
}

pub fn parse_records(
    text: &str,
    format: RecordFormat,
    vocabulary: &OperatorVocabulary,
) -> Result<Vec<Record>, DatasetError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let wrap = |source: DatasetError| DatasetError::Parse {
            line: line_no,
            source: Box::new(source),
        };
        let (id, payload) = line.split_once('\t').ok_or_else(|| wrap(DatasetError::MissingTab))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(wrap(DatasetError::EmptyId));
        }
        let record = Record::parse(id, payload, format, vocabulary).map_err(wrap)?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                id: record.id,
                line: Some(line_no),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        writeln!(file, "{}\t{}", r.id, r.canonical_text).map_err(io)?;
    }
    file.flush().map_err(io)
}

/// Seeded synthetic cell corpus with ids `cell-0000`, `cell-0001`, ...
pub fn synthetic_cells(count: usize, num_nodes: u32, vocabulary: &OperatorVocabulary, seed: u64) -> Vec<Record> {
    (0..count)
        .map(|i| {
            let g = random_cell_graph(seed.wrapping_add(i as u64), vocabulary, num_nodes);
            Record::cell(format!("cell-{i:04}"), g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_valid_lines() {
        let v = OperatorVocabulary::default_of_size(3);
        let text = "a\tn2{(op_a,0),(op_b,1)}\nb\tn2{(op_c,0),(op_c,1)}\n\nc\tn2{(op_a,1),(op_a,0)}\n";
        let recs = parse_records(text, RecordFormat::CellGraph, &v).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].canonical_text, "n2{(op_a,0),(op_a,1)}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let v = OperatorVocabulary::default_of_size(3);
        let text = "a\tn2{(op_a,0),(op_b,1)}\nb\tn2{(op_a,0)\nc\tn2{(op_a,1),(op_a,0)}\n";
        match parse_records(text, RecordFormat::CellGraph, &v) {
            Err(DatasetError::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_records("x\n", RecordFormat::Text, &v) {
            Err(DatasetError::Parse { line: 1, source }) => assert!(matches!(*source, DatasetError::MissingTab)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id() {
        let v = OperatorVocabulary::default();
        match parse_records("a\tx y\na\tz\n", RecordFormat::Text, &v) {
            Err(DatasetError::DuplicateId { id, line: Some(2) }) => assert_eq!(id, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_records(
            Path::new("/nonexistent/records.tsv"),
            RecordFormat::Text,
            &OperatorVocabulary::default(),
        );
        assert!(matches!(err, Err(DatasetError::Io { .. })));
    }

    #[test]
    fn smiles_and_text_canonical_forms() {
        let v = OperatorVocabulary::default();
        let r = Record::parse("m", "  C[NH+]Cl ", RecordFormat::Smiles, &v).unwrap();
        assert_eq!(r.canonical_text, "C[NH+]Cl");
        let t = Record::parse("t", " the  cat\tsat ", RecordFormat::Text, &v).unwrap();
        assert_eq!(t.canonical_text, "the cat sat");
    }

    #[test]
    fn canonicalize_falls_back_to_raw_text() {
        let v = OperatorVocabulary::default_of_size(3);
        let r = Record::parse("a", "n2{(op_a,0),(op_b,1)}", RecordFormat::CellGraph, &v).unwrap();
        assert_eq!(r.canonicalize("n2{(op_b,1),(op_a,0)}"), "n2{(op_a,0),(op_b,1)}");
        assert_eq!(r.canonicalize(" garbage "), "garbage");
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.tsv");
        let v = OperatorVocabulary::default_of_size(5);
        let recs = synthetic_cells(12, 4, &v, 3);
        write_records(&path, &recs).unwrap();
        assert_eq!(load_records(&path, RecordFormat::CellGraph, &v).unwrap(), recs);
    }
}
