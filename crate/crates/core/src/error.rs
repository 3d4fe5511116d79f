use thiserror::Error;

use crate::graph::KgViolation;

/// Errors raised by the numeric core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("index {index} out of range for {op} (len {len})")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Errors from the ingest, graph, search and training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("parse error at line {line}, column {column} (byte offset {offset}), path `{path}`: {message}")]
    Parse {
        line: usize,
        column: usize,
        offset: usize,
        path: String,
        message: String,
    },

    #[error("validation error in record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty scene: no detections survive the confidence filter")]
    EmptyScene,

    #[error("unknown concept `{0}`")]
    UnknownConcept(String),

    #[error("knowledge graph violations: {}", format_violations(.0))]
    Kg(Vec<KgViolation>),

    #[error("invalid node id {0}")]
    InvalidNode(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("checkpoint/KG mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("unsupported version `{0}`")]
    Version(String),

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_violations(v: &[KgViolation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    /// Whether the error stems from user input (bad files, flags) rather than
    /// an internal invariant breach.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Tensor(_) | Error::Contract(_) | Error::NonFiniteLoss(_)
        )
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Parses JSON with a field path and byte offset attached to any failure.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        parse_error(bytes, &inner, path)
    })?;
    de.end()
        .map_err(|e| parse_error(bytes, &e, String::from(".")))?;
    Ok(value)
}

fn parse_error(bytes: &[u8], e: &serde_json::Error, path: String) -> Error {
    let (line, column) = (e.line(), e.column());
    Error::Parse {
        line,
        column,
        offset: byte_offset(bytes, line, column),
        path,
        message: e.to_string(),
    }
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut start = 0;
    for _ in 1..line {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => break,
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_offset_counts_previous_lines() {
        let text = b"ab\ncde\nf";
        assert_eq!(byte_offset(text, 1, 1), 0);
        assert_eq!(byte_offset(text, 2, 2), 4);
        assert_eq!(byte_offset(text, 3, 1), 7);
    }

    #[test]
    fn malformed_json_reports_offset() {
        #[derive(serde::Deserialize, Debug)]
        struct T {
            #[allow(dead_code)]
            a: u32,
        }
        let err = parse_json::<T>(b"{\"a\": 1,,}").unwrap_err();
        match err {
            Error::Parse { offset, line, .. } => {
                assert_eq!(line, 1);
                assert_eq!(offset, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_json::<T>(b"{\"a\": \"x\"}").unwrap_err();
        assert!(
            matches!(err, Error::Parse { ref path, .. } if path == "a"),
            "{err}"
        );
    }
}
