//! The common text document format.
//!
//! Every graph, design space, configuration, model and manifest file is a
//! UTF-8 JSON document. Writers emit struct fields in declaration order and
//! maps sorted by key, two-space indented, with a trailing newline, so equal
//! values always serialise to identical bytes.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DocError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The document does not match its schema; `field` is the JSON path.
    #[error("{origin}: schema error at `{field}`: {message}")]
    Schema {
        origin: String,
        field: String,
        message: String,
    },
}

/// Canonical serialisation.
pub fn to_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("document values serialise");
    s.push('\n');
    s
}

/// Parses `text`, reporting the path to the first offending field.
pub fn from_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, DocError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        DocError::Schema {
            origin: origin.to_string(),
            field,
            message: e.into_inner().to_string(),
        }
    })
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<T, DocError> {
    let text = std::fs::read_to_string(path).map_err(|source| DocError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_str(&text, &path.display().to_string())
}

pub fn write<T: Serialize>(path: &Path, value: &T) -> Result<(), DocError> {
    std::fs::write(path, to_string(value)).map_err(|source| DocError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        #[allow(dead_code)]
        items: Vec<Inner>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        #[allow(dead_code)]
        n: u32,
    }

    #[test]
    fn schema_errors_carry_field_path() {
        let err = from_str::<Outer>(r#"{"items":[{"n":1},{"n":"x"}]}"#, "t").unwrap_err();
        match err {
            DocError::Schema { field, .. } => assert_eq!(field, "items[1].n"),
            other => panic!("unexpected {other}"),
        }
    }
}
