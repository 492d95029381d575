//! Line-oriented `key = value` manifests.
//!
//! All on-disk metadata (checkpoint headers, corpus descriptors, artifact
//! manifests) uses this format: UTF-8, one `key = value` pair per line, `#`
//! comment lines allowed, written in a fixed order so identical state always
//! produces identical bytes. Keys are `[A-Za-z0-9._/-]+`; values are
//! arbitrary single-line strings.

use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

fn key_ok(key: &str) -> bool {
    !key.is_empty()
        && key
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'/' | b'-'))
}

/// Renders pairs in the given order. Fails on malformed keys or values with
/// line breaks, so a manifest can always be parsed back verbatim.
pub fn render(pairs: &[(String, String)]) -> Result<String> {
    let mut out = String::new();
    for (k, v) in pairs {
        if !key_ok(k) {
            return Err(Error::Contract(format!("bad manifest key {k:?}")));
        }
        if v.contains('\n') || v.contains('\r') {
            return Err(Error::Contract(format!("manifest value for {k} contains a line break")));
        }
        let _ = writeln!(out, "{k} = {v}");
    }
    Ok(out)
}

pub fn write_file(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let text = render(pairs)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Ordered manifest contents plus typed accessors.
#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
    pairs: Vec<(String, String)>,
}

impl Manifest {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    msg: format!("expected `key = value`, got {raw:?}"),
                });
            };
            let k = k.trim();
            if !key_ok(k) {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: i + 1,
                    msg: format!("bad key {k:?}"),
                });
            }
            pairs.push((k.to_owned(), v.trim().to_owned()));
        }
        Ok(Manifest {
            path: path.to_owned(),
            pairs,
        })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, text.as_str())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("missing key {key}"),
        })
    }

    pub fn require_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("key {key}: cannot parse {raw:?} as {}", std::any::type_name::<T>()),
        })
    }

    /// Values for a repeated key, in file order.
    pub fn all(&self, key: &str) -> Vec<&str> {
        self.pairs
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }
}
