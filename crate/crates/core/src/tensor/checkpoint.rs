//! Tensor checkpoint files.
//!
//! A checkpoint is a pair of files sharing a stem: `<stem>.manifest` (the
//! `key = value` text header) and `<stem>.blob` (little-endian f64 values,
//! row-major, tensors concatenated in parameter order). The manifest records
//! each tensor's name, shape, and byte offset into the blob, plus a SHA-256
//! of the blob so corruption is caught on load. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::kv::{self, Manifest};
use crate::tensor::{ParamSet, Tensor};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub fn manifest_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn blob_path(stem: &Path) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".blob");
    PathBuf::from(s)
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(char::from_digit((b >> 4) as u32, 16).unwrap());
        s.push(char::from_digit((b & 0xf) as u32, 16).unwrap());
    }
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes `<stem>.manifest` and `<stem>.blob`. `extra` pairs are appended to
/// the manifest verbatim (model metadata, config snapshots).
pub fn save(stem: &Path, params: &ParamSet, extra: &[(String, String)]) -> Result<()> {
    let mut blob: Vec<u8> = Vec::with_capacity(params.total_len() * 8);
    let mut pairs: Vec<(String, String)> = vec![
        ("format".into(), "tensors.v1".into()),
        ("tensor.count".into(), params.len().to_string()),
    ];
    for (i, (name, t)) in params.iter().enumerate() {
        pairs.push((format!("tensor.{i}.name"), name.to_owned()));
        pairs.push((format!("tensor.{i}.rows"), t.rows().to_string()));
        pairs.push((format!("tensor.{i}.cols"), t.cols().to_string()));
        pairs.push((format!("tensor.{i}.offset"), blob.len().to_string()));
        for v in t.values() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    pairs.push(("blob.len".into(), blob.len().to_string()));
    pairs.push(("blob.sha256".into(), sha256_hex(&blob)));
    pairs.extend_from_slice(extra);

    let bp = blob_path(stem);
    std::fs::write(&bp, &blob).map_err(|e| Error::io(&bp, e))?;
    kv::write_file(&manifest_path(stem), &pairs)
}

/// Loads a checkpoint saved by [`save`]. Returns the parameters in their
/// original order together with the parsed manifest, so callers can read
/// their own `extra` keys.
pub fn load(stem: &Path) -> Result<(ParamSet, Manifest)> {
    let mp = manifest_path(stem);
    let manifest = Manifest::read_file(&mp)?;
    let format = manifest.require("format")?;
    if format != "tensors.v1" {
        return Err(Error::Parse {
            path: mp,
            line: 0,
            msg: format!("unsupported format {format:?}"),
        });
    }
    let bp = blob_path(stem);
    let blob = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let expect_len: usize = manifest.require_parsed("blob.len")?;
    if blob.len() != expect_len {
        return Err(Error::Parse {
            path: bp,
            line: 0,
            msg: format!("blob is {} bytes, manifest says {expect_len}", blob.len()),
        });
    }
    let expect_sha = manifest.require("blob.sha256")?;
    let got_sha = sha256_hex(&blob);
    if got_sha != expect_sha {
        return Err(Error::Parse {
            path: bp,
            line: 0,
            msg: "blob hash mismatch".into(),
        });
    }

    let count: usize = manifest.require_parsed("tensor.count")?;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name = manifest.require(&format!("tensor.{i}.name"))?;
        let rows: usize = manifest.require_parsed(&format!("tensor.{i}.rows"))?;
        let cols: usize = manifest.require_parsed(&format!("tensor.{i}.cols"))?;
        let offset: usize = manifest.require_parsed(&format!("tensor.{i}.offset"))?;
        let bytes = rows * cols * 8;
        let end = offset.checked_add(bytes).filter(|&e| e <= blob.len());
        let Some(end) = end else {
            return Err(Error::Parse {
                path: bp,
                line: 0,
                msg: format!("tensor {name} spans past end of blob"),
            });
        };
        let values: Vec<f64> = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(name, Tensor::new(rows, cols, values)?);
    }
    Ok((params, manifest))
}
