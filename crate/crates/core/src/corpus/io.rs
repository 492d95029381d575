//! Corpus persistence: manifest + image blob + caption file.
//!
//! Layout inside a corpus directory:
//!   - `corpus.manifest`: `key = value` metadata with the vocabulary table
//!     and SHA-256 of the two data files.
//!   - `images.blob`: little-endian f32, row-major within a sample,
//!     sample-major across the file.
//!   - `captions.txt`: one caption per line, `sample_id caption_index
//!     token token ...`.
//!
//! Attribute records are not stored: the caption parser recovers them
//! exactly, so the first caption of each sample is the source of truth.

use crate::corpus::{render, vocab, Corpus, Domain, PairedSample};
use crate::error::{Error, Result};
use crate::kv::{self, Manifest};
use crate::tensor::checkpoint::sha256_hex;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "corpus.manifest";
pub const IMAGES_FILE: &str = "images.blob";
pub const CAPTIONS_FILE: &str = "captions.txt";

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut blob: Vec<u8> = Vec::with_capacity(corpus.samples.len() * render::IMG_LEN * 4);
    for s in &corpus.samples {
        debug_assert_eq!(s.image.len(), render::IMG_LEN);
        for &v in &s.image {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let mut captions = String::new();
    for s in &corpus.samples {
        for (ci, cap) in s.captions.iter().enumerate() {
            let _ = write!(captions, "{} {}", s.sample_id, ci);
            for t in cap {
                let _ = write!(captions, " {t}");
            }
            captions.push('\n');
        }
    }

    let mut pairs: Vec<(String, String)> = vec![
        ("format".into(), "corpus.v1".into()),
        ("domain".into(), corpus.domain.tag().into()),
        ("seed".into(), corpus.seed.to_string()),
        ("m".into(), corpus.m.to_string()),
        ("n_train".into(), corpus.n_train.to_string()),
        ("n_test".into(), corpus.n_test.to_string()),
        ("image.height".into(), render::IMG_H.to_string()),
        ("image.width".into(), render::IMG_W.to_string()),
        ("image.channels".into(), render::IMG_C.to_string()),
        ("images.file".into(), IMAGES_FILE.into()),
        ("images.sha256".into(), sha256_hex(&blob)),
        ("captions.file".into(), CAPTIONS_FILE.into()),
        ("captions.sha256".into(), sha256_hex(captions.as_bytes())),
        ("vocab.count".into(), vocab::VOCAB_SIZE.to_string()),
    ];
    for (i, w) in vocab::WORDS.iter().enumerate() {
        pairs.push((format!("vocab.{i}"), (*w).into()));
    }

    let images_path = dir.join(IMAGES_FILE);
    std::fs::write(&images_path, &blob).map_err(|e| Error::io(&images_path, e))?;
    let captions_path = dir.join(CAPTIONS_FILE);
    std::fs::write(&captions_path, captions).map_err(|e| Error::io(&captions_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    kv::write_file(&manifest_path, &pairs)?;
    Ok(manifest_path)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = Manifest::read_file(&manifest_path)?;
    let bad = |msg: String| Error::Parse {
        path: manifest_path.clone(),
        line: 0,
        msg,
    };
    if manifest.require("format")? != "corpus.v1" {
        return Err(bad("unsupported corpus format".into()));
    }
    let domain = Domain::parse(manifest.require("domain")?)?;
    let seed: u64 = manifest.require_parsed("seed")?;
    let m: usize = manifest.require_parsed("m")?;
    let n_train: usize = manifest.require_parsed("n_train")?;
    let n_test: usize = manifest.require_parsed("n_test")?;
    let h: usize = manifest.require_parsed("image.height")?;
    let w: usize = manifest.require_parsed("image.width")?;
    let c: usize = manifest.require_parsed("image.channels")?;
    if (h, w, c) != (render::IMG_H, render::IMG_W, render::IMG_C) {
        return Err(bad(format!("unsupported image geometry {h}x{w}x{c}")));
    }
    let vocab_count: usize = manifest.require_parsed("vocab.count")?;
    if vocab_count != vocab::VOCAB_SIZE {
        return Err(bad(format!("vocabulary size {vocab_count} unsupported")));
    }
    for (i, word) in vocab::WORDS.iter().enumerate() {
        let stored = manifest.require(&format!("vocab.{i}"))?;
        if stored != *word {
            return Err(bad(format!("vocab.{i} is {stored:?}, expected {word:?}")));
        }
    }

    let total = n_train + n_test;
    let images_path = dir.join(manifest.require("images.file")?);
    let blob = std::fs::read(&images_path).map_err(|e| Error::io(&images_path, e))?;
    if sha256_hex(&blob) != manifest.require("images.sha256")? {
        return Err(bad("image blob hash mismatch".into()));
    }
    if blob.len() != total * render::IMG_LEN * 4 {
        return Err(bad(format!(
            "image blob is {} bytes, expected {}",
            blob.len(),
            total * render::IMG_LEN * 4
        )));
    }

    let captions_path = dir.join(manifest.require("captions.file")?);
    let captions_text =
        std::fs::read_to_string(&captions_path).map_err(|e| Error::io(&captions_path, e))?;
    if sha256_hex(captions_text.as_bytes()) != manifest.require("captions.sha256")? {
        return Err(bad("caption file hash mismatch".into()));
    }

    let mut captions: Vec<Vec<Vec<u16>>> = vec![Vec::new(); total];
    for (ln, line) in captions_text.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: captions_path.clone(),
            line: ln + 1,
            msg,
        };
        let mut fields = line.split_ascii_whitespace();
        let sample_id: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err("missing sample id".into()))?;
        let caption_index: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| parse_err("missing caption index".into()))?;
        if sample_id >= total {
            return Err(parse_err(format!("sample id {sample_id} out of range")));
        }
        let tokens = fields
            .map(|f| f.parse::<u16>().map_err(|_| parse_err(format!("bad token {f:?}"))))
            .collect::<Result<Vec<u16>>>()?;
        if tokens.is_empty() || tokens.len() > 8 {
            return Err(parse_err(format!("caption has {} tokens", tokens.len())));
        }
        if caption_index != captions[sample_id].len() {
            return Err(parse_err(format!(
                "caption index {caption_index} out of order for sample {sample_id}"
            )));
        }
        captions[sample_id].push(tokens);
    }

    let mut samples = Vec::with_capacity(total);
    for (sample_id, caps) in captions.into_iter().enumerate() {
        if caps.len() != m {
            return Err(bad(format!(
                "sample {sample_id} has {} captions, manifest says {m}",
                caps.len()
            )));
        }
        let attrs = vocab::parse_caption(&caps[0])?;
        for c in &caps[1..] {
            if vocab::parse_caption(c)? != attrs {
                return Err(bad(format!("sample {sample_id} captions disagree")));
            }
        }
        let off = sample_id * render::IMG_LEN * 4;
        let image: Vec<f64> = blob[off..off + render::IMG_LEN * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        samples.push(PairedSample {
            sample_id,
            attrs,
            image,
            captions: caps,
        });
    }

    Ok(Corpus {
        domain,
        seed,
        m,
        n_train,
        n_test,
        samples,
    })
}
