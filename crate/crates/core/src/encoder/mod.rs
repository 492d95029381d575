//! Dual-encoder retrieval models: an image encoder and a text encoder
//! mapping into one shared, l2-normalized 32-dimensional space.
//!
//! Image path: clamp pixels to [0,1], split into 64 non-overlapping 4x4
//! patches (48 values each), linear patch embedding plus a learned per-patch
//! position embedding (which doubles as the bias), two tanh hidden layers
//! applied patch-wise, mean or max pooling over patches by architecture,
//! linear projection, l2 normalization. Without the position table the model
//! would be blind to *where* a shape sits, and position is one of the
//! attributes captions name.
//!
//! Text path: token embedding table, mean pooling over the caption's rows
//! (order-invariant by construction), two tanh hidden layers, projection,
//! l2 normalization.

pub mod pretrain;
pub mod retrieval;

use crate::corpus::render::{IMG_C, IMG_H, IMG_LEN, IMG_W};
use crate::corpus::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::kv::Manifest;
use crate::rng;
use crate::tensor::checkpoint;
use crate::tensor::tape::{DiffTensor, Tape};
use crate::tensor::{ParamSet, Tensor};
use std::path::Path;
use std::rc::Rc;

pub const PATCH: usize = 4;
pub const N_PATCHES: usize = (IMG_H / PATCH) * (IMG_W / PATCH);
pub const PATCH_LEN: usize = PATCH * PATCH * IMG_C;
pub const HIDDEN: usize = 64;
pub const EMBED_D: usize = 32;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ArchKind {
    MeanPool,
    MaxPool,
}

impl ArchKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ArchKind::MeanPool => "mean_pool",
            ArchKind::MaxPool => "max_pool",
        }
    }

    pub fn parse(s: &str) -> Result<ArchKind> {
        match s {
            "mean_pool" => Ok(ArchKind::MeanPool),
            "max_pool" => Ok(ArchKind::MaxPool),
            other => Err(Error::Domain(format!("unknown arch kind {other:?}"))),
        }
    }
}

// Parameter order; leases index into this.
const P_IMG_PATCH: usize = 0;
const P_IMG_POS: usize = 1;
const P_IMG_W1: usize = 2;
const P_IMG_B1: usize = 3;
const P_IMG_W2: usize = 4;
const P_IMG_B2: usize = 5;
const P_IMG_PROJ: usize = 6;
const P_TXT_TABLE: usize = 7;
const P_TXT_W1: usize = 8;
const P_TXT_B1: usize = 9;
const P_TXT_W2: usize = 10;
const P_TXT_B2: usize = 11;
const P_TXT_PROJ: usize = 12;
const PARAM_COUNT: usize = 13;

#[derive(Clone, Debug)]
pub struct DualEncoderModel {
    pub arch: ArchKind,
    pub seed: u64,
    pub params: ParamSet,
    /// Fingerprint of the corpus the model was pre-trained on; empty before
    /// training.
    pub corpus_hash: String,
}

impl DualEncoderModel {
    /// Fresh, untrained parameters. Different (arch, seed) pairs draw from
    /// different streams, so no two zoo members share any values.
    pub fn new(arch: ArchKind, seed: u64) -> Self {
        let mut r = rng::stream(seed, &format!("encoder/init/{}", arch.tag()), 0);
        let mut params = ParamSet::new();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        params.push("img.patch", Tensor::randn(&mut r, PATCH_LEN, HIDDEN, inv(PATCH_LEN)));
        params.push("img.pos", Tensor::randn(&mut r, N_PATCHES, HIDDEN, 0.5));
        params.push("img.w1", Tensor::randn(&mut r, HIDDEN, HIDDEN, inv(HIDDEN)));
        params.push("img.b1", Tensor::zeros(1, HIDDEN));
        params.push("img.w2", Tensor::randn(&mut r, HIDDEN, HIDDEN, inv(HIDDEN)));
        params.push("img.b2", Tensor::zeros(1, HIDDEN));
        params.push("img.proj", Tensor::randn(&mut r, HIDDEN, EMBED_D, inv(HIDDEN)));
        params.push("txt.table", Tensor::randn(&mut r, VOCAB_SIZE as usize, HIDDEN, 1.0));
        params.push("txt.w1", Tensor::randn(&mut r, HIDDEN, HIDDEN, inv(HIDDEN)));
        params.push("txt.b1", Tensor::zeros(1, HIDDEN));
        params.push("txt.w2", Tensor::randn(&mut r, HIDDEN, HIDDEN, inv(HIDDEN)));
        params.push("txt.b2", Tensor::zeros(1, HIDDEN));
        params.push("txt.proj", Tensor::randn(&mut r, HIDDEN, EMBED_D, inv(HIDDEN)));
        debug_assert_eq!(params.len(), PARAM_COUNT);
        DualEncoderModel {
            arch,
            seed,
            params,
            corpus_hash: String::new(),
        }
    }

    /// Puts the parameters on a tape, trainable or frozen, for graph
    /// building via [`LeasedEncoder`].
    pub fn lease(&self, tape: &Rc<Tape>, trainable: bool) -> LeasedEncoder {
        let handles = self
            .params
            .iter()
            .map(|(_, t)| if trainable { tape.leaf(t) } else { tape.constant(t) })
            .collect();
        LeasedEncoder {
            arch: self.arch,
            tape: Rc::clone(tape),
            handles,
        }
    }

    /// Encodes a batch of flat images off-tape. Rows of the result are
    /// unit-norm embeddings.
    pub fn encode_images(&self, images: &[Vec<f64>]) -> Result<Tensor> {
        let tape = Tape::new();
        let lease = self.lease(&tape, false);
        let input = tape.constant(&Tensor::from_rows(images)?);
        Ok(lease.encode_images(&input)?.to_tensor())
    }

    pub fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        Ok(self.encode_images(std::slice::from_ref(&image.to_vec()))?.values().to_vec())
    }

    /// Encodes a batch of token sequences off-tape.
    pub fn encode_texts(&self, captions: &[Vec<u16>]) -> Result<Tensor> {
        let tape = Tape::new();
        let lease = self.lease(&tape, false);
        Ok(lease.encode_texts(captions)?.to_tensor())
    }

    pub fn encode_text(&self, tokens: &[u16]) -> Result<Vec<f64>> {
        Ok(self.encode_texts(std::slice::from_ref(&tokens.to_vec()))?.values().to_vec())
    }

    /// Content hash over architecture tag and parameter bytes; identifies
    /// the exact weights a perturbation was crafted against.
    pub fn param_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.total_len() * 8 + 16);
        bytes.extend_from_slice(self.arch.tag().as_bytes());
        for (name, t) in self.params.iter() {
            bytes.extend_from_slice(name.as_bytes());
            for v in t.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        checkpoint::sha256_hex(&bytes)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let extra = vec![
            ("model.arch_kind".to_owned(), self.arch.tag().to_owned()),
            ("model.d".to_owned(), EMBED_D.to_string()),
            ("model.seed".to_owned(), self.seed.to_string()),
            ("model.corpus_hash".to_owned(), self.corpus_hash.clone()),
        ];
        checkpoint::save(stem, &self.params, &extra)
    }

    pub fn load(stem: &Path) -> Result<DualEncoderModel> {
        let (params, manifest) = checkpoint::load(stem)?;
        let arch = ArchKind::parse(manifest.require("model.arch_kind")?)?;
        let d: usize = manifest.require_parsed("model.d")?;
        if d != EMBED_D {
            return Err(Error::Contract(format!("checkpoint embedding dim {d}, expected {EMBED_D}")));
        }
        if params.len() != PARAM_COUNT {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, expected {PARAM_COUNT}",
                params.len()
            )));
        }
        Ok(DualEncoderModel {
            arch,
            seed: manifest.require_parsed("model.seed")?,
            params,
            corpus_hash: manifest.require("model.corpus_hash")?.to_owned(),
        })
    }

    pub fn load_manifest(stem: &Path) -> Result<Manifest> {
        Manifest::read_file(&checkpoint::manifest_path(stem))
    }
}

/// Flat gather indices mapping a `[batch, 3072]` image block to
/// `[batch*64, 48]` patch rows.
fn patch_indices(batch: usize) -> Rc<Vec<usize>> {
    let mut idx = Vec::with_capacity(batch * N_PATCHES * PATCH_LEN);
    for b in 0..batch {
        let base = b * IMG_LEN;
        for py in 0..IMG_H / PATCH {
            for px in 0..IMG_W / PATCH {
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        for c in 0..IMG_C {
                            let yy = py * PATCH + y;
                            let xx = px * PATCH + x;
                            idx.push(base + (yy * IMG_W + xx) * IMG_C + c);
                        }
                    }
                }
            }
        }
    }
    Rc::new(idx)
}

/// A model's parameters staged on one tape. Graph-building methods take and
/// return tensors on that same tape, so encoder outputs stay differentiable
/// with respect to whatever produced the inputs.
pub struct LeasedEncoder {
    arch: ArchKind,
    tape: Rc<Tape>,
    handles: Vec<DiffTensor>,
}

impl LeasedEncoder {
    fn h(&self, i: usize) -> &DiffTensor {
        &self.handles[i]
    }

    /// `[batch, 3072]` pixels → `[batch, 32]` unit-norm embeddings. Inputs
    /// are clamped to [0,1] first (straight-through at the boundary), so
    /// adversarial images are encoded exactly as a victim would see them.
    pub fn encode_images(&self, images: &DiffTensor) -> Result<DiffTensor> {
        let (batch, cols) = images.dims();
        if cols != IMG_LEN {
            return Err(Error::InvalidShape(format!(
                "image rows must have {IMG_LEN} values, got {cols}"
            )));
        }
        let clamped = images.clamp01_ste();
        let patches = clamped.gather(patch_indices(batch), batch * N_PATCHES, PATCH_LEN)?;
        let embedded = patches.matmul(self.h(P_IMG_PATCH))?;
        // Position table tiles across the batch via explicit row gather.
        let pos_idx: Vec<usize> = (0..batch * N_PATCHES * HIDDEN)
            .map(|i| i % (N_PATCHES * HIDDEN))
            .collect();
        let pos = self
            .h(P_IMG_POS)
            .gather(Rc::new(pos_idx), batch * N_PATCHES, HIDDEN)?;
        let mut x = embedded.add(&pos)?;
        x = x.matmul(self.h(P_IMG_W1))?.add(self.h(P_IMG_B1))?.tanh();
        x = x.matmul(self.h(P_IMG_W2))?.add(self.h(P_IMG_B2))?.tanh();
        let pooled = match self.arch {
            ArchKind::MeanPool => x.mean_groups(N_PATCHES)?,
            ArchKind::MaxPool => x.max_groups(N_PATCHES)?,
        };
        pooled.matmul(self.h(P_IMG_PROJ))?.l2_normalize_rows()
    }

    /// Token sequences → `[batch, 32]` unit-norm embeddings. Every id must
    /// be in-vocabulary and lengths in 1..=8.
    pub fn encode_texts(&self, captions: &[Vec<u16>]) -> Result<DiffTensor> {
        self.encode_texts_ref(&captions.iter().map(|c| c.as_slice()).collect::<Vec<_>>())
    }

    pub fn encode_texts_ref(&self, captions: &[&[u16]]) -> Result<DiffTensor> {
        if captions.is_empty() {
            return Err(Error::InvalidShape("empty caption batch".into()));
        }
        let mut idx = Vec::new();
        let mut offsets = Vec::with_capacity(captions.len() + 1);
        offsets.push(0);
        for cap in captions {
            if cap.is_empty() || cap.len() > 8 {
                return Err(Error::InvalidShape(format!(
                    "caption length {} outside 1..=8",
                    cap.len()
                )));
            }
            for &t in *cap {
                if t as usize >= VOCAB_SIZE {
                    return Err(Error::Domain(format!("token id {t} outside vocabulary")));
                }
                for j in 0..HIDDEN {
                    idx.push(t as usize * HIDDEN + j);
                }
            }
            offsets.push(offsets.last().unwrap() + cap.len());
        }
        let total: usize = *offsets.last().unwrap();
        let rows = self.h(P_TXT_TABLE).gather(Rc::new(idx), total, HIDDEN)?;
        let pooled = rows.mean_segments(Rc::new(offsets))?;
        self.text_head(&pooled)
    }

    /// Applies the text tower above pooling to already-pooled `[batch, 64]`
    /// embedding rows. The adversarial-word generator feeds synthetic rows
    /// through this same head.
    pub fn text_head(&self, pooled: &DiffTensor) -> Result<DiffTensor> {
        let mut x = pooled.matmul(self.h(P_TXT_W1))?.add(self.h(P_TXT_B1))?.tanh();
        x = x.matmul(self.h(P_TXT_W2))?.add(self.h(P_TXT_B2))?.tanh();
        x.matmul(self.h(P_TXT_PROJ))?.l2_normalize_rows()
    }

    /// Token-embedding table rows (the text encoder's input vocabulary),
    /// `[64, 64]`.
    pub fn token_table(&self) -> &DiffTensor {
        self.h(P_TXT_TABLE)
    }

    /// Per-parameter gradients in parameter order, zeros where backward
    /// never reached. Call after `backward` on a loss from this tape.
    pub fn grads(&self, params: &ParamSet) -> Vec<Vec<f64>> {
        self.handles
            .iter()
            .zip(params.ids())
            .map(|(h, id)| h.grad().unwrap_or_else(|| vec![0.0; params.tensor(id).len()]))
            .collect()
    }

    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }
}
