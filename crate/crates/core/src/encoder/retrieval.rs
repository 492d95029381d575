//! Retrieval ranking and recall over the shared embedding space.
//!
//! Ground truth is class-level: the corpus draws 256 attribute classes with
//! replacement, so a gallery usually holds several items equivalent to the
//! query's counterpart. A retrieval counts as correct when any top-k item
//! belongs to the query's attribute class, the same convention multi-caption
//! retrieval benchmarks use.

use crate::corpus::PairedSample;
use crate::encoder::DualEncoderModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Image query, text gallery.
    ImageToText,
    /// Text query, image gallery.
    TextToImage,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    pub fn tag(&self) -> &'static str {
        match self {
            Direction::ImageToText => "image_to_text",
            Direction::TextToImage => "text_to_image",
        }
    }
}

/// Gallery indices ranked by descending cosine similarity to the query;
/// ties break toward the smaller index. Embeddings are unit-norm, so the
/// dot product is the cosine.
pub fn rank_retrieval(query: &[f64], gallery: &Tensor, k: usize) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(Error::Contract("empty gallery".into()));
    }
    if query.len() != gallery.cols() {
        return Err(Error::InvalidShape(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            gallery.cols()
        )));
    }
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    let sims: Vec<f64> = (0..gallery.rows())
        .map(|i| gallery.row(i).iter().zip(query).map(|(a, b)| a * b).sum())
        .collect();
    // Stable sort keeps ascending index on equal similarity.
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).expect("similarities are finite"));
    order.truncate(k);
    Ok(order)
}

/// Batched encoding of sample images, chunked to bound tape size.
pub fn embed_images(model: &DualEncoderModel, images: &[Vec<f64>]) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let t = model.encode_images(chunk)?;
        for i in 0..t.rows() {
            rows.push(t.row(i).to_vec());
        }
    }
    Tensor::from_rows(&rows)
}

pub fn embed_texts(model: &DualEncoderModel, captions: &[Vec<u16>]) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(64) {
        let t = model.encode_texts(chunk)?;
        for i in 0..t.rows() {
            rows.push(t.row(i).to_vec());
        }
    }
    Tensor::from_rows(&rows)
}

/// Class-level recall@k of a model over paired samples, in one direction.
/// The text side of every sample is represented by its first caption.
pub fn recall_at_k(
    model: &DualEncoderModel,
    samples: &[PairedSample],
    k: usize,
    direction: Direction,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract("recall over zero samples".into()));
    }
    let images: Vec<Vec<f64>> = samples.iter().map(|s| s.image.clone()).collect();
    let captions: Vec<Vec<u16>> = samples.iter().map(|s| s.captions[0].clone()).collect();
    let img_emb = embed_images(model, &images)?;
    let txt_emb = embed_texts(model, &captions)?;
    let classes: Vec<usize> = samples.iter().map(|s| s.attrs.class_id()).collect();
    let (queries, gallery) = match direction {
        Direction::ImageToText => (&img_emb, &txt_emb),
        Direction::TextToImage => (&txt_emb, &img_emb),
    };
    let mut hits = 0usize;
    for qi in 0..queries.rows() {
        let top = rank_retrieval(queries.row(qi), gallery, k)?;
        if top.iter().any(|&gi| classes[gi] == classes[qi]) {
            hits += 1;
        }
    }
    Ok(hits as f64 / queries.rows() as f64)
}
