//! Procedural image-caption corpus.
//!
//! Samples pair a rendered 32x32 RGB image with M paraphrased captions, all
//! describing one [`AttributeRecord`] drawn from 256 classes (4 shapes, 4
//! colors, 4 quadrants, 2 sizes, 2 backgrounds). Two domains share the
//! attribute space and vocabulary but render and phrase differently, which
//! gives cross-domain evaluation a real distribution shift.

pub mod io;
pub mod render;
pub mod vocab;

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    NorthWest,
    NorthEast,
    SouthWest,
    SouthEast,
}

impl Position {
    pub const ALL: [Position; 4] = [
        Position::NorthWest,
        Position::NorthEast,
        Position::SouthWest,
        Position::SouthEast,
    ];
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Background {
    Dark,
    Light,
}

impl Background {
    pub const ALL: [Background; 2] = [Background::Dark, Background::Light];
}

/// One of the 256 attribute classes.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct AttributeRecord {
    pub shape: Shape,
    pub color: Color,
    pub position: Position,
    pub size: Size,
    pub background: Background,
}

pub const N_CLASSES: usize = 256;

impl AttributeRecord {
    /// Bijection onto 0..256, used for class-level retrieval ground truth.
    pub fn class_id(&self) -> usize {
        let s = self.shape as usize;
        let c = self.color as usize;
        let p = self.position as usize;
        let z = self.size as usize;
        let b = self.background as usize;
        (((s * 4 + c) * 4 + p) * 2 + z) * 2 + b
    }

    pub fn from_class_id(id: usize) -> Self {
        debug_assert!(id < N_CLASSES);
        let b = id % 2;
        let z = (id / 2) % 2;
        let p = (id / 4) % 4;
        let c = (id / 16) % 4;
        let s = (id / 64) % 4;
        AttributeRecord {
            shape: Shape::ALL[s],
            color: Color::ALL[c],
            position: Position::ALL[p],
            size: Size::ALL[z],
            background: Background::ALL[b],
        }
    }

    fn sample(rng: &mut impl Rng) -> Self {
        AttributeRecord::from_class_id(rng.gen_range(0..N_CLASSES))
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn tag(&self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }

    pub fn parse(s: &str) -> Result<Domain> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(Error::Domain(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PairedSample {
    pub sample_id: usize,
    pub attrs: AttributeRecord,
    /// 32x32x3 row-major pixels in [0,1], already f32-quantized.
    pub image: Vec<f64>,
    /// M token-id sequences, each at most 8 tokens, pairwise distinct.
    pub captions: Vec<Vec<u16>>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub domain: Domain,
    pub seed: u64,
    pub m: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Train samples first, then test; ids are 0..n_train+n_test in order.
    pub samples: Vec<PairedSample>,
}

impl Corpus {
    pub fn train(&self) -> &[PairedSample] {
        &self.samples[..self.n_train]
    }

    pub fn test(&self) -> &[PairedSample] {
        &self.samples[self.n_train..]
    }

    /// Content hash binding models and attack artifacts to the exact data
    /// they were produced from.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.domain.tag().as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update((self.m as u64).to_le_bytes());
        h.update((self.n_train as u64).to_le_bytes());
        h.update((self.n_test as u64).to_le_bytes());
        for s in &self.samples {
            for &v in &s.image {
                h.update((v as f32).to_le_bytes());
            }
            for cap in &s.captions {
                for &t in cap {
                    h.update(t.to_le_bytes());
                }
                h.update([0xff]);
            }
        }
        crate::tensor::checkpoint::hex(&h.finalize())
    }
}

/// Domain B skews synonym choice toward the first synonym of each group;
/// domain A picks uniformly.
fn pick_synonym(rng: &mut impl Rng, domain: Domain) -> usize {
    match domain {
        Domain::A => rng.gen_range(0..vocab::SYNONYMS_PER_GROUP),
        Domain::B => {
            let r: f64 = rng.gen();
            if r < 0.6 {
                0
            } else if r < 0.9 {
                1
            } else {
                2
            }
        }
    }
}

/// M pairwise-distinct captions for one record. Template and synonym draws
/// come from the rng; with 6 templates and 3^5 synonym combinations the
/// retry loop ends almost immediately.
pub fn render_captions(
    attrs: &AttributeRecord,
    m: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    domain: Domain,
) -> Vec<Vec<u16>> {
    assert!(m >= 2, "caption sets must have at least two members");
    let mut captions: Vec<Vec<u16>> = Vec::with_capacity(m);
    while captions.len() < m {
        let tpl = vocab::TEMPLATES[rng.gen_range(0..vocab::TEMPLATES.len())];
        let synonyms = [
            pick_synonym(rng, domain),
            pick_synonym(rng, domain),
            pick_synonym(rng, domain),
            pick_synonym(rng, domain),
            pick_synonym(rng, domain),
        ];
        let cap = vocab::instantiate(tpl, attrs, synonyms);
        if !captions.contains(&cap) {
            captions.push(cap);
        }
    }
    captions
}

/// Builds a corpus in memory. Pure in (n_train, n_test, m, domain, seed);
/// attribute draws ignore the domain so A and B describe the same records.
pub fn generate_corpus(
    n_train: usize,
    n_test: usize,
    m: usize,
    domain: Domain,
    seed: u64,
) -> Result<Corpus> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Contract("corpus splits must be non-empty".into()));
    }
    if m < 2 {
        return Err(Error::Contract(format!("m must be at least 2, got {m}")));
    }
    let total = n_train + n_test;
    let mut samples = Vec::with_capacity(total);
    for sample_id in 0..total {
        let attrs = AttributeRecord::sample(&mut rng::stream(seed, "corpus/attrs", sample_id as u64));
        let mut img_rng = rng::stream(seed, &format!("corpus/image/{}", domain.tag()), sample_id as u64);
        let image = render::render_image(&attrs, &mut img_rng, domain);
        let mut cap_rng = rng::stream(seed, &format!("corpus/captions/{}", domain.tag()), sample_id as u64);
        let captions = render_captions(&attrs, m, &mut cap_rng, domain);
        samples.push(PairedSample {
            sample_id,
            attrs,
            image,
            captions,
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_id_is_a_bijection() {
        for id in 0..N_CLASSES {
            assert_eq!(AttributeRecord::from_class_id(id).class_id(), id);
        }
    }

    #[test]
    fn captions_distinct_and_parse_back() {
        for class in [0usize, 17, 255] {
            let attrs = AttributeRecord::from_class_id(class);
            let mut r = rng::stream(2, "t", class as u64);
            let caps = render_captions(&attrs, 4, &mut r, Domain::A);
            assert_eq!(caps.len(), 4);
            for (i, c) in caps.iter().enumerate() {
                assert!(c.len() <= 8);
                assert_eq!(vocab::parse_caption(c).unwrap(), attrs);
                for later in &caps[i + 1..] {
                    assert_ne!(c, later);
                }
            }
        }
    }

    #[test]
    fn full_attribute_space_covers_vocabulary() {
        let mut seen = [false; vocab::VOCAB_SIZE];
        for class in 0..N_CLASSES {
            let attrs = AttributeRecord::from_class_id(class);
            let mut r = rng::stream(0, "cover", class as u64);
            for cap in render_captions(&attrs, 6, &mut r, Domain::A) {
                for t in cap {
                    seen[t as usize] = true;
                }
            }
        }
        let missing: Vec<usize> = seen
            .iter()
            .enumerate()
            .filter(|(_, s)| !**s)
            .map(|(i, _)| i)
            .collect();
        assert!(missing.is_empty(), "unused token ids: {missing:?}");
    }

    #[test]
    fn corpus_is_pure_and_splits_disjoint() {
        let a = generate_corpus(6, 3, 2, Domain::A, 41).unwrap();
        let b = generate_corpus(6, 3, 2, Domain::A, 41).unwrap();
        assert_eq!(a.samples.len(), 9);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.sample_id, y.sample_id);
            assert_eq!(x.attrs, y.attrs);
            assert_eq!(x.image, y.image);
            assert_eq!(x.captions, y.captions);
        }
        let train_ids: Vec<usize> = a.train().iter().map(|s| s.sample_id).collect();
        let test_ids: Vec<usize> = a.test().iter().map(|s| s.sample_id).collect();
        for id in &test_ids {
            assert!(!train_ids.contains(id));
        }
    }

    #[test]
    fn domains_share_records_not_pixels() {
        let a = generate_corpus(4, 2, 2, Domain::A, 13).unwrap();
        let b = generate_corpus(4, 2, 2, Domain::B, 13).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.attrs, y.attrs);
            assert_ne!(x.image, y.image);
            for (cx, cy) in x.captions.iter().zip(&y.captions) {
                assert_eq!(
                    vocab::parse_caption(cx).unwrap(),
                    vocab::parse_caption(cy).unwrap()
                );
            }
        }
    }

    #[test]
    fn degenerate_arguments_rejected() {
        assert!(generate_corpus(0, 1, 2, Domain::A, 0).is_err());
        assert!(generate_corpus(1, 0, 2, Domain::A, 0).is_err());
        assert!(generate_corpus(1, 1, 1, Domain::A, 0).is_err());
    }
}
