//! Universal-perturbation training: scale/noise augmentation, farthest
//! selection, the malicious contrastive objective, and the training loops
//! that fit both generator branches against a frozen surrogate encoder.
//!
//! The objective pushes adversarial anchors away from their matched
//! ("negative") embeddings and pulls them toward deliberately mismatched
//! ("positive") ones, plus a weighted term that spreads adversarial
//! embeddings away from clean ones wholesale.

pub mod train;

pub use train::{
    apply_uap, random_baseline, train_gap_baseline, train_gap_baseline_with, train_image_uap,
    train_image_uap_with, train_joint_uap, train_text_uap, train_text_uap_with, word_importance,
    AdversarialPair, AttackContext, JointUap, TrainedUap, REFERENCE_RESERVE,
};

use crate::error::{Error, Result};
use crate::kv::{self, Manifest};
use crate::rng;
use crate::tensor::tape::{DiffTensor, ResizePlan, Tape};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;
use std::rc::Rc;

use crate::corpus::render::{IMG_C, IMG_H, IMG_LEN, IMG_W};

pub const DEFAULT_SCALES: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

/// How the anchor set is formed each iteration: perturb the clean image and
/// augment the sum (the procedure as stated), or augment first and add the
/// perturbation to each scaled copy (the alternative reading, kept for
/// comparison).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AugmentOrder {
    PerturbThenAugment,
    AugmentThenPerturb,
}

impl AugmentOrder {
    pub fn tag(self) -> &'static str {
        match self {
            AugmentOrder::PerturbThenAugment => "perturb_then_augment",
            AugmentOrder::AugmentThenPerturb => "augment_then_perturb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "perturb_then_augment" => Ok(AugmentOrder::PerturbThenAugment),
            "augment_then_perturb" => Ok(AugmentOrder::AugmentThenPerturb),
            other => Err(Error::Parse {
                path: "<config>".into(),
                line: 0,
                msg: format!("unknown augment order {other:?}"),
            }),
        }
    }
}

/// The alignment-breaking half of the objective. InfoNce is the standard
/// objective; the other two swap it for plain similarity suppression of
/// matched pairs, for loss-function comparisons.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LossKind {
    InfoNce,
    MaxMse,
    MaxCos,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::InfoNce => "info_nce",
            LossKind::MaxMse => "max_mse",
            LossKind::MaxCos => "max_cos",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "info_nce" => Ok(LossKind::InfoNce),
            "max_mse" => Ok(LossKind::MaxMse),
            "max_cos" => Ok(LossKind::MaxCos),
            other => Err(Error::Parse {
                path: "<config>".into(),
                line: 0,
                msg: format!("unknown loss kind {other:?}"),
            }),
        }
    }
}

/// Contrastive-positive picking: farthest-by-embedding-distance, or a
/// uniform random candidate (the selection-strategy ablation).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PositiveSelection {
    Farthest,
    Random,
}

impl PositiveSelection {
    pub fn tag(self) -> &'static str {
        match self {
            PositiveSelection::Farthest => "farthest",
            PositiveSelection::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "farthest" => Ok(PositiveSelection::Farthest),
            "random" => Ok(PositiveSelection::Random),
            other => Err(Error::Parse {
                path: "<config>".into(),
                line: 0,
                msg: format!("unknown positive selection {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    /// L-infinity image budget.
    pub epsilon_v: f64,
    /// Maximum substituted tokens per caption; fixed at 1.
    pub epsilon_t: usize,
    /// Augmentation scales; the anchor set size N is their count.
    pub scales: Vec<f64>,
    /// Std of the Gaussian pixel noise added after rescaling.
    pub noise_sigma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the embedding-spread term.
    pub lambda: f64,
    /// Positive captions taken from the selected farthest set.
    pub k_positives: usize,
    /// Candidate sets sampled for each farthest selection.
    pub candidate_batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment_order: AugmentOrder,
    pub loss_kind: LossKind,
    pub positive_selection: PositiveSelection,
    /// When false the contrastive term is dropped (spread term only).
    pub use_contrastive: bool,
    /// When false the generator is built without cross-modal conditioning.
    pub with_attention: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon_v: 12.0 / 255.0,
            epsilon_t: 1,
            scales: DEFAULT_SCALES.to_vec(),
            noise_sigma: 0.5,
            tau: 0.1,
            lambda: 0.1,
            k_positives: 3,
            candidate_batch: 8,
            epochs: 40,
            lr: 2e-4,
            seed: 0,
            augment_order: AugmentOrder::PerturbThenAugment,
            loss_kind: LossKind::InfoNce,
            positive_selection: PositiveSelection::Farthest,
            use_contrastive: true,
            with_attention: true,
        }
    }
}

impl AttackConfig {
    /// Short-run preset sized for a 2000-pair corpus on one core.
    pub fn desk(seed: u64) -> Self {
        AttackConfig {
            epochs: 3,
            seed,
            ..AttackConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_v > 0.0) {
            return Err(Error::Contract("epsilon_v must be positive".into()));
        }
        if self.epsilon_t != 1 {
            return Err(Error::Contract("epsilon_t is fixed at 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Contract("tau must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Contract("lambda must be non-negative".into()));
        }
        if self.scales.len() != 5 {
            return Err(Error::Contract(format!(
                "exactly 5 augmentation scales required, got {}",
                self.scales.len()
            )));
        }
        if self.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Contract("scales must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Contract("noise_sigma must be non-negative".into()));
        }
        if self.k_positives < 1 {
            return Err(Error::Contract("k_positives must be at least 1".into()));
        }
        if self.candidate_batch < 2 {
            return Err(Error::Contract("candidate_batch must be at least 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Contract("epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Contract("lr must be positive".into()));
        }
        Ok(())
    }

    /// Ordered key/value view; the same pairs round-trip through config
    /// files and artifact provenance snapshots.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let scales = self
            .scales
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("epsilon_v".into(), self.epsilon_v.to_string()),
            ("epsilon_t".into(), self.epsilon_t.to_string()),
            ("scales".into(), scales),
            ("noise_sigma".into(), self.noise_sigma.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("k_positives".into(), self.k_positives.to_string()),
            ("candidate_batch".into(), self.candidate_batch.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("augment_order".into(), self.augment_order.tag().into()),
            ("loss_kind".into(), self.loss_kind.tag().into()),
            ("positive_selection".into(), self.positive_selection.tag().into()),
            ("use_contrastive".into(), self.use_contrastive.to_string()),
            ("with_attention".into(), self.with_attention.to_string()),
        ]
    }

    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let scales = manifest
            .require("attack.scales")?
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: "<config>".into(),
                    line: 0,
                    msg: format!("bad scale {s:?}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let cfg = AttackConfig {
            epsilon_v: manifest.require_parsed("attack.epsilon_v")?,
            epsilon_t: manifest.require_parsed("attack.epsilon_t")?,
            scales,
            noise_sigma: manifest.require_parsed("attack.noise_sigma")?,
            tau: manifest.require_parsed("attack.tau")?,
            lambda: manifest.require_parsed("attack.lambda")?,
            k_positives: manifest.require_parsed("attack.k_positives")?,
            candidate_batch: manifest.require_parsed("attack.candidate_batch")?,
            epochs: manifest.require_parsed("attack.epochs")?,
            lr: manifest.require_parsed("attack.lr")?,
            seed: manifest.require_parsed("attack.seed")?,
            augment_order: AugmentOrder::parse(manifest.require("attack.augment_order")?)?,
            loss_kind: LossKind::parse(manifest.require("attack.loss_kind")?)?,
            positive_selection: PositiveSelection::parse(
                manifest.require("attack.positive_selection")?,
            )?,
            use_contrastive: manifest.require_parsed("attack.use_contrastive")?,
            with_attention: manifest.require_parsed("attack.with_attention")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_manifest(&Manifest::read_file(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let pairs: Vec<(String, String)> = self
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("attack.{k}"), v))
            .collect();
        kv::write_file(path, &pairs)
    }
}

/// Precomputed down/up bilinear plans for one scale list.
pub struct AugmentPlans {
    pairs: Vec<(Rc<ResizePlan>, Rc<ResizePlan>)>,
}

impl AugmentPlans {
    pub fn new(scales: &[f64]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(scales.len());
        for &s in scales {
            let h = (IMG_H as f64 * s).round() as usize;
            let w = (IMG_W as f64 * s).round() as usize;
            if h == 0 || w == 0 {
                return Err(Error::Contract(format!("scale {s} collapses the image")));
            }
            pairs.push((
                Rc::new(ResizePlan::bilinear(IMG_H, IMG_W, h, w, IMG_C)?),
                Rc::new(ResizePlan::bilinear(h, w, IMG_H, IMG_W, IMG_C)?),
            ));
        }
        Ok(AugmentPlans { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn gaussian_noise(rng: &mut ChaCha8Rng, sigma: f64, len: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Rescale to each plan's size and back, add pixel noise, optionally clamp
/// to [0,1]. The unclamped form exists so noise statistics stay measurable.
pub fn augment_with_plans(
    image: &[f64],
    plans: &AugmentPlans,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
    clamp: bool,
) -> Result<Vec<Vec<f64>>> {
    if image.len() != IMG_LEN {
        return Err(Error::InvalidShape(format!(
            "image has {} values, expected {IMG_LEN}",
            image.len()
        )));
    }
    let mut out = Vec::with_capacity(plans.pairs.len());
    for (down, up) in &plans.pairs {
        let small = down.apply(image);
        let mut big = up.apply(&small);
        for (v, n) in big.iter_mut().zip(gaussian_noise(rng, noise_sigma, IMG_LEN)) {
            *v += n;
            if clamp {
                *v = v.clamp(0.0, 1.0);
            }
        }
        out.push(big);
    }
    Ok(out)
}

/// One augmented set from a fresh seeded stream.
pub fn augment_image_set(
    image: &[f64],
    scales: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let plans = AugmentPlans::new(scales)?;
    let mut rng = rng::stream(seed, "augment", 0);
    augment_with_plans(image, &plans, noise_sigma, &mut rng, true)
}

/// On-tape mirror of [`augment_with_plans`] for the adversarial branch;
/// noise enters as constants, the clamp passes gradients straight through.
pub fn augment_on_tape(
    tape: &Rc<Tape>,
    image: &DiffTensor,
    plans: &AugmentPlans,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DiffTensor> {
    let mut parts = Vec::with_capacity(plans.pairs.len());
    for (down, up) in &plans.pairs {
        let scaled = image.resize(Rc::clone(down))?.resize(Rc::clone(up))?;
        let noise = Tensor::new(1, IMG_LEN, gaussian_noise(rng, noise_sigma, IMG_LEN))?;
        parts.push(scaled.add(&tape.constant(&noise))?.clamp01_ste());
    }
    tape.concat_rows(&parts)
}

/// Mean Euclidean distance from `point` to the rows of `set`.
pub fn mean_distance_to_set(point: &[f64], set: &Tensor) -> Result<f64> {
    if set.rows() == 0 || set.cols() != point.len() {
        return Err(Error::InvalidShape(format!(
            "set is {}x{}, point has {} dims",
            set.rows(),
            set.cols(),
            point.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..set.rows() {
        total += set
            .row(i)
            .iter()
            .zip(point)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / set.rows() as f64)
}

/// A candidate contrastive set: caption embeddings of one corpus sample.
pub struct CandidateSet<'a> {
    pub sample_index: usize,
    /// `[m, d]` caption embeddings.
    pub embeddings: &'a Tensor,
}

pub struct FarthestPick {
    /// Position within the candidate slice.
    pub winner: usize,
    pub sample_index: usize,
    /// Captions actually available, `min(k, m)`; fewer than `k` means the
    /// pick was truncated.
    pub taken: usize,
}

/// The candidate whose captions lie farthest (mean Euclidean embedding
/// distance) from the query image embedding; ties break toward the lowest
/// candidate position.
pub fn select_farthest_texts(
    image_embedding: &[f64],
    candidates: &[CandidateSet],
    matched_sample: usize,
    k: usize,
) -> Result<FarthestPick> {
    if candidates.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 candidate sets, got {}",
            candidates.len()
        )));
    }
    if k < 1 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    for (pos, cand) in candidates.iter().enumerate() {
        if cand.sample_index == matched_sample {
            return Err(Error::Contract(
                "candidate pool contains the matched text set".into(),
            ));
        }
        let d = mean_distance_to_set(image_embedding, cand.embeddings)?;
        if best.map_or(true, |(b, _)| d > b) {
            best = Some((d, pos));
        }
    }
    let (_, winner) = best.expect("candidates verified non-empty");
    Ok(FarthestPick {
        winner,
        sample_index: candidates[winner].sample_index,
        taken: k.min(candidates[winner].embeddings.rows()),
    })
}

/// Mirror of [`select_farthest_texts`] for the text side: the candidate
/// image embedding farthest on average from the caption-set rows.
pub fn select_farthest_image(
    text_embeddings: &Tensor,
    candidates: &[(usize, &[f64])],
    matched_sample: usize,
) -> Result<usize> {
    if candidates.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 candidate images, got {}",
            candidates.len()
        )));
    }
    let mut best: Option<(f64, usize)> = None;
    for (pos, (idx, emb)) in candidates.iter().enumerate() {
        if *idx == matched_sample {
            return Err(Error::Contract(
                "candidate pool contains the matched image".into(),
            ));
        }
        let d = mean_distance_to_set(emb, text_embeddings)?;
        if best.map_or(true, |(b, _)| d > b) {
            best = Some((d, pos));
        }
    }
    Ok(best.expect("candidates verified non-empty").1)
}

fn check_embedding_sets(a: &DiffTensor, b: &DiffTensor, what: &str) -> Result<()> {
    let ((ar, ac), (br, bc)) = (a.dims(), b.dims());
    if ar == 0 || br == 0 {
        return Err(Error::Contract(format!("empty {what} set")));
    }
    if ac != bc {
        return Err(Error::InvalidShape(format!(
            "{what} dims disagree: {ac} vs {bc}"
        )));
    }
    Ok(())
}

/// log[ S_neg / (S_neg + S_pos) ] with S = sum of exp(cos/tau) over all
/// anchor x set pairs. Always negative; minimizing drives anchors away from
/// negatives and toward positives. Rows must be unit-norm so the dot
/// product is the cosine.
pub fn contrastive_loss(
    anchors: &DiffTensor,
    negatives: &DiffTensor,
    positives: &DiffTensor,
    tau: f64,
) -> Result<DiffTensor> {
    if !(tau > 0.0) {
        return Err(Error::Contract("tau must be positive".into()));
    }
    check_embedding_sets(anchors, negatives, "negative")?;
    check_embedding_sets(anchors, positives, "positive")?;
    let s_neg = anchors
        .matmul(&negatives.transpose())?
        .scale(1.0 / tau)
        .exp()
        .sum_all();
    let s_pos = anchors
        .matmul(&positives.transpose())?
        .scale(1.0 / tau)
        .exp()
        .sum_all();
    s_neg.div(&s_neg.add(&s_pos)?)?.log()
}

/// Pairwise squared Euclidean distances between row sets, `[N, M]`.
fn pairwise_sq_dist(a: &DiffTensor, b: &DiffTensor) -> Result<DiffTensor> {
    let d = a.dims().1;
    let tape = Rc::clone(a.tape());
    let ones = tape.constant(&Tensor::filled(d, 1, 1.0));
    let sq_a = a.mul(a)?.matmul(&ones)?;
    let sq_b = b.mul(b)?.matmul(&ones)?.transpose();
    let cross = a.matmul(&b.transpose())?.scale(-2.0);
    sq_a.add(&sq_b)?.add(&cross)
}

/// Negative sum of all N x M cross-pair Euclidean distances between the
/// adversarial and clean embedding sets. Minimizing spreads adversarial
/// embeddings away from every clean one.
pub fn distance_loss(adv: &DiffTensor, clean: &DiffTensor) -> Result<DiffTensor> {
    check_embedding_sets(adv, clean, "embedding")?;
    Ok(pairwise_sq_dist(adv, clean)?.sqrt_clamped().sum_all().neg())
}

/// Mean similarity-suppression alternatives to the contrastive term; both
/// ignore positives and act on matched (negative) pairs only.
pub fn alternative_loss(
    kind: LossKind,
    anchors: &DiffTensor,
    matched: &DiffTensor,
) -> Result<DiffTensor> {
    check_embedding_sets(anchors, matched, "matched")?;
    match kind {
        LossKind::InfoNce => Err(Error::Contract(
            "info_nce is handled by contrastive_loss".into(),
        )),
        // Maximize mean squared embedding error of matched pairs.
        LossKind::MaxMse => Ok(pairwise_sq_dist(anchors, matched)?.mean_all().neg()),
        // Minimize mean cosine of matched pairs (rows unit-norm).
        LossKind::MaxCos => Ok(anchors.matmul(&matched.transpose())?.mean_all()),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TraceRow {
    pub epoch: usize,
    pub iteration: usize,
    pub l_cl: f64,
    pub l_dis: f64,
    pub total: f64,
}

/// Per-iteration loss record for one training run.
#[derive(Clone, Debug, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
    /// Farthest picks that had fewer than k captions available.
    pub truncated_picks: usize,
}

impl LossTrace {
    pub fn mean_epoch_total(&self, epoch: usize) -> Option<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for r in self.rows.iter().filter(|r| r.epoch == epoch) {
            sum += r.total;
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }

    pub fn epochs(&self) -> usize {
        self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,iteration,l_cl,l_dis,total\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.iteration, r.l_cl, r.l_dis, r.total
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
