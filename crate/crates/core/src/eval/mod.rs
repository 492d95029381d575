//! Attack evaluation: success rates over retrieval, alignment-distance
//! shifts, transfer across victim models, ablation retraining, input
//! defenses, and deterministic CSV reports.
//!
//! Protocol notes. Adversarial test inputs are crafted once with the
//! surrogate (the attacker's only model): word positions come from surrogate
//! importance scores, then every target sees the same perturbed inputs.
//! Defenses preprocess every image an evaluation encodes — clean and
//! adversarial alike — so the defended clean recall is the baseline the
//! attack is measured against.

pub mod defense;

use crate::attack::train::{train_joint_uap, JointUap};
use crate::attack::{apply_uap, AttackConfig, PositiveSelection};
use crate::corpus::{Corpus, Domain, PairedSample};
use crate::encoder::pretrain::ModelZoo;
use crate::encoder::retrieval::{embed_images, embed_texts, rank_retrieval, Direction};
use crate::encoder::DualEncoderModel;
use crate::error::{Error, Result};
use crate::generator::artifact::UapArtifact;
use crate::tensor::Tensor;
use defense::{apply_defense, DefenseKind};
use std::fmt::Write as _;
use std::time::Instant;

/// Retrieval task under attack: TR ranks the text gallery for image
/// queries, IR ranks the image gallery for text queries.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    TextRetrieval,
    ImageRetrieval,
}

impl Task {
    pub const BOTH: [Task; 2] = [Task::TextRetrieval, Task::ImageRetrieval];

    pub fn tag(self) -> &'static str {
        match self {
            Task::TextRetrieval => "TR",
            Task::ImageRetrieval => "IR",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "TR" | "tr" => Ok(Task::TextRetrieval),
            "IR" | "ir" => Ok(Task::ImageRetrieval),
            other => Err(Error::Parse {
                path: "<task>".into(),
                line: 0,
                msg: format!("unknown task {other:?}"),
            }),
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            Task::TextRetrieval => Direction::ImageToText,
            Task::ImageRetrieval => Direction::TextToImage,
        }
    }
}

/// Which modality carries the perturbation at evaluation time. Joint applies
/// both sides everywhere they appear (queries and galleries), the single-
/// modality modes leave the other side clean.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PerturbMode {
    Joint,
    ImageOnly,
    TextOnly,
}

impl PerturbMode {
    pub fn tag(self) -> &'static str {
        match self {
            PerturbMode::Joint => "joint",
            PerturbMode::ImageOnly => "image_only",
            PerturbMode::TextOnly => "text_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(PerturbMode::Joint),
            "image_only" => Ok(PerturbMode::ImageOnly),
            "text_only" => Ok(PerturbMode::TextOnly),
            other => Err(Error::Parse {
                path: "<mode>".into(),
                line: 0,
                msg: format!("unknown perturbation mode {other:?}"),
            }),
        }
    }

    fn images(self) -> bool {
        self != PerturbMode::TextOnly
    }

    fn texts(self) -> bool {
        self != PerturbMode::ImageOnly
    }
}

/// The perturbed test split, crafted once against one model. Captions are
/// represented by each sample's first caption, the same convention the
/// recall metric uses.
pub struct AdversarialTestSet {
    /// Per sample: clamp(image + delta_v, 0, 1).
    pub images: Vec<Vec<f64>>,
    /// Per sample: first caption with its importance-argmax token replaced.
    pub captions: Vec<Vec<u16>>,
    /// Substitutions whose chosen position already held the word.
    pub degenerate_substitutions: usize,
}

/// Applies the artifact to every test sample using `crafter` for word
/// positions. Transfer evaluation passes the surrogate here, never the
/// target: a black-box attacker cannot score importance on the victim.
pub fn craft_adversarial_set(
    samples: &[PairedSample],
    artifact: &UapArtifact,
    crafter: &DualEncoderModel,
) -> Result<AdversarialTestSet> {
    if samples.is_empty() {
        return Err(Error::Contract("empty test split".into()));
    }
    let mut images = Vec::with_capacity(samples.len());
    let mut captions = Vec::with_capacity(samples.len());
    let mut degenerate = 0;
    for s in samples {
        let pair = apply_uap(s, artifact, crafter)?;
        degenerate += pair.degenerate_substitutions;
        images.push(pair.image);
        captions.push(pair.captions.into_iter().next().expect("captions nonempty"));
    }
    Ok(AdversarialTestSet { images, captions, degenerate_substitutions: degenerate })
}

/// Clean and adversarial embeddings of one test split under one target
/// model, with the perturbation mode and defense already folded in.
pub struct EmbeddingSets {
    pub clean_images: Tensor,
    pub adv_images: Tensor,
    pub clean_texts: Tensor,
    pub adv_texts: Tensor,
    /// Attribute class per sample; ground truth for retrieval correctness.
    pub classes: Vec<usize>,
}

fn defended(images: &[Vec<f64>], defense: Option<DefenseKind>) -> Result<Vec<Vec<f64>>> {
    match defense {
        None => Ok(images.to_vec()),
        Some(kind) => images.iter().map(|img| apply_defense(img, kind)).collect(),
    }
}

/// Embeds all four input sets under one model. With a defense active every
/// image passes through it before encoding.
pub fn embed_eval_sets(
    model: &DualEncoderModel,
    samples: &[PairedSample],
    adv: &AdversarialTestSet,
    mode: PerturbMode,
    defense: Option<DefenseKind>,
) -> Result<EmbeddingSets> {
    if samples.len() != adv.images.len() {
        return Err(Error::Contract(format!(
            "adversarial set covers {} samples, split has {}",
            adv.images.len(),
            samples.len()
        )));
    }
    let clean_images: Vec<Vec<f64>> = samples.iter().map(|s| s.image.clone()).collect();
    let clean_captions: Vec<Vec<u16>> = samples.iter().map(|s| s.captions[0].clone()).collect();

    let clean_img_emb = embed_images(model, &defended(&clean_images, defense)?)?;
    let adv_img_emb = if mode.images() {
        embed_images(model, &defended(&adv.images, defense)?)?
    } else {
        clean_img_emb.clone()
    };
    let clean_txt_emb = embed_texts(model, &clean_captions)?;
    let adv_txt_emb = if mode.texts() {
        embed_texts(model, &adv.captions)?
    } else {
        clean_txt_emb.clone()
    };
    Ok(EmbeddingSets {
        clean_images: clean_img_emb,
        adv_images: adv_img_emb,
        clean_texts: clean_txt_emb,
        adv_texts: adv_txt_emb,
        classes: samples.iter().map(|s| s.attrs.class_id()).collect(),
    })
}

#[derive(Copy, Clone, Debug)]
pub struct AsrOutcome {
    /// Fraction of initially correct retrievals broken by the perturbation.
    pub asr: f64,
    /// Fraction of pairs correct before the attack (defended if applicable).
    pub clean_recall: f64,
    /// Fraction of pairs correct after the attack.
    pub adv_recall: f64,
    pub initially_correct: usize,
    pub samples: usize,
}

/// Success rate at one cutoff: a pair counts when its clean top-k held an
/// item of the query's class and its adversarial top-k holds none.
pub fn asr_at(sets: &EmbeddingSets, task: Task, k: usize) -> Result<AsrOutcome> {
    if k == 0 {
        return Err(Error::Contract("k must be positive".into()));
    }
    let (clean_q, clean_g, adv_q, adv_g) = match task {
        Task::TextRetrieval => {
            (&sets.clean_images, &sets.clean_texts, &sets.adv_images, &sets.adv_texts)
        }
        Task::ImageRetrieval => {
            (&sets.clean_texts, &sets.clean_images, &sets.adv_texts, &sets.adv_images)
        }
    };
    let n = sets.classes.len();
    let hit = |q: &Tensor, g: &Tensor, i: usize| -> Result<bool> {
        let top = rank_retrieval(q.row(i), g, k)?;
        Ok(top.iter().any(|&gi| sets.classes[gi] == sets.classes[i]))
    };
    let mut initially_correct = 0;
    let mut still_correct = 0;
    let mut broken = 0;
    for i in 0..n {
        let adv_hit = hit(adv_q, adv_g, i)?;
        if adv_hit {
            still_correct += 1;
        }
        if hit(clean_q, clean_g, i)? {
            initially_correct += 1;
            if !adv_hit {
                broken += 1;
            }
        }
    }
    if initially_correct == 0 {
        return Err(Error::UndefinedAsr(format!(
            "no initially correct {} pairs at k={k}",
            task.tag()
        )));
    }
    Ok(AsrOutcome {
        asr: broken as f64 / initially_correct as f64,
        clean_recall: initially_correct as f64 / n as f64,
        adv_recall: still_correct as f64 / n as f64,
        initially_correct,
        samples: n,
    })
}

/// Single-model success rate; crafts the adversarial split with the same
/// model it evaluates (white-box semantics).
pub fn attack_success_rate(
    model: &DualEncoderModel,
    samples: &[PairedSample],
    artifact: &UapArtifact,
    k: usize,
    task: Task,
    mode: PerturbMode,
    defense: Option<DefenseKind>,
) -> Result<AsrOutcome> {
    let adv = craft_adversarial_set(samples, artifact, model)?;
    let sets = embed_eval_sets(model, samples, &adv, mode, defense)?;
    asr_at(&sets, task, k)
}

#[derive(Copy, Clone, Debug)]
pub struct DrelOutcome {
    /// Mean relative change of matched-pair embedding distance; positive
    /// values mean the attack pushed pairs apart.
    pub mean: f64,
    pub used: usize,
    /// Pairs skipped for a degenerate (≤ 1e-8) clean distance.
    pub skipped: usize,
}

fn row_distance(a: &Tensor, b: &Tensor, i: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(i))
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean over pairs of (adversarial distance - clean distance) / clean
/// distance, between each image and its first caption.
pub fn relative_distance_from(sets: &EmbeddingSets) -> Result<DrelOutcome> {
    let n = sets.classes.len();
    let mut sum = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for i in 0..n {
        let clean = row_distance(&sets.clean_images, &sets.clean_texts, i);
        if clean <= 1e-8 {
            skipped += 1;
            continue;
        }
        let adv = row_distance(&sets.adv_images, &sets.adv_texts, i);
        sum += (adv - clean) / clean;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Contract("every pair had a degenerate clean distance".into()));
    }
    Ok(DrelOutcome { mean: sum / used as f64, used, skipped })
}

pub fn relative_distance(
    model: &DualEncoderModel,
    samples: &[PairedSample],
    artifact: &UapArtifact,
    mode: PerturbMode,
    defense: Option<DefenseKind>,
) -> Result<DrelOutcome> {
    let adv = craft_adversarial_set(samples, artifact, model)?;
    let sets = embed_eval_sets(model, samples, &adv, mode, defense)?;
    relative_distance_from(&sets)
}

/// Training-recipe flags an artifact carries in its config snapshot; rows
/// produced from that artifact inherit them.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub no_cl: bool,
    pub no_dis: bool,
    pub random_positives: bool,
    pub no_cross_attention: bool,
}

impl AblationFlags {
    pub fn from_artifact(artifact: &UapArtifact) -> Self {
        let get = |key: &str| -> Option<&str> {
            artifact.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
        };
        AblationFlags {
            no_cl: get("use_contrastive") == Some("false"),
            no_dis: get("lambda").and_then(|v| v.parse::<f64>().ok()) == Some(0.0),
            random_positives: get("positive_selection") == Some("random"),
            no_cross_attention: get("with_attention") == Some("false"),
        }
    }
}

/// One evaluated (target, task, k) cell.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub surrogate: String,
    pub target: String,
    pub task: Task,
    pub k: usize,
    pub clean_recall: f64,
    pub adv_recall: f64,
    pub asr: f64,
    pub d_rel: f64,
    pub defense: Option<DefenseKind>,
    pub flags: AblationFlags,
    /// "A->A", "A->B", ...: training domain to evaluation domain.
    pub domain_pair: String,
    pub samples: usize,
    /// Wall time of this row's target evaluation. Shown in tables, excluded
    /// from CSV so identical runs serialize byte-identically.
    pub runtime_seconds: f64,
}

pub const CSV_HEADER: &str = "surrogate,target,task,k,clean_recall,adv_recall,asr,d_rel,\
defense,no_cl,no_dis,random_positives,no_cross_attention,domain_pair,samples";

impl EvalReport {
    pub fn is_white_box(&self) -> bool {
        self.surrogate == self.target
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.surrogate,
            self.target,
            self.task.tag(),
            self.k,
            self.clean_recall,
            self.adv_recall,
            self.asr,
            self.d_rel,
            self.defense.map_or("none", |d| d.tag()),
            self.flags.no_cl,
            self.flags.no_dis,
            self.flags.random_positives,
            self.flags.no_cross_attention,
            self.domain_pair,
            self.samples,
        )
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Fixed-width console table; unlike the CSV it includes runtimes.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<4} {:>3} {:>7} {:>7} {:>7} {:>8} {:<16} {:>7}",
        "target", "task", "k", "clean", "adv", "asr", "d_rel", "defense", "time_s"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<16} {:<4} {:>3} {:>7.3} {:>7.3} {:>7.3} {:>8.4} {:<16} {:>7.1}",
            r.target,
            r.task.tag(),
            r.k,
            r.clean_recall,
            r.adv_recall,
            r.asr,
            r.d_rel,
            r.defense.map_or("none", |d| d.tag()),
            r.runtime_seconds,
        );
    }
    out
}

/// Standalone SVG bar chart of ASR per target for one (task, k) slice.
pub fn render_asr_chart(reports: &[EvalReport], task: Task, k: usize) -> String {
    let rows: Vec<&EvalReport> =
        reports.iter().filter(|r| r.task == task && r.k == k).collect();
    let bar_w = 90;
    let gap = 30;
    let plot_h = 220.0;
    let width = 60 + rows.len().max(1) * (bar_w + gap);
    let height = 300;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
    );
    let _ = write!(
        svg,
        r#"<text x="10" y="20">ASR@{k} {} per target</text>"#,
        task.tag()
    );
    for (i, r) in rows.iter().enumerate() {
        let h = r.asr.clamp(0.0, 1.0) * plot_h;
        let x = 40 + i * (bar_w + gap);
        let y = 40.0 + plot_h - h;
        let fill = if r.is_white_box() { "#c44" } else { "#48a" };
        let _ = write!(
            svg,
            r#"<rect x="{x}" y="{y:.1}" width="{bar_w}" height="{h:.1}" fill="{fill}"/>"#
        );
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{:.1}">{:.3}</text>"#,
            y - 6.0,
            r.asr
        );
        let _ = write!(
            svg,
            r#"<text x="{x}" y="{}">{}</text>"#,
            40.0 + plot_h + 16.0,
            r.target
        );
    }
    svg.push_str("</svg>");
    svg
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub mode: PerturbMode,
    pub defense: Option<DefenseKind>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { ks: vec![1, 5, 10], mode: PerturbMode::Joint, defense: None }
    }
}

/// Evaluates one artifact over every zoo member on a corpus's test split:
/// one report per (target, task, k), sorted by those keys, the surrogate's
/// own row serving as the white-box measurement. Evaluating on a corpus
/// whose domain differs from `train_domain` is the cross-domain protocol;
/// rows carry the pair either way.
pub fn evaluate_transfer(
    zoo: &ModelZoo,
    artifact: &UapArtifact,
    corpus: &Corpus,
    train_domain: Domain,
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    let surrogate = zoo.surrogate();
    if !artifact.surrogate_hash.is_empty() && artifact.surrogate_hash != surrogate.param_hash() {
        return Err(Error::Contract(
            "artifact was not trained against this zoo's surrogate".into(),
        ));
    }
    let samples = corpus.test();
    let adv = craft_adversarial_set(samples, artifact, surrogate)?;
    let flags = AblationFlags::from_artifact(artifact);
    let domain_pair = format!("{}->{}", train_domain.tag(), corpus.domain.tag());
    let surrogate_name = ModelZoo::member_name(surrogate);

    let mut reports = Vec::new();
    for target in &zoo.members {
        let started = Instant::now();
        let sets = embed_eval_sets(target, samples, &adv, opts.mode, opts.defense)?;
        let d_rel = relative_distance_from(&sets)?.mean;
        let mut rows = Vec::new();
        for task in Task::BOTH {
            for &k in &opts.ks {
                let outcome = asr_at(&sets, task, k)?;
                rows.push(EvalReport {
                    surrogate: surrogate_name.clone(),
                    target: ModelZoo::member_name(target),
                    task,
                    k,
                    clean_recall: outcome.clean_recall,
                    adv_recall: outcome.adv_recall,
                    asr: outcome.asr,
                    d_rel,
                    defense: opts.defense,
                    flags,
                    domain_pair: domain_pair.clone(),
                    samples: outcome.samples,
                    runtime_seconds: 0.0,
                });
            }
        }
        let elapsed = started.elapsed().as_secs_f64();
        for r in &mut rows {
            r.runtime_seconds = elapsed;
        }
        reports.extend(rows);
    }
    reports.sort_by(|a, b| {
        a.target.cmp(&b.target).then(a.task.cmp(&b.task)).then(a.k.cmp(&b.k))
    });
    Ok(reports)
}

/// Training-recipe variants for component-removal studies.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    /// Drop the contrastive term; only the embedding-spread term trains.
    NoCl,
    /// Drop the spread term (lambda = 0).
    NoDis,
    /// Replace farthest-positive selection with a uniform pick.
    RandomPositives,
    /// Remove the conditioning block; the generator ignores conditions.
    NoCrossAttention,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoCl,
        AblationVariant::NoDis,
        AblationVariant::RandomPositives,
        AblationVariant::NoCrossAttention,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoCl => "no_cl",
            AblationVariant::NoDis => "no_dis",
            AblationVariant::RandomPositives => "random_positives",
            AblationVariant::NoCrossAttention => "no_cross_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "no_cl" => Ok(AblationVariant::NoCl),
            "no_dis" => Ok(AblationVariant::NoDis),
            "random_positives" => Ok(AblationVariant::RandomPositives),
            "no_cross_attention" => Ok(AblationVariant::NoCrossAttention),
            other => Err(Error::Parse {
                path: "<variant>".into(),
                line: 0,
                msg: format!("unknown ablation variant {other:?}"),
            }),
        }
    }

    pub fn configure(self, base: &AttackConfig) -> AttackConfig {
        let mut cfg = base.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoCl => cfg.use_contrastive = false,
            AblationVariant::NoDis => cfg.lambda = 0.0,
            AblationVariant::RandomPositives => {
                cfg.positive_selection = PositiveSelection::Random
            }
            AblationVariant::NoCrossAttention => cfg.with_attention = false,
        }
        cfg
    }
}

pub struct AblationOutcome {
    pub variant: AblationVariant,
    pub joint: JointUap,
    pub reports: Vec<EvalReport>,
}

/// Retrains both branches under one variant and evaluates the merged
/// artifact across the zoo.
pub fn run_ablation(
    variant: AblationVariant,
    corpus: &Corpus,
    zoo: &ModelZoo,
    base: &AttackConfig,
    opts: &EvalOptions,
) -> Result<AblationOutcome> {
    let cfg = variant.configure(base);
    let joint = train_joint_uap(corpus, zoo.surrogate(), &cfg)?;
    let reports = evaluate_transfer(zoo, &joint.artifact, corpus, corpus.domain, opts)?;
    Ok(AblationOutcome { variant, joint, reports })
}
