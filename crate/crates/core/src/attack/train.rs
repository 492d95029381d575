//! Training loops for both perturbation branches, the word-importance
//! substitution mechanism, and artifact application.

use super::{
    augment_on_tape, augment_with_plans, contrastive_loss, distance_loss, select_farthest_image,
    select_farthest_texts, alternative_loss, AttackConfig, AugmentOrder, AugmentPlans,
    CandidateSet, LossKind, LossTrace, PositiveSelection, TraceRow,
};
use crate::corpus::render::IMG_LEN;
use crate::corpus::vocab::{MASK_TOKEN, VOCAB_SIZE};
use crate::corpus::{Corpus, PairedSample};
use crate::encoder::{DualEncoderModel, HIDDEN};
use crate::error::{Error, Result};
use crate::generator::artifact::UapArtifact;
use crate::generator::{project_to_vocab, GeneratorModel, NoiseSeed};
use crate::rng;
use crate::tensor::adam::{Adam, AdamConfig};
use crate::tensor::tape::{DiffTensor, Tape};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Samples reserved from the end of the train split; their mean embeddings
/// are the fixed reference conditions the final universal perturbations are
/// generated from, so they never appear in training iterations.
pub const REFERENCE_RESERVE: usize = 32;

/// Per-run precomputation over the frozen surrogate: clean embeddings for
/// every train sample, word-importance positions for every caption, and the
/// reference conditions.
pub struct AttackContext<'a> {
    pub corpus: &'a Corpus,
    pub surrogate: &'a DualEncoderModel,
    /// `[n_train, 32]` clean image embeddings.
    pub image_embeddings: Tensor,
    /// Per sample, `[m, 32]` caption embeddings.
    pub caption_embeddings: Vec<Tensor>,
    /// Per sample, per caption, the substitution position.
    pub word_positions: Vec<Vec<usize>>,
    /// Train indices eligible for iteration sampling (reserve excluded).
    pub active: Vec<usize>,
    /// Mean caption-0 text embedding over the reserved samples, `[1, 32]`.
    pub reference_text: Tensor,
    /// Mean image embedding over the reserved samples, `[1, 32]`.
    pub reference_image: Tensor,
}

fn mean_rows(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    let mut mean = vec![0.0; cols];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= rows.len() as f64;
    }
    Tensor::row_vec(mean)
}

impl<'a> AttackContext<'a> {
    pub fn build(corpus: &'a Corpus, surrogate: &'a DualEncoderModel) -> Result<Self> {
        let train = corpus.train();
        if train.len() <= REFERENCE_RESERVE + 1 {
            return Err(Error::Contract(format!(
                "train split of {} cannot spare a {REFERENCE_RESERVE}-sample reference reserve",
                train.len()
            )));
        }
        let images: Vec<Vec<f64>> = train.iter().map(|s| s.image.clone()).collect();
        let mut image_rows = Vec::with_capacity(train.len());
        for chunk in images.chunks(64) {
            let emb = surrogate.encode_images(chunk)?;
            for i in 0..emb.rows() {
                image_rows.push(emb.row(i).to_vec());
            }
        }
        let image_embeddings = Tensor::from_rows(&image_rows)?;

        let mut caption_embeddings = Vec::with_capacity(train.len());
        let mut word_positions = Vec::with_capacity(train.len());
        for s in train {
            let emb = surrogate.encode_texts(&s.captions)?;
            caption_embeddings.push(emb);
            let mut positions = Vec::with_capacity(s.captions.len());
            for c in &s.captions {
                positions.push(word_importance(c, surrogate)?.1);
            }
            word_positions.push(positions);
        }

        let reserve_start = train.len() - REFERENCE_RESERVE;
        let reference_text = mean_rows(
            &(reserve_start..train.len())
                .map(|i| caption_embeddings[i].row(0).to_vec())
                .collect::<Vec<_>>(),
        );
        let reference_image = mean_rows(
            &(reserve_start..train.len())
                .map(|i| image_embeddings.row(i).to_vec())
                .collect::<Vec<_>>(),
        );
        Ok(AttackContext {
            corpus,
            surrogate,
            image_embeddings,
            caption_embeddings,
            word_positions,
            active: (0..reserve_start).collect(),
            reference_text,
            reference_image,
        })
    }

    /// B distinct candidate sample indices, never the matched one.
    fn sample_candidates(&self, matched: usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut picked = Vec::with_capacity(b);
        while picked.len() < b {
            let idx = self.active[rng.gen_range(0..self.active.len())];
            if idx != matched && !picked.contains(&idx) {
                picked.push(idx);
            }
        }
        picked
    }
}

fn shuffled(indices: &[usize], seed: u64, domain: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = indices.to_vec();
    let mut rng = rng::stream(seed, domain, epoch as u64);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    order
}

fn finite_or_training_error(v: f64, what: &str, epoch: usize, iteration: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!(
            "{what} became non-finite at epoch {epoch}, iteration {iteration}"
        )))
    }
}

/// One iteration's combined loss value breakdown.
struct LossParts {
    l_cl: f64,
    l_dis: f64,
    total: DiffTensor,
}

fn combine_losses(
    cfg: &AttackConfig,
    anchors: &DiffTensor,
    negatives: &DiffTensor,
    positives: &DiffTensor,
    clean: &DiffTensor,
) -> Result<LossParts> {
    let l_dis = distance_loss(anchors, clean)?;
    let align = if !cfg.use_contrastive {
        None
    } else if cfg.loss_kind == LossKind::InfoNce {
        Some(contrastive_loss(anchors, negatives, positives, cfg.tau)?)
    } else {
        Some(alternative_loss(cfg.loss_kind, anchors, negatives)?)
    };
    let total = match &align {
        Some(a) => a.add(&l_dis.scale(cfg.lambda))?,
        None => l_dis.scale(1.0),
    };
    Ok(LossParts {
        l_cl: align.as_ref().map_or(0.0, |a| a.scalar().unwrap_or(f64::NAN)),
        l_dis: l_dis.scalar()?,
        total,
    })
}

pub struct TrainedUap {
    pub artifact: UapArtifact,
    pub generator: GeneratorModel,
    pub trace: LossTrace,
}

/// The five-view adversarial image set for one sample, built in the
/// configured order: perturb the clean image then augment, or augment the
/// clean image and add the perturbation to every view.
fn adversarial_image_set(
    tape: &std::rc::Rc<Tape>,
    image: &[f64],
    delta: &DiffTensor,
    plans: &AugmentPlans,
    cfg: &AttackConfig,
    aug_rng: &mut ChaCha8Rng,
) -> Result<DiffTensor> {
    match cfg.augment_order {
        AugmentOrder::PerturbThenAugment => {
            let v = tape.constant(&Tensor::row_vec(image.to_vec()));
            let v_adv = v.add(delta)?;
            augment_on_tape(tape, &v_adv, plans, cfg.noise_sigma, aug_rng)
        }
        AugmentOrder::AugmentThenPerturb => {
            let aug = augment_with_plans(image, plans, cfg.noise_sigma, aug_rng, true)?;
            let aug = tape.constant(&Tensor::from_rows(&aug)?);
            Ok(aug.add(delta)?.clamp01_ste())
        }
    }
}

/// Fits the image branch against the frozen surrogate and emits the final
/// universal perturbation from the held-out reference condition.
pub fn train_image_uap(
    corpus: &Corpus,
    surrogate: &DualEncoderModel,
    cfg: &AttackConfig,
) -> Result<TrainedUap> {
    let ctx = AttackContext::build(corpus, surrogate)?;
    train_image_uap_with(&ctx, cfg)
}

pub fn train_image_uap_with(ctx: &AttackContext, cfg: &AttackConfig) -> Result<TrainedUap> {
    cfg.validate()?;
    let plans = AugmentPlans::new(&cfg.scales)?;
    let mut generator = GeneratorModel::new(cfg.seed, cfg.with_attention);
    let noise = NoiseSeed::new(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        &generator.params,
    );
    let mut trace = LossTrace::default();
    let mut aug_rng = rng::stream(cfg.seed, "attack/img/aug", 0);
    let mut clean_rng = rng::stream(cfg.seed, "attack/img/aug-clean", 0);
    let mut cand_rng = rng::stream(cfg.seed, "attack/img/cand", 0);

    for epoch in 0..cfg.epochs {
        let order = shuffled(&ctx.active, cfg.seed, "attack/img/shuffle", epoch);
        for (iteration, &idx) in order.iter().enumerate() {
            let sample = &ctx.corpus.train()[idx];
            let tape = Tape::new();
            let gen = generator.lease(&tape, true);
            let enc = ctx.surrogate.lease(&tape, false);

            let condition = tape.constant(&ctx.caption_embeddings[idx]);
            let delta = gen.image_uap(&tape, &noise, &condition, cfg.epsilon_v)?;
            let adv_set =
                adversarial_image_set(&tape, &sample.image, &delta, &plans, cfg, &mut aug_rng)?;
            let anchors = enc.encode_images(&adv_set)?;

            let clean_aug = augment_with_plans(
                &sample.image,
                &plans,
                cfg.noise_sigma,
                &mut clean_rng,
                true,
            )?;
            let clean_emb = tape.constant(&ctx.surrogate.encode_images(&clean_aug)?);

            let negatives = tape.constant(&ctx.caption_embeddings[idx]);
            let cand_indices = ctx.sample_candidates(idx, cfg.candidate_batch, &mut cand_rng);
            let cand_sets: Vec<CandidateSet> = cand_indices
                .iter()
                .map(|&c| CandidateSet { sample_index: c, embeddings: &ctx.caption_embeddings[c] })
                .collect();
            let (winner, taken) = match cfg.positive_selection {
                PositiveSelection::Farthest => {
                    let pick = select_farthest_texts(
                        ctx.image_embeddings.row(idx),
                        &cand_sets,
                        idx,
                        cfg.k_positives,
                    )?;
                    (pick.winner, pick.taken)
                }
                PositiveSelection::Random => {
                    let w = cand_rng.gen_range(0..cand_sets.len());
                    (w, cfg.k_positives.min(cand_sets[w].embeddings.rows()))
                }
            };
            if taken < cfg.k_positives {
                trace.truncated_picks += 1;
            }
            let winner_emb = cand_sets[winner].embeddings;
            let positives = tape.constant(&Tensor::from_rows(
                &(0..taken).map(|i| winner_emb.row(i).to_vec()).collect::<Vec<_>>(),
            )?);

            let parts = combine_losses(cfg, &anchors, &negatives, &positives, &clean_emb)?;
            let total = finite_or_training_error(parts.total.scalar()?, "loss", epoch, iteration)?;
            parts.total.backward()?;
            let grads = gen.grads(&generator.params);
            adam.step(&mut generator.params, &grads)?;
            trace.rows.push(TraceRow {
                epoch,
                iteration,
                l_cl: parts.l_cl,
                l_dis: parts.l_dis,
                total,
            });
        }
    }

    let artifact = emit_image_artifact(&generator, &noise, ctx, cfg)?;
    Ok(TrainedUap { artifact, generator, trace })
}

/// Config snapshot stored inside artifacts: the attack parameters plus the
/// domain of the corpus the generator was fitted on.
fn artifact_config(ctx: &AttackContext, cfg: &AttackConfig) -> Vec<(String, String)> {
    let mut pairs = cfg.to_pairs();
    pairs.push(("train_domain".into(), ctx.corpus.domain.tag().into()));
    pairs
}

fn emit_image_artifact(
    generator: &GeneratorModel,
    noise: &NoiseSeed,
    ctx: &AttackContext,
    cfg: &AttackConfig,
) -> Result<UapArtifact> {
    let tape = Tape::new();
    let gen = generator.lease(&tape, false);
    let condition = tape.constant(&ctx.reference_text);
    let delta = gen.image_uap(&tape, &noise, &condition, cfg.epsilon_v)?.to_tensor();
    UapArtifact::new(
        delta,
        None,
        cfg.epsilon_v,
        ctx.surrogate.param_hash(),
        artifact_config(ctx, cfg),
    )
}

/// Fits the text branch: the anchor is each matched caption re-pooled with
/// the generator's embedding substituted at its importance position, pushed
/// from the matched image's augmented set and pulled toward the farthest
/// image's augmented set. Emits the vocabulary-projected universal word.
pub fn train_text_uap(
    corpus: &Corpus,
    surrogate: &DualEncoderModel,
    cfg: &AttackConfig,
) -> Result<TrainedUap> {
    let ctx = AttackContext::build(corpus, surrogate)?;
    train_text_uap_with(&ctx, cfg)
}

pub fn train_text_uap_with(ctx: &AttackContext, cfg: &AttackConfig) -> Result<TrainedUap> {
    cfg.validate()?;
    let plans = AugmentPlans::new(&cfg.scales)?;
    let mut generator = GeneratorModel::new(cfg.seed, cfg.with_attention);
    let noise = NoiseSeed::new(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        &generator.params,
    );
    let mut trace = LossTrace::default();
    let mut aug_rng = rng::stream(cfg.seed, "attack/txt/aug", 0);
    let mut pos_rng = rng::stream(cfg.seed, "attack/txt/aug-pos", 0);
    let mut cand_rng = rng::stream(cfg.seed, "attack/txt/cand", 0);

    // Clean pooled caption rows minus the substituted token, per sample:
    // pooled_adv = rest + g/len, so only the generator output stays on-tape.
    let table = ctx
        .surrogate
        .params
        .by_name("txt.table")
        .expect("text embedding table");
    let mut rest_pooled: Vec<Tensor> = Vec::with_capacity(ctx.corpus.train().len());
    let mut caption_lens: Vec<Vec<usize>> = Vec::with_capacity(ctx.corpus.train().len());
    for (s, positions) in ctx.corpus.train().iter().zip(&ctx.word_positions) {
        let mut rows = Vec::with_capacity(s.captions.len());
        let mut lens = Vec::with_capacity(s.captions.len());
        for (c, &p) in s.captions.iter().zip(positions) {
            let mut pooled = vec![0.0; HIDDEN];
            for (i, &tok) in c.iter().enumerate() {
                if i == p {
                    continue;
                }
                for (acc, v) in pooled.iter_mut().zip(table.row(tok as usize)) {
                    *acc += v;
                }
            }
            for v in &mut pooled {
                *v /= c.len() as f64;
            }
            rows.push(pooled);
            lens.push(c.len());
        }
        rest_pooled.push(Tensor::from_rows(&rows)?);
        caption_lens.push(lens);
    }

    for epoch in 0..cfg.epochs {
        let order = shuffled(&ctx.active, cfg.seed, "attack/txt/shuffle", epoch);
        for (iteration, &idx) in order.iter().enumerate() {
            let sample = &ctx.corpus.train()[idx];
            let tape = Tape::new();
            let gen = generator.lease(&tape, true);
            let enc = ctx.surrogate.lease(&tape, false);

            let condition = tape.constant(&Tensor::row_vec(ctx.image_embeddings.row(idx).to_vec()));
            let g = gen.text_embedding(&tape, &noise, &condition)?;

            // Anchor rows: one adversarial caption embedding per caption.
            let mut pooled_rows = Vec::with_capacity(sample.captions.len());
            for (c, &len) in rest_pooled[idx]
                .values()
                .chunks(HIDDEN)
                .zip(&caption_lens[idx])
            {
                let rest = tape.constant(&Tensor::row_vec(c.to_vec()));
                pooled_rows.push(rest.add(&g.scale(1.0 / len as f64))?);
            }
            let pooled = tape.concat_rows(&pooled_rows)?;
            let anchors = enc.text_head(&pooled)?;

            // Negatives: the matched image's augmented set.
            let neg_aug = augment_with_plans(
                &sample.image,
                &plans,
                cfg.noise_sigma,
                &mut aug_rng,
                true,
            )?;
            let negatives = tape.constant(&ctx.surrogate.encode_images(&neg_aug)?);

            // Positives: the farthest image's augmented set.
            let cand_indices = ctx.sample_candidates(idx, cfg.candidate_batch, &mut cand_rng);
            let cand_refs: Vec<(usize, &[f64])> = cand_indices
                .iter()
                .map(|&c| (c, ctx.image_embeddings.row(c)))
                .collect();
            let winner = match cfg.positive_selection {
                PositiveSelection::Farthest => {
                    select_farthest_image(&ctx.caption_embeddings[idx], &cand_refs, idx)?
                }
                PositiveSelection::Random => cand_rng.gen_range(0..cand_refs.len()),
            };
            let far_image = &ctx.corpus.train()[cand_indices[winner]].image;
            let pos_aug =
                augment_with_plans(far_image, &plans, cfg.noise_sigma, &mut pos_rng, true)?;
            let positives = tape.constant(&ctx.surrogate.encode_images(&pos_aug)?);

            let clean_texts = tape.constant(&ctx.caption_embeddings[idx]);
            let parts = combine_losses(cfg, &anchors, &negatives, &positives, &clean_texts)?;
            let total = finite_or_training_error(parts.total.scalar()?, "loss", epoch, iteration)?;
            parts.total.backward()?;
            let grads = gen.grads(&generator.params);
            adam.step(&mut generator.params, &grads)?;
            trace.rows.push(TraceRow {
                epoch,
                iteration,
                l_cl: parts.l_cl,
                l_dis: parts.l_dis,
                total,
            });
        }
    }

    // Final universal word from the held-out mean image condition.
    let tape = Tape::new();
    let gen = generator.lease(&tape, false);
    let condition = tape.constant(&ctx.reference_image);
    let embedding = gen.text_embedding(&tape, &noise, &condition)?.to_tensor();
    let word = project_to_vocab(embedding.values(), ctx.surrogate)?;
    let artifact = UapArtifact::new(
        Tensor::zeros(1, IMG_LEN),
        Some(word),
        cfg.epsilon_v,
        ctx.surrogate.param_hash(),
        artifact_config(ctx, cfg),
    )?;
    Ok(TrainedUap { artifact, generator, trace })
}

/// Both branches trained against one surrogate, folded into a single
/// bimodal artifact.
pub struct JointUap {
    pub artifact: UapArtifact,
    pub image: TrainedUap,
    pub text: TrainedUap,
}

/// Trains the image and text branches under one configuration and merges
/// the results: the perturbation from the image run, the word from the text
/// run. Precomputation over the surrogate is shared.
pub fn train_joint_uap(
    corpus: &Corpus,
    surrogate: &DualEncoderModel,
    cfg: &AttackConfig,
) -> Result<JointUap> {
    let ctx = AttackContext::build(corpus, surrogate)?;
    let image = train_image_uap_with(&ctx, cfg)?;
    let text = train_text_uap_with(&ctx, cfg)?;
    let word = text
        .artifact
        .adversarial_word
        .ok_or_else(|| Error::Contract("text branch emitted no word".into()))?;
    let artifact = image.artifact.clone().with_word(word)?;
    Ok(JointUap { artifact, image, text })
}

/// Distance-maximization baseline: an unconditioned generator trained only
/// to push the adversarial image away from its matched captions — no
/// contrastive roles, no candidate selection, no word. Same augmentation,
/// budget bound, and loop structure as the full method.
pub fn train_gap_baseline(
    corpus: &Corpus,
    surrogate: &DualEncoderModel,
    cfg: &AttackConfig,
) -> Result<TrainedUap> {
    let ctx = AttackContext::build(corpus, surrogate)?;
    train_gap_baseline_with(&ctx, cfg)
}

pub fn train_gap_baseline_with(ctx: &AttackContext, cfg: &AttackConfig) -> Result<TrainedUap> {
    cfg.validate()?;
    let cfg = AttackConfig { use_contrastive: false, with_attention: false, ..cfg.clone() };
    let plans = AugmentPlans::new(&cfg.scales)?;
    let mut generator = GeneratorModel::new(cfg.seed, false);
    let noise = NoiseSeed::new(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
        &generator.params,
    );
    let mut trace = LossTrace::default();
    let mut aug_rng = rng::stream(cfg.seed, "attack/gap/aug", 0);

    for epoch in 0..cfg.epochs {
        let order = shuffled(&ctx.active, cfg.seed, "attack/gap/shuffle", epoch);
        for (iteration, &idx) in order.iter().enumerate() {
            let sample = &ctx.corpus.train()[idx];
            let tape = Tape::new();
            let gen = generator.lease(&tape, true);
            let enc = ctx.surrogate.lease(&tape, false);

            // The generator was built without attention, so the condition
            // input is inert; the matched captions are the distance target.
            let condition = tape.constant(&ctx.caption_embeddings[idx]);
            let delta = gen.image_uap(&tape, &noise, &condition, cfg.epsilon_v)?;
            let adv_set =
                adversarial_image_set(&tape, &sample.image, &delta, &plans, &cfg, &mut aug_rng)?;
            let anchors = enc.encode_images(&adv_set)?;
            let matched = tape.constant(&ctx.caption_embeddings[idx]);

            let loss = distance_loss(&anchors, &matched)?;
            let total = finite_or_training_error(loss.scalar()?, "loss", epoch, iteration)?;
            loss.backward()?;
            let grads = gen.grads(&generator.params);
            adam.step(&mut generator.params, &grads)?;
            trace.rows.push(TraceRow { epoch, iteration, l_cl: 0.0, l_dis: total, total });
        }
    }

    let artifact = emit_image_artifact(&generator, &noise, ctx, &cfg)?;
    Ok(TrainedUap { artifact, generator, trace })
}

/// Random-noise control at the same image budget: uniform pixel noise in
/// [-epsilon_v, epsilon_v], no word. Like the distance baseline it carries
/// no text side; swapping a uniformly drawn word into the short captions
/// here is a semantic edit far out of proportion to one learned token, so
/// the noise floor is deliberately image-only.
pub fn random_baseline(
    surrogate: &DualEncoderModel,
    cfg: &AttackConfig,
) -> Result<UapArtifact> {
    let mut r = rng::stream(cfg.seed, "attack/random-baseline", 0);
    let mut delta = Tensor::zeros(1, IMG_LEN);
    for v in delta.values_mut() {
        *v = (r.gen::<f64>() * 2.0 - 1.0) * cfg.epsilon_v;
    }
    UapArtifact::new(delta, None, cfg.epsilon_v, surrogate.param_hash(), cfg.to_pairs())
}

/// Per-position importance: the embedding shift caused by masking each
/// token. Returns all scores and the argmax position (leftmost on ties).
/// Text pooling is permutation-invariant, so masking equal tokens at
/// different positions is one computation — duplicates share a score
/// exactly, which is what makes the leftmost tie rule well-defined.
pub fn word_importance(tokens: &[u16], model: &DualEncoderModel) -> Result<(Vec<f64>, usize)> {
    if tokens.is_empty() {
        return Err(Error::InvalidShape("empty sentence".into()));
    }
    let mut batch: Vec<Vec<u16>> = vec![tokens.to_vec()];
    let mut row_of_token = [usize::MAX; VOCAB_SIZE];
    let mut row_for = Vec::with_capacity(tokens.len());
    for (i, &t) in tokens.iter().enumerate() {
        let slot = &mut row_of_token[usize::from(t)];
        if *slot == usize::MAX {
            let mut masked = tokens.to_vec();
            masked[i] = MASK_TOKEN;
            batch.push(masked);
            *slot = batch.len() - 1;
        }
        row_for.push(*slot);
    }
    let emb = model.encode_texts(&batch)?;
    let base = emb.row(0);
    let mut scores = Vec::with_capacity(tokens.len());
    let mut best = 0usize;
    for &row in &row_for {
        let d = emb
            .row(row)
            .iter()
            .zip(base)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        scores.push(d);
        if d > scores[best] {
            best = scores.len() - 1;
        }
    }
    Ok((scores, best))
}

/// A clean pair with the universal perturbations applied.
pub struct AdversarialPair {
    /// clamp(image + delta_v, 0, 1).
    pub image: Vec<f64>,
    /// Every caption with its importance-argmax token replaced.
    pub captions: Vec<Vec<u16>>,
    /// Captions whose chosen position already held the adversarial word.
    pub degenerate_substitutions: usize,
}

/// Applies an artifact to one pair. The image is perturbed and re-clamped;
/// each caption has exactly one token replaced (zero when the chosen
/// position already holds the word, counted as degenerate).
pub fn apply_uap(
    sample: &PairedSample,
    artifact: &UapArtifact,
    model: &DualEncoderModel,
) -> Result<AdversarialPair> {
    let mut image = sample.image.clone();
    if image.len() != artifact.delta_v.len() {
        return Err(Error::InvalidShape(format!(
            "image has {} pixels, delta_v {}",
            image.len(),
            artifact.delta_v.len()
        )));
    }
    for (v, d) in image.iter_mut().zip(artifact.delta_v.values()) {
        *v = (*v + d).clamp(0.0, 1.0);
    }
    let mut captions = Vec::with_capacity(sample.captions.len());
    let mut degenerate = 0usize;
    for c in &sample.captions {
        let mut adv = c.clone();
        if let Some(word) = artifact.adversarial_word {
            let (_, pos) = word_importance(c, model)?;
            if adv[pos] == word {
                degenerate += 1;
            }
            adv[pos] = word;
        }
        captions.push(adv);
    }
    Ok(AdversarialPair {
        image,
        captions,
        degenerate_substitutions: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Domain};
    use crate::encoder::pretrain::{pretrain_dual_encoder, PretrainConfig};
    use crate::encoder::ArchKind;

    fn tiny_setup() -> (Corpus, DualEncoderModel) {
        let corpus = generate_corpus(48, 8, 3, Domain::A, 11).unwrap();
        let cfg = PretrainConfig { epochs: 2, batch: 16, ..PretrainConfig::default() };
        let model = pretrain_dual_encoder(&corpus, ArchKind::MeanPool, 5, &cfg).unwrap();
        (corpus, model)
    }

    fn tiny_attack_cfg(seed: u64) -> AttackConfig {
        AttackConfig {
            epochs: 1,
            candidate_batch: 4,
            seed,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn single_word_sentence_selects_position_zero() {
        let model = DualEncoderModel::new(ArchKind::MeanPool, 3);
        let (scores, pos) = word_importance(&[7], &model).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(pos, 0);
    }

    #[test]
    fn word_importance_matches_brute_force_scan() {
        let model = DualEncoderModel::new(ArchKind::MeanPool, 9);
        let mut r = rng::stream(2, "wi", 0);
        for _ in 0..20 {
            let len = r.gen_range(2..=8);
            let tokens: Vec<u16> = (0..len).map(|_| r.gen_range(0..63u16)).collect();
            let (scores, pos) = word_importance(&tokens, &model).unwrap();
            let base = model.encode_text(&tokens).unwrap();
            let mut want_scores = Vec::new();
            for i in 0..tokens.len() {
                let mut masked = tokens.clone();
                masked[i] = MASK_TOKEN;
                let emb = model.encode_text(&masked).unwrap();
                let d = emb
                    .iter()
                    .zip(&base)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                want_scores.push(d);
            }
            let mut want_pos = 0;
            for i in 1..want_scores.len() {
                if want_scores[i] > want_scores[want_pos] {
                    want_pos = i;
                }
            }
            for (a, b) in scores.iter().zip(&want_scores) {
                assert!((a - b).abs() < 1e-9);
            }
            // Duplicate tokens tie mathematically; the scan only resolves
            // a winner when the margin clears floating-point noise.
            let unique = want_scores
                .iter()
                .enumerate()
                .all(|(i, s)| i == want_pos || want_scores[want_pos] - s > 1e-9);
            if unique {
                assert_eq!(pos, want_pos);
            } else {
                assert!((scores[pos] - want_scores[want_pos]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn duplicate_tokens_tie_leftmost_under_mean_pooling() {
        let model = DualEncoderModel::new(ArchKind::MeanPool, 4);
        // Masking equal tokens in a mean-pooled bag gives identical
        // embeddings, so every position of the repeated token ties.
        let tokens = [5u16, 5, 5, 5];
        let (scores, pos) = word_importance(&tokens, &model).unwrap();
        for s in &scores[1..] {
            assert!((s - scores[0]).abs() < 1e-12);
        }
        assert_eq!(pos, 0);
    }

    #[test]
    fn applied_pairs_stay_valid() {
        let (corpus, model) = tiny_setup();
        let mut r = rng::stream(3, "t", 0);
        let eps = 12.0 / 255.0;
        let mut delta = Tensor::zeros(1, IMG_LEN);
        for v in delta.values_mut() {
            *v = (r.gen::<f64>() * 2.0 - 1.0) * eps;
        }
        let artifact =
            UapArtifact::new(delta, Some(17), eps, model.param_hash(), vec![]).unwrap();
        for sample in corpus.test() {
            let adv = apply_uap(sample, &artifact, &model).unwrap();
            assert!(adv.image.iter().all(|v| (0.0..=1.0).contains(v)));
            for (clean, dirty) in sample.captions.iter().zip(&adv.captions) {
                let hamming = clean
                    .iter()
                    .zip(dirty)
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(hamming <= 1, "at most one token may change");
            }
        }
    }

    #[test]
    fn null_artifact_with_matching_word_is_identity() {
        let (corpus, model) = tiny_setup();
        let sample = &corpus.test()[0];
        let (_, pos) = word_importance(&sample.captions[0], &model).unwrap();
        let word = sample.captions[0][pos];
        let artifact = UapArtifact::null(0.05).with_word(word).unwrap();
        let adv = apply_uap(sample, &artifact, &model).unwrap();
        assert_eq!(adv.image, sample.image);
        assert_eq!(adv.captions[0], sample.captions[0]);
        assert!(adv.degenerate_substitutions >= 1);
    }

    #[test]
    fn image_training_runs_and_respects_budget() {
        let (corpus, model) = tiny_setup();
        let cfg = tiny_attack_cfg(21);
        let out = train_image_uap(&corpus, &model, &cfg).unwrap();
        assert!(out.artifact.delta_v.max_abs() <= cfg.epsilon_v);
        assert!(out.artifact.delta_v.max_abs() > 0.0, "training must move delta");
        assert_eq!(out.artifact.adversarial_word, None);
        assert_eq!(out.trace.rows.len(), corpus.train().len() - REFERENCE_RESERVE);
        assert_eq!(out.artifact.surrogate_hash, model.param_hash());
        assert!(out.trace.rows.iter().all(|r| r.total.is_finite()));
        assert!(out.trace.rows.iter().all(|r| r.l_cl < 0.0));
        assert!(out.trace.rows.iter().all(|r| r.l_dis <= 0.0));
    }

    #[test]
    fn image_training_is_bit_deterministic() {
        let (corpus, model) = tiny_setup();
        let cfg = tiny_attack_cfg(33);
        let a = train_image_uap(&corpus, &model, &cfg).unwrap();
        let b = train_image_uap(&corpus, &model, &cfg).unwrap();
        assert_eq!(a.artifact.delta_v.values(), b.artifact.delta_v.values());
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        let c = train_image_uap(&corpus, &model, &tiny_attack_cfg(34)).unwrap();
        assert_ne!(a.artifact.delta_v.values(), c.artifact.delta_v.values());
    }

    #[test]
    fn text_training_emits_an_in_vocab_word() {
        let (corpus, model) = tiny_setup();
        let cfg = tiny_attack_cfg(55);
        let out = train_text_uap(&corpus, &model, &cfg).unwrap();
        let word = out.artifact.adversarial_word.expect("text side stores a word");
        assert!(usize::from(word) < crate::corpus::vocab::VOCAB_SIZE);
        assert_eq!(out.artifact.delta_v.max_abs(), 0.0);
        assert!(out.trace.rows.iter().all(|r| r.total.is_finite()));
        // Determinism.
        let again = train_text_uap(&corpus, &model, &cfg).unwrap();
        assert_eq!(again.artifact.adversarial_word, Some(word));
    }

    #[test]
    fn lambda_zero_total_equals_contrastive_term() {
        let (corpus, model) = tiny_setup();
        let cfg = AttackConfig { lambda: 0.0, ..tiny_attack_cfg(60) };
        let out = train_image_uap(&corpus, &model, &cfg).unwrap();
        for r in &out.trace.rows {
            assert!((r.total - r.l_cl).abs() < 1e-15);
        }
    }

    #[test]
    fn no_contrastive_total_equals_distance_term() {
        let (corpus, model) = tiny_setup();
        let cfg = AttackConfig { use_contrastive: false, ..tiny_attack_cfg(61) };
        let out = train_image_uap(&corpus, &model, &cfg).unwrap();
        for r in &out.trace.rows {
            assert_eq!(r.l_cl, 0.0);
            assert!((r.total - r.l_dis).abs() < 1e-15);
        }
    }

    #[test]
    fn baselines_produce_valid_artifacts() {
        let (corpus, model) = tiny_setup();
        let cfg = tiny_attack_cfg(70);
        let gap = train_gap_baseline(&corpus, &model, &cfg).unwrap();
        assert!(gap.artifact.delta_v.max_abs() <= cfg.epsilon_v);
        assert!(gap.artifact.delta_v.max_abs() > 0.0);
        assert!(gap.artifact.adversarial_word.is_none());
        assert!(!gap.generator.with_attention);
        // Pure distance maximization: no alignment term in any row.
        assert!(gap.trace.rows.iter().all(|r| r.l_cl == 0.0 && r.total == r.l_dis));

        let rand = random_baseline(&model, &cfg).unwrap();
        assert!(rand.delta_v.max_abs() <= cfg.epsilon_v);
        assert!(rand.delta_v.max_abs() > 0.0);
        assert!(rand.adversarial_word.is_none());
        let again = random_baseline(&model, &cfg).unwrap();
        assert_eq!(rand.delta_v.values(), again.delta_v.values());
    }

    #[test]
    fn gradient_step_pushes_matched_away_pulls_selected_closer() {
        // One optimizer step must not raise similarity-to-matched minus
        // similarity-to-selected in at least 95 of 100 fresh-start trials.
        let (corpus, model) = tiny_setup();
        let ctx = AttackContext::build(&corpus, &model).unwrap();
        let cfg = tiny_attack_cfg(0);
        let plans = AugmentPlans::new(&cfg.scales).unwrap();
        let mut ok = 0;
        for trial in 0..100u64 {
            let generator = GeneratorModel::new(trial, true);
            let noise = NoiseSeed::new(trial);
            let idx = (trial as usize * 7) % ctx.active.len();
            let sample = &corpus.train()[ctx.active[idx]];
            let cand_indices: Vec<usize> = ctx
                .active
                .iter()
                .copied()
                .filter(|&c| c != ctx.active[idx])
                .take(cfg.candidate_batch)
                .collect();
            let cand_sets: Vec<CandidateSet> = cand_indices
                .iter()
                .map(|&c| CandidateSet { sample_index: c, embeddings: &ctx.caption_embeddings[c] })
                .collect();
            let pick = select_farthest_texts(
                ctx.image_embeddings.row(ctx.active[idx]),
                &cand_sets,
                ctx.active[idx],
                cfg.k_positives,
            )
            .unwrap();
            let pos_emb = cand_sets[pick.winner].embeddings;
            let positives = Tensor::from_rows(
                &(0..pick.taken).map(|i| pos_emb.row(i).to_vec()).collect::<Vec<_>>(),
            )
            .unwrap();
            let negatives = ctx.caption_embeddings[ctx.active[idx]].clone();

            // Fixed augmentation noise for both the before and after pass.
            let gap = |g: &GeneratorModel| -> f64 {
                let tape = Tape::new();
                let gen = g.lease(&tape, false);
                let enc = model.lease(&tape, false);
                let condition = tape.constant(&negatives);
                let delta = gen.image_uap(&tape, &noise, &condition, cfg.epsilon_v).unwrap();
                let v = tape.constant(&Tensor::row_vec(sample.image.clone()));
                let mut rng = rng::stream(trial, "trial/aug", 0);
                let adv = augment_on_tape(&tape, &v.add(&delta).unwrap(), &plans, cfg.noise_sigma, &mut rng)
                    .unwrap();
                let anchors = enc.encode_images(&adv).unwrap();
                let s_matched = anchors
                    .matmul(&tape.constant(&negatives).transpose())
                    .unwrap()
                    .scale(1.0 / cfg.tau)
                    .exp()
                    .sum_all()
                    .scalar()
                    .unwrap();
                let s_selected = anchors
                    .matmul(&tape.constant(&positives).transpose())
                    .unwrap()
                    .scale(1.0 / cfg.tau)
                    .exp()
                    .sum_all()
                    .scalar()
                    .unwrap();
                s_matched - s_selected
            };

            let before = gap(&generator);
            // One step of the real objective on the same fixed batch.
            let mut g2 = generator.clone();
            let mut adam = Adam::new(
                AdamConfig { lr: cfg.lr, ..AdamConfig::default() },
                &g2.params,
            );
            {
                let tape = Tape::new();
                let gen = g2.lease(&tape, true);
                let enc = model.lease(&tape, false);
                let condition = tape.constant(&negatives);
                let delta = gen.image_uap(&tape, &noise, &condition, cfg.epsilon_v).unwrap();
                let v = tape.constant(&Tensor::row_vec(sample.image.clone()));
                let mut rng = rng::stream(trial, "trial/aug", 0);
                let adv = augment_on_tape(&tape, &v.add(&delta).unwrap(), &plans, cfg.noise_sigma, &mut rng)
                    .unwrap();
                let anchors = enc.encode_images(&adv).unwrap();
                let loss = contrastive_loss(
                    &anchors,
                    &tape.constant(&negatives),
                    &tape.constant(&positives),
                    cfg.tau,
                )
                .unwrap();
                loss.backward().unwrap();
                let grads = gen.grads(&g2.params);
                adam.step(&mut g2.params, &grads).unwrap();
            }
            let after = gap(&g2);
            if after <= before {
                ok += 1;
            }
        }
        assert!(ok >= 95, "push/pull direction held in only {ok}/100 trials");
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        let corpus = generate_corpus(20, 4, 2, Domain::A, 1).unwrap();
        let model = DualEncoderModel::new(ArchKind::MeanPool, 1);
        assert!(matches!(
            AttackContext::build(&corpus, &model),
            Err(Error::Contract(_))
        ));
    }
}
