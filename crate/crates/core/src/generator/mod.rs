//! Conditional perturbation generators.
//!
//! Each generator turns a fixed noise seed into a universal perturbation,
//! steered by embeddings of the *opposite* modality through one
//! cross-attention block. The image branch expands 9 noise values to a full
//! 32x32x3 perturbation whose L-infinity norm is structurally bounded by
//! `epsilon * tanh(raw)`; the text branch produces a 64-dim vector in
//! token-embedding space that is later projected onto the vocabulary.

pub mod artifact;

use crate::corpus::render::IMG_LEN;
use crate::corpus::vocab::VOCAB_SIZE;
use crate::encoder::{DualEncoderModel, EMBED_D, HIDDEN};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::tape::{DiffTensor, Tape};
use crate::tensor::{ParamSet, Tensor};
use std::rc::Rc;

pub const D_ATTN: usize = 16;
pub const IMG_HIDDEN1: usize = 256;
pub const IMG_HIDDEN2: usize = 1024;
pub const Z_V_LEN: usize = 9;
pub const Z_T_LEN: usize = 3;

/// Noise inputs, drawn once at initialization and never trained; only the
/// generator weights learn.
#[derive(Clone, Debug)]
pub struct NoiseSeed {
    /// 3x3, consumed flattened.
    pub z_v: Tensor,
    /// 1x3.
    pub z_t: Tensor,
    pub seed: u64,
}

impl NoiseSeed {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, "generator/noise", 0);
        NoiseSeed {
            z_v: Tensor::randn(&mut r, 3, 3, 1.0),
            z_t: Tensor::randn(&mut r, 1, 3, 1.0),
            seed,
        }
    }
}

// Image branch parameter order.
const P_IMG_W1: usize = 0;
const P_IMG_B1: usize = 1;
const P_IMG_W2: usize = 2;
const P_IMG_B2: usize = 3;
const P_IMG_W3: usize = 4;
const P_IMG_B3: usize = 5;
const P_TXT_W1: usize = 6;
const P_TXT_B1: usize = 7;
const P_TXT_W2: usize = 8;
const P_TXT_B2: usize = 9;
// Attention blocks, present only when built with conditioning; each block
// occupies four consecutive slots (wq, wk, wv, wo) starting here.
const P_IMG_WQ: usize = 10;
const P_TXT_WQ: usize = 14;

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub params: ParamSet,
    /// When false the cross-attention blocks are absent entirely; the
    /// unconditioned variant backs both the ablation and the
    /// distance-only baseline generator.
    pub with_attention: bool,
    pub seed: u64,
}

impl GeneratorModel {
    pub fn new(seed: u64, with_attention: bool) -> Self {
        let mut r = rng::stream(seed, "generator/init", 0);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamSet::new();
        p.push("img.w1", Tensor::randn(&mut r, Z_V_LEN, IMG_HIDDEN1, inv(Z_V_LEN)));
        p.push("img.b1", Tensor::zeros(1, IMG_HIDDEN1));
        p.push("img.w2", Tensor::randn(&mut r, IMG_HIDDEN1, IMG_HIDDEN2, inv(IMG_HIDDEN1)));
        p.push("img.b2", Tensor::zeros(1, IMG_HIDDEN2));
        p.push("img.w3", Tensor::randn(&mut r, IMG_HIDDEN2, IMG_LEN, inv(IMG_HIDDEN2)));
        p.push("img.b3", Tensor::zeros(1, IMG_LEN));
        p.push("txt.w1", Tensor::randn(&mut r, Z_T_LEN, HIDDEN, inv(Z_T_LEN)));
        p.push("txt.b1", Tensor::zeros(1, HIDDEN));
        p.push("txt.w2", Tensor::randn(&mut r, HIDDEN, HIDDEN, inv(HIDDEN)));
        p.push("txt.b2", Tensor::zeros(1, HIDDEN));
        if with_attention {
            p.push("img.attn.wq", Tensor::randn(&mut r, IMG_HIDDEN1, D_ATTN, inv(IMG_HIDDEN1)));
            p.push("img.attn.wk", Tensor::randn(&mut r, EMBED_D, D_ATTN, inv(EMBED_D)));
            p.push("img.attn.wv", Tensor::randn(&mut r, EMBED_D, D_ATTN, inv(EMBED_D)));
            p.push("img.attn.wo", Tensor::randn(&mut r, D_ATTN, IMG_HIDDEN1, inv(D_ATTN)));
            p.push("txt.attn.wq", Tensor::randn(&mut r, HIDDEN, D_ATTN, inv(HIDDEN)));
            p.push("txt.attn.wk", Tensor::randn(&mut r, EMBED_D, D_ATTN, inv(EMBED_D)));
            p.push("txt.attn.wv", Tensor::randn(&mut r, EMBED_D, D_ATTN, inv(EMBED_D)));
            p.push("txt.attn.wo", Tensor::randn(&mut r, D_ATTN, HIDDEN, inv(D_ATTN)));
        }
        GeneratorModel {
            params: p,
            with_attention,
            seed,
        }
    }

    pub fn lease(&self, tape: &Rc<Tape>, trainable: bool) -> LeasedGenerator {
        let handles = self
            .params
            .iter()
            .map(|(_, t)| if trainable { tape.leaf(t) } else { tape.constant(t) })
            .collect();
        LeasedGenerator {
            with_attention: self.with_attention,
            handles,
        }
    }
}

/// One cross-attention block's weight handles.
pub struct AttnWeights<'a> {
    pub wq: &'a DiffTensor,
    pub wk: &'a DiffTensor,
    pub wv: &'a DiffTensor,
    pub wo: &'a DiffTensor,
}

/// Q = h W_q, K = c W_k, V = c W_v, out = h + softmax(QK^T / sqrt(d)) V W_o.
/// `h` is `[rows, d_alpha]`, `condition` is `[M, 32]` with M >= 1.
pub fn cross_attention(
    h: &DiffTensor,
    condition: &DiffTensor,
    attn: &AttnWeights,
) -> Result<DiffTensor> {
    let q = h.matmul(attn.wq)?;
    let k = condition.matmul(attn.wk)?;
    let v = condition.matmul(attn.wv)?;
    let scores = q
        .matmul(&k.transpose())?
        .scale(1.0 / (D_ATTN as f64).sqrt());
    let mixed = scores.softmax_rows().matmul(&v)?;
    h.add(&mixed.matmul(attn.wo)?)
}

pub struct LeasedGenerator {
    with_attention: bool,
    handles: Vec<DiffTensor>,
}

impl LeasedGenerator {
    fn h(&self, i: usize) -> &DiffTensor {
        &self.handles[i]
    }

    fn attn(&self, base: usize) -> AttnWeights<'_> {
        AttnWeights {
            wq: self.h(base),
            wk: self.h(base + 1),
            wv: self.h(base + 2),
            wo: self.h(base + 3),
        }
    }

    /// Universal image perturbation `[1, 3072]` with every element in
    /// (-epsilon_v, epsilon_v), differentiable everywhere. `condition` holds
    /// caption embeddings `[M, 32]` of the opposite modality.
    pub fn image_uap(
        &self,
        tape: &Rc<Tape>,
        noise: &NoiseSeed,
        condition: &DiffTensor,
        epsilon_v: f64,
    ) -> Result<DiffTensor> {
        if epsilon_v <= 0.0 {
            return Err(Error::Contract("epsilon_v must be positive".into()));
        }
        let z = tape.constant(&noise.z_v).reshape(1, Z_V_LEN)?;
        let mut x = z.matmul(self.h(P_IMG_W1))?.add(self.h(P_IMG_B1))?.tanh();
        if self.with_attention {
            x = cross_attention(&x, condition, &self.attn(P_IMG_WQ))?;
        }
        x = x.matmul(self.h(P_IMG_W2))?.add(self.h(P_IMG_B2))?.tanh();
        let raw = x.matmul(self.h(P_IMG_W3))?.add(self.h(P_IMG_B3))?;
        Ok(raw.tanh().scale(epsilon_v))
    }

    /// Adversarial text embedding `[1, 64]` in token-embedding space.
    /// `condition` is the matched image's embedding `[1, 32]`.
    pub fn text_embedding(
        &self,
        tape: &Rc<Tape>,
        noise: &NoiseSeed,
        condition: &DiffTensor,
    ) -> Result<DiffTensor> {
        let z = tape.constant(&noise.z_t);
        let mut x = z.matmul(self.h(P_TXT_W1))?.add(self.h(P_TXT_B1))?.tanh();
        if self.with_attention {
            x = cross_attention(&x, condition, &self.attn(P_TXT_WQ))?;
        }
        x.matmul(self.h(P_TXT_W2))?.add(self.h(P_TXT_B2))
    }

    pub fn grads(&self, params: &ParamSet) -> Vec<Vec<f64>> {
        self.handles
            .iter()
            .zip(params.ids())
            .map(|(h, id)| h.grad().unwrap_or_else(|| vec![0.0; params.tensor(id).len()]))
            .collect()
    }
}

/// Nearest vocabulary token to an adversarial embedding by cosine
/// similarity; ties break toward the smaller token id.
pub fn project_to_vocab(adv_embedding: &[f64], model: &DualEncoderModel) -> Result<u16> {
    if adv_embedding.len() != HIDDEN {
        return Err(Error::InvalidShape(format!(
            "adversarial embedding has {} dims, expected {HIDDEN}",
            adv_embedding.len()
        )));
    }
    let norm = adv_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return Err(Error::DegenerateNorm(
            "adversarial embedding has no direction".into(),
        ));
    }
    let table = model
        .params
        .by_name("txt.table")
        .expect("text embedding table");
    let mut best: Option<(f64, u16)> = None;
    for t in 0..VOCAB_SIZE {
        let row = table.row(t);
        let row_norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if row_norm < 1e-12 {
            continue;
        }
        let dot: f64 = row.iter().zip(adv_embedding).map(|(a, b)| a * b).sum();
        let cos = dot / (row_norm * norm);
        if best.map_or(true, |(b, _)| cos > b) {
            best = Some((cos, t as u16));
        }
    }
    Ok(best.expect("vocabulary is non-empty").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ArchKind;
    use crate::tensor::fd::finite_diff_check;

    fn cond_rows(m: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "test/cond", 0);
        let mut t = Tensor::randn(&mut r, m, EMBED_D, 1.0);
        for i in 0..m {
            let norm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in t.row_mut(i) {
                *v /= norm;
            }
        }
        t
    }

    #[test]
    fn zero_query_attends_uniformly() {
        let tape = Tape::new();
        let mut r = rng::stream(1, "t", 0);
        let h = tape.constant(&Tensor::randn(&mut r, 1, 8, 1.0));
        let cond = tape.constant(&cond_rows(4, 2));
        let wq = tape.constant(&Tensor::zeros(8, D_ATTN));
        let wk = tape.constant(&Tensor::randn(&mut r, EMBED_D, D_ATTN, 0.5));
        let wv = tape.constant(&Tensor::randn(&mut r, EMBED_D, D_ATTN, 0.5));
        let wo = tape.constant(&Tensor::randn(&mut r, D_ATTN, 8, 0.5));
        let out = cross_attention(&h, &cond, &AttnWeights { wq: &wq, wk: &wk, wv: &wv, wo: &wo })
            .unwrap();
        // Uniform weights mean the mixed value is the mean V row.
        let v = cond.matmul(&wv).unwrap().mean_groups(4).unwrap();
        let want = h.add(&v.matmul(&wo).unwrap()).unwrap().values();
        for (a, b) in out.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_condition_row_gets_weight_one() {
        let tape = Tape::new();
        let mut r = rng::stream(3, "t", 0);
        let h = tape.constant(&Tensor::randn(&mut r, 1, 8, 1.0));
        let cond = tape.constant(&cond_rows(1, 4));
        let wq = tape.constant(&Tensor::randn(&mut r, 8, D_ATTN, 0.5));
        let wk = tape.constant(&Tensor::randn(&mut r, EMBED_D, D_ATTN, 0.5));
        let wv = tape.constant(&Tensor::randn(&mut r, EMBED_D, D_ATTN, 0.5));
        let wo = tape.constant(&Tensor::randn(&mut r, D_ATTN, 8, 0.5));
        let out = cross_attention(&h, &cond, &AttnWeights { wq: &wq, wk: &wk, wv: &wv, wo: &wo })
            .unwrap();
        let want = h
            .add(&cond.matmul(&wv).unwrap().matmul(&wo).unwrap())
            .unwrap()
            .values();
        for (a, b) in out.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let cond = cond_rows(3, 5);
        let mut r = rng::stream(6, "t", 0);
        let h0 = Tensor::randn(&mut r, 1, 8, 1.0);
        let mut params = ParamSet::new();
        params.push("wq", Tensor::randn(&mut r, 8, D_ATTN, 0.5));
        params.push("wk", Tensor::randn(&mut r, EMBED_D, D_ATTN, 0.5));
        params.push("wv", Tensor::randn(&mut r, EMBED_D, D_ATTN, 0.5));
        params.push("wo", Tensor::randn(&mut r, D_ATTN, 8, 0.5));

        let build = |p: &ParamSet, want_grad: bool| -> (f64, Option<Vec<Vec<f64>>>) {
            let tape = Tape::new();
            let h = tape.constant(&h0);
            let c = tape.constant(&cond);
            let hs: Vec<DiffTensor> = p
                .iter()
                .map(|(_, t)| if want_grad { tape.leaf(t) } else { tape.constant(t) })
                .collect();
            let out = cross_attention(
                &h,
                &c,
                &AttnWeights { wq: &hs[0], wk: &hs[1], wv: &hs[2], wo: &hs[3] },
            )
            .unwrap();
            let loss = out.tanh().sum_all();
            let value = loss.scalar().unwrap();
            if want_grad {
                loss.backward().unwrap();
                (value, Some(hs.iter().map(|h| h.grad().unwrap()).collect()))
            } else {
                (value, None)
            }
        };
        let (_, grads) = build(&params, true);
        let report = finite_diff_check(&mut params, &grads.unwrap(), 1e-5, |p| Ok(build(p, false).0))
            .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {:.3e}", report.max_rel_err);
    }

    #[test]
    fn image_uap_respects_budget_for_any_params() {
        let eps = 12.0 / 255.0;
        for seed in 0..5 {
            let gen = GeneratorModel::new(seed, true);
            let noise = NoiseSeed::new(seed);
            let tape = Tape::new();
            let lease = gen.lease(&tape, false);
            let cond = tape.constant(&cond_rows(3, seed));
            let delta = lease.image_uap(&tape, &noise, &cond, eps).unwrap();
            assert_eq!(delta.dims(), (1, IMG_LEN));
            let max = delta.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= eps, "max {max} exceeds {eps}");
        }
    }

    #[test]
    fn zero_final_layer_means_zero_outputs() {
        let mut gen = GeneratorModel::new(9, true);
        for name in ["img.w3", "img.b3", "txt.w2", "txt.b2"] {
            let t = gen.params.by_name(name).unwrap();
            let zero = Tensor::zeros(t.rows(), t.cols());
            for id in gen.params.ids() {
                if gen.params.name(id) == name {
                    *gen.params.tensor_mut(id) = zero.clone();
                }
            }
        }
        let noise = NoiseSeed::new(9);
        let tape = Tape::new();
        let lease = gen.lease(&tape, false);
        let cond = tape.constant(&cond_rows(2, 9));
        let delta = lease.image_uap(&tape, &noise, &cond, 0.05).unwrap();
        assert!(delta.values().iter().all(|&v| v == 0.0));
        let cond1 = tape.constant(&cond_rows(1, 9));
        let emb = lease.text_embedding(&tape, &noise, &cond1).unwrap();
        assert!(emb.values().iter().all(|&v| v == 0.0));
        assert_eq!(emb.dims(), (1, HIDDEN));
    }

    #[test]
    fn conditioning_is_live() {
        let gen = GeneratorModel::new(11, true);
        let noise = NoiseSeed::new(11);
        let tape = Tape::new();
        let lease = gen.lease(&tape, false);
        let d1 = lease
            .image_uap(&tape, &noise, &tape.constant(&cond_rows(3, 1)), 0.05)
            .unwrap();
        let d2 = lease
            .image_uap(&tape, &noise, &tape.constant(&cond_rows(3, 2)), 0.05)
            .unwrap();
        let max_diff = d1
            .values()
            .iter()
            .zip(d2.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_diff > 0.0);

        let e1 = lease
            .text_embedding(&tape, &noise, &tape.constant(&cond_rows(1, 3)))
            .unwrap();
        let e2 = lease
            .text_embedding(&tape, &noise, &tape.constant(&cond_rows(1, 4)))
            .unwrap();
        assert_ne!(e1.values(), e2.values());

        // Without attention the condition must be inert.
        let plain = GeneratorModel::new(11, false);
        let lease = plain.lease(&tape, false);
        let d1 = lease
            .image_uap(&tape, &noise, &tape.constant(&cond_rows(3, 1)), 0.05)
            .unwrap();
        let d2 = lease
            .image_uap(&tape, &noise, &tape.constant(&cond_rows(3, 2)), 0.05)
            .unwrap();
        assert_eq!(d1.values(), d2.values());
    }

    #[test]
    fn vocab_projection_matches_brute_force() {
        let model = DualEncoderModel::new(ArchKind::MeanPool, 21);
        let table = model.params.by_name("txt.table").unwrap().clone();

        // Exact row match.
        assert_eq!(project_to_vocab(table.row(17), &model).unwrap(), 17);

        // Scale invariance.
        let scaled: Vec<f64> = table.row(17).iter().map(|v| v * 3.5).collect();
        assert_eq!(project_to_vocab(&scaled, &model).unwrap(), 17);

        // Brute-force agreement on random embeddings.
        let mut r = rng::stream(2, "proj", 0);
        for _ in 0..100 {
            let emb = Tensor::randn(&mut r, 1, HIDDEN, 1.0);
            let got = project_to_vocab(emb.values(), &model).unwrap();
            let mut best = (f64::NEG_INFINITY, 0u16);
            for t in 0..VOCAB_SIZE as u16 {
                let row = table.row(t as usize);
                let dot: f64 = row.iter().zip(emb.values()).map(|(a, b)| a * b).sum();
                let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ne = emb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = dot / (nr * ne);
                if cos > best.0 {
                    best = (cos, t);
                }
            }
            assert_eq!(got, best.1);
        }

        // Negated row: must agree with the scan, not blindly return 17.
        let neg: Vec<f64> = table.row(17).iter().map(|v| -v).collect();
        let got = project_to_vocab(&neg, &model).unwrap();
        let mut best = (f64::NEG_INFINITY, 0u16);
        for t in 0..VOCAB_SIZE as u16 {
            let row = table.row(t as usize);
            let dot: f64 = row.iter().zip(&neg).map(|(a, b)| a * b).sum();
            let nr = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ne = neg.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dot / (nr * ne) > best.0 {
                best = (dot / (nr * ne), t);
            }
        }
        assert_eq!(got, best.1);

        // Zero embedding is rejected.
        assert!(matches!(
            project_to_vocab(&vec![0.0; HIDDEN], &model),
            Err(Error::DegenerateNorm(_))
        ));
    }

    #[test]
    fn noise_is_fixed_per_seed() {
        let a = NoiseSeed::new(5);
        let b = NoiseSeed::new(5);
        assert_eq!(a.z_v.values(), b.z_v.values());
        assert_eq!(a.z_t.values(), b.z_t.values());
        let c = NoiseSeed::new(6);
        assert_ne!(a.z_v.values(), c.z_v.values());
    }
}
