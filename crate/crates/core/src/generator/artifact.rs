//! The deliverable of an attack run: one universal image perturbation and
//! (optionally) one universal adversarial word, plus enough provenance to
//! reproduce and audit the run.

use crate::corpus::render::IMG_LEN;
use crate::corpus::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::tensor::{checkpoint, ParamSet, Tensor};
use std::path::Path;

#[derive(Clone, Debug)]
pub struct UapArtifact {
    /// `[1, 3072]`, flat 32x32x3; every element within the budget.
    pub delta_v: Tensor,
    /// Universal substitution word; `None` leaves captions untouched.
    pub adversarial_word: Option<u16>,
    /// L-infinity image budget the perturbation was trained under.
    pub epsilon_v: f64,
    /// Maximum substituted tokens per caption (0 or 1).
    pub epsilon_t: usize,
    /// Hash of the surrogate encoder the perturbation was crafted against.
    pub surrogate_hash: String,
    /// Training configuration snapshot, ordered key/value pairs.
    pub config: Vec<(String, String)>,
}

impl UapArtifact {
    pub fn new(
        delta_v: Tensor,
        adversarial_word: Option<u16>,
        epsilon_v: f64,
        surrogate_hash: String,
        config: Vec<(String, String)>,
    ) -> Result<Self> {
        if delta_v.rows() != 1 || delta_v.cols() != IMG_LEN {
            return Err(Error::InvalidShape(format!(
                "delta_v is {}x{}, expected 1x{IMG_LEN}",
                delta_v.rows(),
                delta_v.cols()
            )));
        }
        if !(epsilon_v > 0.0) {
            return Err(Error::Contract("epsilon_v must be positive".into()));
        }
        if delta_v.max_abs() > epsilon_v {
            return Err(Error::Contract(format!(
                "delta_v exceeds budget: {} > {epsilon_v}",
                delta_v.max_abs()
            )));
        }
        if let Some(w) = adversarial_word {
            if usize::from(w) >= VOCAB_SIZE {
                return Err(Error::Domain(format!("adversarial word {w} out of vocabulary")));
            }
        }
        Ok(UapArtifact {
            delta_v,
            epsilon_t: usize::from(adversarial_word.is_some()),
            adversarial_word,
            epsilon_v,
            surrogate_hash,
            config,
        })
    }

    /// The identity attack: zero image perturbation, no word substitution.
    pub fn null(epsilon_v: f64) -> Self {
        UapArtifact {
            delta_v: Tensor::zeros(1, IMG_LEN),
            adversarial_word: None,
            epsilon_v,
            epsilon_t: 0,
            surrogate_hash: String::new(),
            config: Vec::new(),
        }
    }

    /// Folds a text-side result into an image-side artifact so one file
    /// carries the full bimodal attack.
    pub fn with_word(mut self, word: u16) -> Result<Self> {
        if usize::from(word) >= VOCAB_SIZE {
            return Err(Error::Domain(format!("adversarial word {word} out of vocabulary")));
        }
        self.adversarial_word = Some(word);
        self.epsilon_t = 1;
        Ok(self)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut params = ParamSet::new();
        params.push("delta_v", self.delta_v.clone());
        let mut extra = vec![
            ("uap.kind".to_owned(), "universal-perturbation".to_owned()),
            ("uap.epsilon_v".to_owned(), format!("{}", self.epsilon_v)),
            ("uap.epsilon_t".to_owned(), self.epsilon_t.to_string()),
            (
                "uap.adversarial_word".to_owned(),
                self.adversarial_word
                    .map_or_else(|| "none".to_owned(), |w| w.to_string()),
            ),
            ("uap.surrogate_hash".to_owned(), self.surrogate_hash.clone()),
        ];
        for (k, v) in &self.config {
            extra.push((format!("config.{k}"), v.clone()));
        }
        checkpoint::save(stem, &params, &extra)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (params, manifest) = checkpoint::load(stem)?;
        let delta_v = params
            .by_name("delta_v")
            .ok_or_else(|| Error::Contract("artifact is missing delta_v".into()))?
            .clone();
        let epsilon_v: f64 = manifest.require_parsed("uap.epsilon_v")?;
        let word = match manifest.require("uap.adversarial_word")? {
            "none" => None,
            s => Some(s.parse::<u16>().map_err(|_| {
                Error::Contract(format!("bad adversarial word {s:?} in artifact"))
            })?),
        };
        let epsilon_t: usize = manifest.require_parsed("uap.epsilon_t")?;
        let config = manifest
            .pairs()
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("config.").map(|k| (k.to_owned(), v.clone()))
            })
            .collect();
        let artifact = UapArtifact::new(
            delta_v,
            word,
            epsilon_v,
            manifest.require("uap.surrogate_hash")?.to_owned(),
            config,
        )?;
        if artifact.epsilon_t != epsilon_t {
            return Err(Error::Contract(format!(
                "epsilon_t {epsilon_t} disagrees with stored word presence"
            )));
        }
        Ok(artifact)
    }
}
