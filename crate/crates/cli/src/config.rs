//! Run configuration: one `key = value` file describes a whole pipeline
//! run. Every key has a default, unknown keys are rejected, and the
//! effective configuration is archived beside each command's outputs so a
//! run directory is reproducible from its contents alone.

use cpgc_core::attack::AttackConfig;
use cpgc_core::corpus::Domain;
use cpgc_core::encoder::pretrain::{PretrainConfig, DEFAULT_ZOO};
use cpgc_core::encoder::ArchKind;
use cpgc_core::error::{Error, Result};
use cpgc_core::eval::defense::DefenseKind;
use cpgc_core::eval::{AblationVariant, PerturbMode};
use cpgc_core::kv::{self, Manifest};
use std::path::{Path, PathBuf};

/// Environment override for the run directory root; the `--out` flag wins
/// over it, and `./runs` is the fallback.
pub const RUN_ROOT_ENV: &str = "CPGC_RUN_ROOT";

/// Default held-out R@1 every zoo member must clear in both directions.
pub const DEFAULT_RECALL_FLOOR: f64 = 0.8;

/// Resolved output layout: everything a run writes lives under one root.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    /// Root precedence: `--out` flag, then `CPGC_RUN_ROOT`, then `./runs`,
    /// absolutized immediately so later chdirs cannot move outputs.
    pub fn resolve(out: Option<&Path>) -> Result<RunPaths> {
        let root = out
            .map(PathBuf::from)
            .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let root = std::path::absolute(&root).map_err(|e| Error::Io {
            path: root.clone(),
            source: e,
        })?;
        Ok(RunPaths { root })
    }

    pub fn corpus_dir(&self, domain: Domain) -> PathBuf {
        self.root.join("corpus").join(domain.tag())
    }

    pub fn zoo_dir(&self) -> PathBuf {
        self.root.join("zoo")
    }

    /// Checkpoint stem for one member; matches `ModelZoo::member_name`.
    pub fn member_stem(&self, arch: ArchKind, seed: u64) -> PathBuf {
        self.zoo_dir().join(format!("{}_s{}", arch.tag(), seed))
    }

    pub fn artifact_dir(&self, method: &str) -> PathBuf {
        self.root.join("artifacts").join(method)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// What `train-uap` trains: a recipe variant of the full method, or one of
/// the two baselines used for comparison.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Method {
    Variant(AblationVariant),
    /// Unconditioned generator maximizing matched-pair embedding distance.
    Gap,
    /// Uniform noise at the same budget plus a uniformly drawn word.
    Random,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Variant(v) => v.tag(),
            Method::Gap => "gap",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "gap" => Ok(Method::Gap),
            "random" => Ok(Method::Random),
            other => AblationVariant::parse(other).map(Method::Variant).map_err(|_| {
                Error::Parse {
                    path: "<variant>".into(),
                    line: 0,
                    msg: format!(
                        "unknown method {s:?} (expected full, no_cl, no_dis, \
                         random_positives, no_cross_attention, gap, or random)"
                    ),
                }
            }),
        }
    }
}

/// Effective settings for every command, fully resolved before execution.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    pub paths: RunPaths,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub m: usize,
    pub domains: Vec<Domain>,
    pub zoo: Vec<(ArchKind, u64)>,
    pub pretrain: PretrainConfig,
    pub recall_floor: f64,
    pub attack: AttackConfig,
    pub ks: Vec<usize>,
    pub mode: PerturbMode,
    pub defense: Option<DefenseKind>,
}

/// Keys with fixed names; `attack.*` suffixes are validated against the
/// attack config's own pair set.
const KNOWN_KEYS: &[&str] = &[
    "run.seed",
    "corpus.n_train",
    "corpus.n_test",
    "corpus.m",
    "corpus.domains",
    "zoo.members",
    "pretrain.epochs",
    "pretrain.batch",
    "pretrain.temperature",
    "pretrain.lr",
    "pretrain.floor",
    "eval.ks",
    "eval.mode",
    "eval.defense",
];

fn bad_key(path: &Path, msg: String) -> Error {
    Error::Parse { path: path.to_path_buf(), line: 0, msg }
}

fn parse_list<T, F>(raw: &str, what: &str, f: F) -> Result<Vec<T>>
where
    F: Fn(&str) -> Result<T>,
{
    let items = raw
        .split(',')
        .map(|s| f(s.trim()))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Contract(format!("{what} must be non-empty")));
    }
    Ok(items)
}

fn parse_zoo_spec(raw: &str) -> Result<Vec<(ArchKind, u64)>> {
    parse_list(raw, "zoo.members", |entry| {
        let (arch, seed) = entry.split_once(':').ok_or_else(|| {
            Error::Contract(format!("zoo member {entry:?} is not arch:seed"))
        })?;
        let seed = seed.parse::<u64>().map_err(|_| {
            Error::Contract(format!("zoo member {entry:?} has a non-integer seed"))
        })?;
        Ok((ArchKind::parse(arch)?, seed))
    })
}

impl RunConfig {
    /// Loads a config file (all keys optional), applying the `--seed`
    /// override and resolving paths. `path = None` yields pure defaults.
    pub fn load(
        path: Option<&Path>,
        seed_override: Option<u64>,
        out: Option<&Path>,
    ) -> Result<RunConfig> {
        let (manifest, origin) = match path {
            Some(p) => (Manifest::read_file(p)?, p.to_path_buf()),
            None => (Manifest::parse(Path::new("<defaults>"), "")?, PathBuf::from("<defaults>")),
        };
        let attack_keys: Vec<String> = AttackConfig::default()
            .to_pairs()
            .into_iter()
            .map(|(k, _)| format!("attack.{k}"))
            .collect();
        for (key, _) in manifest.pairs() {
            let known = KNOWN_KEYS.contains(&key.as_str())
                || attack_keys.iter().any(|k| k == key);
            if !known {
                return Err(bad_key(&origin, format!("unknown config key {key:?}")));
            }
        }

        let seed = match seed_override {
            Some(s) => s,
            None => match manifest.get("run.seed") {
                Some(_) => manifest.require_parsed("run.seed")?,
                None => 7,
            },
        };

        let opt = |key: &str, default: &str| -> String {
            manifest.get(key).unwrap_or(default).to_string()
        };
        let n_train = opt("corpus.n_train", "2000").parse::<usize>().map_err(|_| {
            bad_key(&origin, "corpus.n_train must be an integer".into())
        })?;
        let n_test = opt("corpus.n_test", "500").parse::<usize>().map_err(|_| {
            bad_key(&origin, "corpus.n_test must be an integer".into())
        })?;
        let m = opt("corpus.m", "3").parse::<usize>().map_err(|_| {
            bad_key(&origin, "corpus.m must be an integer".into())
        })?;
        let domains = parse_list(&opt("corpus.domains", "A"), "corpus.domains", Domain::parse)?;

        let zoo = match manifest.get("zoo.members") {
            Some(raw) => parse_zoo_spec(raw)?,
            None => DEFAULT_ZOO.to_vec(),
        };

        let base = PretrainConfig::default();
        let pretrain = PretrainConfig {
            epochs: opt("pretrain.epochs", &base.epochs.to_string())
                .parse()
                .map_err(|_| bad_key(&origin, "pretrain.epochs must be an integer".into()))?,
            batch: opt("pretrain.batch", &base.batch.to_string())
                .parse()
                .map_err(|_| bad_key(&origin, "pretrain.batch must be an integer".into()))?,
            temperature: opt("pretrain.temperature", &base.temperature.to_string())
                .parse()
                .map_err(|_| bad_key(&origin, "pretrain.temperature must be a number".into()))?,
            lr: opt("pretrain.lr", &base.lr.to_string())
                .parse()
                .map_err(|_| bad_key(&origin, "pretrain.lr must be a number".into()))?,
        };
        let recall_floor = opt("pretrain.floor", &DEFAULT_RECALL_FLOOR.to_string())
            .parse::<f64>()
            .map_err(|_| bad_key(&origin, "pretrain.floor must be a number".into()))?;

        // Attack settings: file entries overlay the desk preset (whose seed
        // is the run seed), then the merged set parses as one unit so the
        // usual validation applies.
        let mut attack_pairs: Vec<(String, String)> = AttackConfig::desk(seed)
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("attack.{k}"), v))
            .collect();
        for (key, value) in manifest.pairs() {
            if let Some(slot) = attack_pairs.iter_mut().find(|(k, _)| k == key) {
                slot.1 = value.clone();
            }
        }
        let rendered = kv::render(&attack_pairs)?;
        let attack = AttackConfig::from_manifest(&Manifest::parse(&origin, &rendered)?)?;

        let ks = parse_list(&opt("eval.ks", "1,5,10"), "eval.ks", |s| {
            s.parse::<usize>()
                .map_err(|_| Error::Contract(format!("bad k {s:?}")))
                .and_then(|k| {
                    if k == 0 {
                        Err(Error::Contract("k must be positive".into()))
                    } else {
                        Ok(k)
                    }
                })
        })?;
        let mode = PerturbMode::parse(&opt("eval.mode", "joint"))?;
        let defense = match opt("eval.defense", "none").as_str() {
            "none" => None,
            other => Some(DefenseKind::parse(other)?),
        };

        Ok(RunConfig {
            command: String::new(),
            paths: RunPaths::resolve(out)?,
            seed,
            n_train,
            n_test,
            m,
            domains,
            zoo,
            pretrain,
            recall_floor,
            attack,
            ks,
            mode,
            defense,
        })
    }

    /// Full effective-settings snapshot; each command archives this beside
    /// its outputs.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = vec![
            ("command".into(), self.command.clone()),
            ("run.seed".into(), self.seed.to_string()),
            ("corpus.n_train".into(), self.n_train.to_string()),
            ("corpus.n_test".into(), self.n_test.to_string()),
            ("corpus.m".into(), self.m.to_string()),
            (
                "corpus.domains".into(),
                self.domains.iter().map(|d| d.tag()).collect::<Vec<_>>().join(","),
            ),
            (
                "zoo.members".into(),
                self.zoo
                    .iter()
                    .map(|(a, s)| format!("{}:{s}", a.tag()))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("pretrain.epochs".into(), self.pretrain.epochs.to_string()),
            ("pretrain.batch".into(), self.pretrain.batch.to_string()),
            ("pretrain.temperature".into(), self.pretrain.temperature.to_string()),
            ("pretrain.lr".into(), self.pretrain.lr.to_string()),
            ("pretrain.floor".into(), self.recall_floor.to_string()),
            ("eval.ks".into(), self.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")),
            ("eval.mode".into(), self.mode.tag().into()),
            (
                "eval.defense".into(),
                self.defense.map_or("none".into(), |d| d.tag().to_string()),
            ),
        ];
        pairs.extend(
            self.attack
                .to_pairs()
                .into_iter()
                .map(|(k, v)| (format!("attack.{k}"), v)),
        );
        pairs
    }
}
