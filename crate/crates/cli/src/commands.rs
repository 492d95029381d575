//! The five pipeline commands. Each returns a summary struct (printed
//! human-readable along the way), writes its outputs under the run root,
//! refuses to overwrite existing outputs without `force`, and archives the
//! effective configuration beside what it wrote.

use crate::config::{Method, RunConfig};
use crate::report;
use cpgc_core::attack::{random_baseline, train_gap_baseline, train_joint_uap, TrainedUap};
use cpgc_core::corpus::io::{read_corpus, write_corpus};
use cpgc_core::corpus::{generate_corpus, Corpus, Domain};
use cpgc_core::encoder::pretrain::{pretrain_zoo, ModelZoo};
use cpgc_core::encoder::retrieval::{recall_at_k, Direction};
use cpgc_core::encoder::DualEncoderModel;
use cpgc_core::error::{Error, Result};
use cpgc_core::eval::defense::DefenseKind;
use cpgc_core::eval::{
    evaluate_transfer, render_asr_chart, render_table, reports_to_csv, EvalOptions, EvalReport,
    Task,
};
use cpgc_core::generator::artifact::UapArtifact;
use cpgc_core::kv;
use cpgc_core::tensor::checkpoint;
use std::fs;
use std::path::{Path, PathBuf};

/// Overwrite guard: outputs are only replaced under `--force`.
fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Contract(format!(
            "refusing to overwrite {}; pass --force to replace it",
            path.display()
        )));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Archives the effective settings (plus command-specific extras) so the
/// output directory reproduces the run without the original config file.
fn archive_config(cfg: &RunConfig, extras: &[(&str, String)], path: &Path) -> Result<()> {
    let mut pairs = cfg.to_pairs();
    for (k, v) in extras {
        pairs.push((format!("this.{k}"), v.clone()));
    }
    kv::write_file(path, &pairs)
}

fn load_corpus(cfg: &RunConfig, domain: Domain) -> Result<Corpus> {
    let dir = cfg.paths.corpus_dir(domain);
    if !dir.join("corpus.manifest").exists() {
        return Err(Error::Contract(format!(
            "no corpus for domain {} under {} (run gen-data first)",
            domain.tag(),
            dir.display()
        )));
    }
    read_corpus(&dir)
}

fn load_zoo(cfg: &RunConfig) -> Result<ModelZoo> {
    let members = cfg
        .zoo
        .iter()
        .map(|&(arch, seed)| {
            let stem = cfg.paths.member_stem(arch, seed);
            if !checkpoint::manifest_path(&stem).exists() {
                return Err(Error::Contract(format!(
                    "missing zoo checkpoint {} (run pretrain first)",
                    stem.display()
                )));
            }
            DualEncoderModel::load(&stem)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelZoo { members })
}

#[derive(Debug)]
pub struct GenDataSummary {
    /// (domain, fingerprint, manifest path) per generated corpus.
    pub written: Vec<(Domain, String, PathBuf)>,
}

/// Generates and persists one corpus per configured domain, printing each
/// manifest. Domains share attribute records; only rendering differs.
pub fn cmd_gen_data(cfg: &RunConfig, force: bool) -> Result<GenDataSummary> {
    let mut written = Vec::new();
    for &domain in &cfg.domains {
        let dir = cfg.paths.corpus_dir(domain);
        refuse_existing(&dir.join("corpus.manifest"), force)?;
        create_dir(&dir)?;
        let corpus = generate_corpus(cfg.n_train, cfg.n_test, cfg.m, domain, cfg.seed)?;
        let manifest_path = write_corpus(&corpus, &dir)?;
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Io { path: manifest_path.clone(), source: e })?;
        println!("# corpus domain {} -> {}", domain.tag(), dir.display());
        print!("{text}");
        written.push((domain, corpus.fingerprint(), manifest_path));
    }
    Ok(GenDataSummary { written })
}

#[derive(Debug)]
pub struct MemberReport {
    pub name: String,
    pub stem: PathBuf,
    pub recall_tr: f64,
    pub recall_ir: f64,
}

#[derive(Debug)]
pub struct PretrainSummary {
    pub members: Vec<MemberReport>,
}

/// Pre-trains every zoo member on the given domain's corpus, prints each
/// held-out R@1, and fails — saving nothing — if any member misses the
/// recall floor in either direction.
pub fn cmd_pretrain(cfg: &RunConfig, domain: Domain, force: bool) -> Result<PretrainSummary> {
    let corpus = load_corpus(cfg, domain)?;
    for &(arch, seed) in &cfg.zoo {
        let stem = cfg.paths.member_stem(arch, seed);
        refuse_existing(&checkpoint::manifest_path(&stem), force)?;
    }
    let zoo = pretrain_zoo(&corpus, &cfg.zoo, &cfg.pretrain)?;

    let mut reports = Vec::new();
    let mut below = Vec::new();
    for model in &zoo.members {
        let name = ModelZoo::member_name(model);
        let tr = recall_at_k(model, corpus.test(), 1, Direction::ImageToText)?;
        let ir = recall_at_k(model, corpus.test(), 1, Direction::TextToImage)?;
        println!("{name}: held-out R@1 image->text {tr:.3}, text->image {ir:.3}");
        if tr < cfg.recall_floor || ir < cfg.recall_floor {
            below.push(format!("{name} ({tr:.3}/{ir:.3})"));
        }
        reports.push(MemberReport { name, stem: PathBuf::new(), recall_tr: tr, recall_ir: ir });
    }
    if !below.is_empty() {
        return Err(Error::Training(format!(
            "below the {} R@1 floor: {}",
            cfg.recall_floor,
            below.join(", ")
        )));
    }

    create_dir(&cfg.paths.zoo_dir())?;
    for (model, rep) in zoo.members.iter().zip(reports.iter_mut()) {
        let stem = cfg.paths.member_stem(model.arch, model.seed);
        model.save(&stem)?;
        rep.stem = stem;
    }
    archive_config(cfg, &[("domain", domain.tag().into())], &cfg.paths.zoo_dir().join("zoo.config"))?;
    println!("saved {} checkpoints under {}", reports.len(), cfg.paths.zoo_dir().display());
    Ok(PretrainSummary { members: reports })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub method: String,
    /// Stem of the persisted artifact (`<stem>.manifest` / `<stem>.blob`).
    pub artifact_stem: PathBuf,
    pub max_abs: f64,
    pub adversarial_word: Option<u16>,
    pub trace_paths: Vec<PathBuf>,
}

fn write_trace(dir: &Path, name: &str, uap: &TrainedUap, out: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    write_text(&path, &uap.trace.to_csv())?;
    out.push(path);
    Ok(())
}

/// Trains the selected method against the surrogate (the first zoo member)
/// and persists the artifact plus per-iteration loss traces.
pub fn cmd_train_uap(
    cfg: &RunConfig,
    method: Method,
    domain: Domain,
    force: bool,
) -> Result<TrainSummary> {
    let corpus = load_corpus(cfg, domain)?;
    let (arch, seed) = cfg.zoo[0];
    let stem = cfg.paths.member_stem(arch, seed);
    if !checkpoint::manifest_path(&stem).exists() {
        return Err(Error::Contract(format!(
            "missing surrogate checkpoint {} (run pretrain first)",
            stem.display()
        )));
    }
    let surrogate = DualEncoderModel::load(&stem)?;

    let dir = cfg.paths.artifact_dir(method.tag());
    let artifact_stem = dir.join("uap");
    refuse_existing(&checkpoint::manifest_path(&artifact_stem), force)?;
    create_dir(&dir)?;

    let mut trace_paths = Vec::new();
    let artifact = match method {
        Method::Variant(variant) => {
            let acfg = variant.configure(&cfg.attack);
            let joint = train_joint_uap(&corpus, &surrogate, &acfg)?;
            write_trace(&dir, "trace_image.csv", &joint.image, &mut trace_paths)?;
            write_trace(&dir, "trace_text.csv", &joint.text, &mut trace_paths)?;
            joint.artifact
        }
        Method::Gap => {
            let uap = train_gap_baseline(&corpus, &surrogate, &cfg.attack)?;
            write_trace(&dir, "trace_image.csv", &uap, &mut trace_paths)?;
            uap.artifact
        }
        Method::Random => random_baseline(&surrogate, &cfg.attack)?,
    };

    // The artifact type enforces the budget invariants at construction and
    // at load; the printed check is the human-readable witness.
    let max_abs = artifact.delta_v.max_abs();
    println!(
        "budget: max|delta_v| = {max_abs:.6} <= epsilon_v = {:.6}; \
         word substitutions per caption <= {}",
        artifact.epsilon_v, artifact.epsilon_t
    );
    artifact.save(&artifact_stem)?;
    archive_config(
        cfg,
        &[("variant", method.tag().into()), ("train_domain", domain.tag().into())],
        &dir.join("train.config"),
    )?;
    println!(
        "saved {} artifact to {} (word: {})",
        method.tag(),
        artifact_stem.display(),
        artifact.adversarial_word.map_or("none".into(), |w| w.to_string()),
    );
    Ok(TrainSummary {
        method: method.tag().into(),
        artifact_stem,
        max_abs,
        adversarial_word: artifact.adversarial_word,
        trace_paths,
    })
}

#[derive(Debug)]
pub struct EvalSummary {
    pub reports: Vec<EvalReport>,
    pub csv_path: PathBuf,
    /// ASR at the smallest configured k, [TR, IR].
    pub white_box: [f64; 2],
    pub black_box_mean: [f64; 2],
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Evaluates a stored artifact across the whole zoo on one domain's test
/// split; writes CSV, fixed-width table, and per-task charts.
pub fn cmd_eval(
    cfg: &RunConfig,
    artifact_name: &str,
    domain: Domain,
    defense_flag: Option<DefenseKind>,
    force: bool,
) -> Result<EvalSummary> {
    let stem = cfg.paths.artifact_dir(artifact_name).join("uap");
    if !checkpoint::manifest_path(&stem).exists() {
        return Err(Error::Contract(format!(
            "missing artifact {} (run train-uap first)",
            stem.display()
        )));
    }
    let artifact = UapArtifact::load(&stem)?;
    let corpus = load_corpus(cfg, domain)?;
    let zoo = load_zoo(cfg)?;

    // Artifacts carry the domain they were fitted on; absent (hand-built
    // artifacts), the evaluation domain is assumed.
    let train_domain = artifact
        .config
        .iter()
        .find(|(k, _)| k == "train_domain")
        .map(|(_, v)| Domain::parse(v))
        .transpose()?
        .unwrap_or(corpus.domain);

    let opts = EvalOptions {
        ks: cfg.ks.clone(),
        mode: cfg.mode,
        defense: defense_flag.or(cfg.defense),
    };
    let reports = evaluate_transfer(&zoo, &artifact, &corpus, train_domain, &opts)?;

    let mut file_stem = artifact_name.to_string();
    if let Some(d) = opts.defense {
        file_stem.push('_');
        file_stem.push_str(d.tag());
    }
    if train_domain != corpus.domain {
        file_stem.push_str(&format!("_{}_to_{}", train_domain.tag(), corpus.domain.tag()));
    }
    let report_dir = cfg.paths.report_dir();
    let csv_path = report_dir.join(format!("{file_stem}.csv"));
    refuse_existing(&csv_path, force)?;
    create_dir(&report_dir)?;
    write_text(&csv_path, &reports_to_csv(&reports))?;
    let table = render_table(&reports);
    write_text(&report_dir.join(format!("{file_stem}.txt")), &table)?;
    let k_top = *cfg.ks.iter().min().expect("ks validated non-empty");
    for (task, suffix) in [(Task::TextRetrieval, "tr"), (Task::ImageRetrieval, "ir")] {
        let chart = render_asr_chart(&reports, task, k_top);
        write_text(&report_dir.join(format!("{file_stem}_{suffix}{k_top}.svg")), &chart)?;
    }
    archive_config(
        cfg,
        &[
            ("artifact", artifact_name.into()),
            ("eval_domain", domain.tag().into()),
            ("train_domain", train_domain.tag().into()),
        ],
        &report_dir.join(format!("{file_stem}.config")),
    )?;

    print!("{table}");
    let pick = |white: bool, task: Task| -> Vec<f64> {
        reports
            .iter()
            .filter(|r| r.is_white_box() == white && r.task == task && r.k == k_top)
            .map(|r| r.asr)
            .collect()
    };
    let white_box = [
        mean(&pick(true, Task::TextRetrieval)),
        mean(&pick(true, Task::ImageRetrieval)),
    ];
    let black_box_mean = [
        mean(&pick(false, Task::TextRetrieval)),
        mean(&pick(false, Task::ImageRetrieval)),
    ];
    println!(
        "ASR@{k_top} ({}): white-box TR {:.3} IR {:.3} | mean black-box TR {:.3} IR {:.3}",
        opts.mode.tag(),
        white_box[0],
        white_box[1],
        black_box_mean[0],
        black_box_mean[1],
    );
    println!("wrote {}", csv_path.display());
    Ok(EvalSummary { reports, csv_path, white_box, black_box_mean })
}

#[derive(Debug)]
pub struct ReportSummary {
    pub files: usize,
    pub rows: usize,
    pub path: PathBuf,
}

/// Merges evaluation CSVs (explicit paths, else every `*.csv` in the report
/// directory) into one method-comparison document.
pub fn cmd_report(cfg: &RunConfig, inputs: &[PathBuf], force: bool) -> Result<ReportSummary> {
    let files = if inputs.is_empty() {
        let dir = cfg.paths.report_dir();
        let mut found = Vec::new();
        if dir.is_dir() {
            let entries =
                fs::read_dir(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            for entry in entries {
                let path = entry.map_err(|e| Error::Io { path: dir.clone(), source: e })?.path();
                if path.extension().is_some_and(|e| e == "csv") {
                    found.push(path);
                }
            }
        }
        // Directory order is platform noise; merge order is lexicographic.
        found.sort();
        found
    } else {
        inputs.to_vec()
    };
    if files.is_empty() {
        return Err(Error::Contract(
            "no evaluation CSVs found; run eval first or pass paths".into(),
        ));
    }
    let merged = report::merge_csvs(&files)?;
    let doc = report::render_report(&merged);
    let path = cfg.paths.report_dir().join("report.md");
    refuse_existing(&path, force)?;
    create_dir(&cfg.paths.report_dir())?;
    write_text(&path, &doc)?;
    print!("{doc}");
    println!("wrote {}", path.display());
    Ok(ReportSummary { files: files.len(), rows: merged.len(), path })
}
