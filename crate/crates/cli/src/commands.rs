use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use v2w_core::checkpoint::{Checkpoint, KIND_TFIDF_CLASS, KIND_TFIDF_LINK, KIND_V2W};
use v2w_core::corpus::{
    incremental_splits, ingest_nvd_files, random_split, read_csv_path, restrict_labels,
    temporal_split, write_csv, CveRecord, IngestTally, YearWindows,
};
use v2w_core::eval::{
    detect_new_cwe, evaluate, predict_paths, EncoderScorer, EvalOptions, LinkScorer, Novelty,
};
use v2w_core::synth::generate;
use v2w_core::tfidf::{ClassScorer, TfidfClassifier, TfidfLinkModel};
use v2w_core::tokenizer::Vocabulary;
use v2w_core::trainer::{pretrain, train_link, zero_shot_filter, TrainingCweSet, TrainingLog};
use v2w_core::{CweHierarchy, EvalReport, PredictionPath, V2wModel};

use crate::config::{architecture_diff, ModelArgs, ModelKind, Protocol, RunConfig};
use crate::Exit;

pub const CORPUS: &str = "corpus.csv";
pub const DEFINITIONS: &str = "cwe_definitions.csv";
pub const EDGES: &str = "cwe_edges.csv";
pub const VOCAB: &str = "vocab.txt";
pub const MODEL: &str = "model.ckpt";
pub const PRETRAINED: &str = "pretrained.ckpt";
pub const REPORT: &str = "report.json";

fn require(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Exit::Missing(format!("{what} {}", path.display())).into())
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save_bundle(dir: &Path, records: &[CveRecord], h: &CweHierarchy) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(records, std::fs::File::create(dir.join(CORPUS))?)?;
    h.write_csv(
        std::fs::File::create(dir.join(DEFINITIONS))?,
        std::fs::File::create(dir.join(EDGES))?,
    )?;
    Ok(())
}

pub fn load_hierarchy(dir: &Path) -> anyhow::Result<CweHierarchy> {
    let (defs, edges) = (dir.join(DEFINITIONS), dir.join(EDGES));
    require(&defs, "CWE definitions")?;
    require(&edges, "CWE edges")?;
    CweHierarchy::from_csv_paths(&defs, &edges)
        .with_context(|| format!("loading hierarchy from {}", dir.display()))
}

/// Corpus and hierarchy of a data directory; labels outside the hierarchy
/// are dropped.
pub fn load_bundle(dir: &Path) -> anyhow::Result<(Vec<CveRecord>, CweHierarchy)> {
    let h = load_hierarchy(dir)?;
    let path = dir.join(CORPUS);
    require(&path, "corpus")?;
    let records = read_csv_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let (records, outside) = restrict_labels(&records, &h);
    if outside > 0 {
        log::info!("{outside} records carried labels outside the hierarchy");
    }
    Ok((records, h))
}

pub struct Split {
    pub train: Vec<CveRecord>,
    pub unlabeled: Vec<CveRecord>,
    /// Named test sets.
    pub tests: Vec<(String, Vec<CveRecord>)>,
    pub seen: TrainingCweSet,
}

pub fn make_split(
    cfg: &RunConfig,
    records: &[CveRecord],
    h: &CweHierarchy,
) -> anyhow::Result<Split> {
    let zero_shot = cfg.protocol == Protocol::ZeroShot;
    if zero_shot && cfg.hold_out.is_empty() {
        bail!("the zero-shot protocol needs --hold-out");
    }
    if !zero_shot && !cfg.hold_out.is_empty() {
        bail!("--hold-out only applies to the zero-shot protocol");
    }
    let (split, tests) = match cfg.protocol {
        Protocol::Temporal => {
            let s = temporal_split(records, YearWindows::STANDARD);
            let tests = vec![
                ("test1".to_string(), s.test1.clone()),
                ("test2".to_string(), s.test2.clone()),
            ];
            (s, tests)
        }
        Protocol::Random | Protocol::ZeroShot => {
            let s = random_split(records, cfg.split_seed);
            let tests = vec![("test".to_string(), s.test1.clone())];
            (s, tests)
        }
        Protocol::Incremental => {
            let (_, s) =
                incremental_splits(records, &[cfg.last_train_year], YearWindows::STANDARD.test2)
                    .pop()
                    .expect("one window");
            let tests = vec![("test".to_string(), s.test2.clone())];
            (s, tests)
        }
    };
    let held: BTreeSet<_> = cfg.hold_out.iter().cloned().collect();
    let seen = TrainingCweSet::excluding(h, &held)?;
    let mut train = split.train;
    if zero_shot {
        let (kept, removed) = zero_shot_filter(&train, h, &held)?;
        log::info!("zero-shot: removed {removed} training records");
        train = kept;
    }
    Ok(Split {
        train,
        unlabeled: split.unlabeled,
        tests,
        seen,
    })
}

pub fn ingest(
    cfg: &RunConfig,
    nvd_dir: &Path,
    defs: &Path,
    edges: &Path,
    strict: bool,
) -> anyhow::Result<()> {
    require(nvd_dir, "NVD feed directory")?;
    require(defs, "CWE definitions")?;
    require(edges, "CWE edges")?;
    let mut feeds: Vec<PathBuf> = std::fs::read_dir(nvd_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    feeds.retain(|p| p.extension().is_some_and(|x| x == "json"));
    feeds.sort();
    if feeds.is_empty() {
        bail!("no .json feeds in {}", nvd_dir.display());
    }
    let h = CweHierarchy::from_csv_paths(defs, edges)?;
    let ingested = ingest_nvd_files(&feeds, strict)?;
    let out = cfg.out_dir()?;
    save_bundle(out, &ingested.records, &h)?;
    let mut tally: IngestTally = ingested.tally;
    tally.records = ingested.records.len();
    tally.labeled = ingested.records.iter().filter(|r| r.is_labeled()).count();
    let (_, outside) = restrict_labels(&ingested.records, &h);
    write_json(&out.join("ingest_tally.json"), &tally)?;
    cfg.save(out)?;
    println!("records={} labeled={}", tally.records, tally.labeled);
    println!(
        "rejected={} sentinel_labels={} missing_description={} empty_description={} malformed={} duplicates={} outside_hierarchy={}",
        tally.rejected,
        tally.sentinel_labels,
        tally.missing_description,
        tally.empty_description,
        tally.malformed,
        tally.duplicates,
        outside
    );
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> anyhow::Result<()> {
    let corpus = generate(&cfg.synth)?;
    let out = cfg.out_dir()?;
    save_bundle(out, &corpus.records, &corpus.hierarchy)?;
    write_json(&out.join("keywords.json"), &corpus.keywords)?;
    cfg.save(out)?;
    println!(
        "records={} cwes={}",
        corpus.records.len(),
        corpus.hierarchy.len()
    );
    Ok(())
}

fn all_texts(records: &[CveRecord], h: &CweHierarchy) -> Vec<String> {
    records
        .iter()
        .map(|r| r.description.clone())
        .chain(h.nodes().map(|n| n.description.clone()))
        .collect()
}

pub fn build_vocab(cfg: &RunConfig) -> anyhow::Result<()> {
    let (records, h) = load_bundle(cfg.data_dir()?)?;
    let vocab = Vocabulary::build(&all_texts(&records, &h), cfg.vocab_size)?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out)?;
    vocab.write(std::io::BufWriter::new(std::fs::File::create(
        out.join(VOCAB),
    )?))?;
    cfg.save(out)?;
    println!("tokens={}", vocab.len());
    Ok(())
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocabulary> {
    require(path, "vocabulary")?;
    Ok(Vocabulary::read(BufReader::new(std::fs::File::open(
        path,
    )?))?)
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require(path, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))
}

fn write_log(path: &Path, log: &TrainingLog) -> anyhow::Result<()> {
    log.write_csv(std::fs::File::create(path)?)?;
    Ok(())
}

pub fn pretrain_cmd(cfg: &mut RunConfig) -> anyhow::Result<()> {
    let (records, h) = load_bundle(cfg.data_dir()?)?;
    let split = make_split(cfg, &records, &h)?;
    let vocab = load_vocab(cfg.vocab.as_deref().context("pretraining needs --vocab")?)?;
    let mut model = V2wModel::new(cfg.model.clone(), vocab, cfg.train.seed)?;
    cfg.model = model.config().clone();
    let pool: Vec<CveRecord> = split
        .train
        .iter()
        .chain(&split.unlabeled)
        .cloned()
        .collect();
    let texts = all_texts(&pool, &h);
    let mut log = TrainingLog::default();
    let losses = pretrain(&mut model, &texts, &cfg.train, &mut log)?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out)?;
    model.to_checkpoint()?.save(&out.join(PRETRAINED))?;
    write_log(&out.join("pretrain_log.csv"), &log)?;
    cfg.save(out)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!(
            "sequences={} epochs={} loss {first:.4} -> {last:.4}",
            texts.len(),
            losses.len()
        );
    }
    Ok(())
}

/// Starts from `--init` when given, else from a fresh model over `--vocab`.
fn initial_model(
    cfg: &mut RunConfig,
    flags: &ModelArgs,
    replayed: bool,
) -> anyhow::Result<V2wModel> {
    let Some(init) = cfg.init.clone() else {
        let vocab = load_vocab(
            cfg.vocab
                .as_deref()
                .context("training needs --init or --vocab")?,
        )?;
        return Ok(V2wModel::new(cfg.model.clone(), vocab, cfg.train.seed)?);
    };
    let ck = load_checkpoint(&init)?;
    if ck.kind != KIND_V2W {
        return Err(Exit::Mismatch(format!(
            "{} holds a `{}` model, expected `{KIND_V2W}`",
            init.display(),
            ck.kind
        ))
        .into());
    }
    let mut model = V2wModel::from_checkpoint(&ck)?;
    let stored = model.config().clone();
    let mut conflicts = flags.conflicts(&stored);
    if replayed {
        conflicts.extend(architecture_diff(&cfg.model, &stored));
    }
    if !conflicts.is_empty() {
        return Err(Exit::Mismatch(format!(
            "{} disagrees with flags: {}",
            init.display(),
            conflicts.join(", ")
        ))
        .into());
    }
    let frozen = cfg.model.encoder.frozen_layers;
    let dropout = cfg.model.encoder.dropout;
    let mut config = stored;
    config.encoder.frozen_layers = frozen;
    config.encoder.dropout = dropout;
    config.validate()?;
    if config != *model.config() {
        let tensors = ck.tensors;
        model = V2wModel::from_parts(config, model.vocab().clone(), &tensors)?;
    }
    cfg.model = model.config().clone();
    Ok(model)
}

#[derive(Serialize)]
struct TrainSummary {
    train_records: usize,
    steps: usize,
    epoch_loss: Vec<f64>,
    skipped_records: usize,
    negative_shortfall: usize,
}

pub fn train_cmd(cfg: &mut RunConfig, flags: &ModelArgs, replayed: bool) -> anyhow::Result<()> {
    let (records, h) = load_bundle(cfg.data_dir()?)?;
    let split = make_split(cfg, &records, &h)?;
    let out = cfg.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out)?;
    let mut log = TrainingLog::default();
    let summary = match cfg.model_kind {
        ModelKind::V2w => {
            let mut model = initial_model(cfg, flags, replayed)?;
            let s = train_link(
                &mut model,
                &split.train,
                &h,
                &split.seen,
                &cfg.train,
                &mut log,
            )?;
            model.to_checkpoint()?.save(&out.join(MODEL))?;
            TrainSummary {
                train_records: split.train.len(),
                steps: s.steps,
                epoch_loss: s.epoch_loss,
                skipped_records: s.skipped_records,
                negative_shortfall: s.negative_shortfall,
            }
        }
        ModelKind::TfidfLink => {
            let texts = all_texts(&split.train, &h);
            let mut model = TfidfLinkModel::new(cfg.tfidf_link.clone(), &texts, cfg.train.seed)?;
            let mut tc = cfg.train.clone();
            tc.rd_enabled = false;
            let s = train_link(&mut model, &split.train, &h, &split.seen, &tc, &mut log)?;
            model.to_checkpoint()?.save(&out.join(MODEL))?;
            TrainSummary {
                train_records: split.train.len(),
                steps: s.steps,
                epoch_loss: s.epoch_loss,
                skipped_records: s.skipped_records,
                negative_shortfall: s.negative_shortfall,
            }
        }
        ModelKind::TfidfClass => {
            let mut model =
                TfidfClassifier::new(&split.train, &h, cfg.tfidf_class_hidden, cfg.train.seed)?;
            let s = model.train(&split.train, &cfg.train)?;
            model.to_checkpoint()?.save(&out.join(MODEL))?;
            TrainSummary {
                train_records: s.examples,
                steps: 0,
                epoch_loss: s.epoch_loss,
                skipped_records: 0,
                negative_shortfall: 0,
            }
        }
    };
    write_log(&out.join("training_log.csv"), &log)?;
    write_json(&out.join("train_summary.json"), &summary)?;
    cfg.save(&out)?;
    match summary.epoch_loss.last() {
        Some(l) => println!(
            "records={} epochs={} final_loss={l:.4}",
            summary.train_records,
            summary.epoch_loss.len()
        ),
        None => println!("records={} (nothing to train)", summary.train_records),
    }
    Ok(())
}

fn evaluate_all<S: LinkScorer>(
    scorer: &S,
    split: &Split,
    h: &CweHierarchy,
    cfg: &RunConfig,
) -> anyhow::Result<BTreeMap<String, EvalReport>> {
    let mut out = BTreeMap::new();
    for (name, test) in &split.tests {
        if test.iter().all(|r| !r.is_labeled()) {
            log::warn!("{name}: no labeled records; skipped");
            continue;
        }
        let opts = EvalOptions {
            protocol: format!(
                "{}:{name}",
                serde_json::to_value(cfg.protocol)?.as_str().unwrap_or("")
            ),
            beta: cfg.beta,
            monte_carlo_seed: cfg.monte_carlo_seed,
            random_baseline: true,
        };
        out.insert(
            name.clone(),
            evaluate(scorer, &split.train, test, h, &split.seen, &opts)?,
        );
    }
    Ok(out)
}

/// `run` is the training run's config; `cfg` carries the evaluation knobs.
pub fn evaluate_cmd(run: &RunConfig, cfg: &RunConfig, run_dir: &Path) -> anyhow::Result<()> {
    let (records, h) = load_bundle(run.data_dir()?)?;
    let split = make_split(run, &records, &h)?;
    let ck = load_checkpoint(&run_dir.join(MODEL))?;
    let reports = match ck.kind.as_str() {
        KIND_V2W => {
            let m = V2wModel::from_checkpoint(&ck)?;
            evaluate_all(&EncoderScorer::new(&m, &h)?, &split, &h, cfg)?
        }
        KIND_TFIDF_LINK => {
            let m = TfidfLinkModel::from_checkpoint(&ck)?;
            evaluate_all(&EncoderScorer::new(&m, &h)?, &split, &h, cfg)?
        }
        KIND_TFIDF_CLASS => {
            let m = TfidfClassifier::from_checkpoint(&ck)?;
            evaluate_all(&ClassScorer::new(&m, &h)?, &split, &h, cfg)?
        }
        other => bail!("unknown checkpoint kind `{other}`"),
    };
    if reports.is_empty() {
        bail!(
            "no labeled test records under the {:?} protocol",
            run.protocol
        );
    }
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(out)?;
    write_json(&out.join(REPORT), &reports)?;
    cfg.save(out)?;
    for r in reports.values() {
        print!("{}", r.to_table());
    }
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    paths: Vec<PredictionPath>,
    novelty: Novelty,
}

fn predict_with<S: LinkScorer>(
    scorer: &S,
    text: &str,
    h: &CweHierarchy,
    cfg: &RunConfig,
) -> anyhow::Result<Prediction> {
    let paths = predict_paths(scorer, text, h, cfg.k)?;
    let u = TrainingCweSet::excluding(h, &cfg.hold_out.iter().cloned().collect())?;
    let q = scorer.prepare(text)?;
    let novelty = detect_new_cwe(scorer, &q, &u, cfg.beta)?;
    Ok(Prediction { paths, novelty })
}

pub fn predict_cmd(cfg: &RunConfig, model: &Path, text: Option<String>) -> anyhow::Result<()> {
    let h = load_hierarchy(cfg.data_dir()?)?;
    let ck = load_checkpoint(model)?;
    let text = match text {
        Some(t) => t,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let text = text.trim();
    if text.is_empty() {
        bail!("empty description");
    }
    let p = match ck.kind.as_str() {
        KIND_V2W => {
            let m = V2wModel::from_checkpoint(&ck)?;
            predict_with(&EncoderScorer::new(&m, &h)?, text, &h, cfg)?
        }
        KIND_TFIDF_LINK => {
            let m = TfidfLinkModel::from_checkpoint(&ck)?;
            predict_with(&EncoderScorer::new(&m, &h)?, text, &h, cfg)?
        }
        KIND_TFIDF_CLASS => {
            let m = TfidfClassifier::from_checkpoint(&ck)?;
            predict_with(&ClassScorer::new(&m, &h)?, text, &h, cfg)?
        }
        other => bail!("unknown checkpoint kind `{other}`"),
    };
    for (i, path) in p.paths.iter().enumerate() {
        let steps: Vec<String> = path
            .nodes
            .iter()
            .zip(&path.scores)
            .map(|(n, s)| format!("{n} ({s:.4})"))
            .collect();
        println!("{:>2}. {}", i + 1, steps.join(" > "));
    }
    println!(
        "novel: {}",
        if p.novelty == Novelty::Novel {
            "yes"
        } else {
            "no"
        }
    );
    if let Some(out) = cfg.out.as_deref() {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("prediction.json"), &p)?;
        cfg.save(out)?;
    }
    Ok(())
}
