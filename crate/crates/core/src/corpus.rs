//! CVE records: NVD feed ingestion, CSV corpus files, temporal and stratified
//! splits, training-count buckets and synonym augmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hierarchy::{CweHierarchy, CweId};

pub const SENTINEL_LABELS: [&str; 2] = ["NVD-CWE-Other", "NVD-CWE-noinfo"];
pub const REJECT_MARKER: &str = "** REJECT **";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CveRecord {
    pub id: String,
    pub description: String,
    pub year: i32,
    pub labels: BTreeSet<CweId>,
}

impl CveRecord {
    pub fn is_labeled(&self) -> bool {
        !self.labels.is_empty()
    }

    /// Smallest label, used as the stratification category.
    pub fn category(&self) -> Option<&CweId> {
        self.labels.iter().next()
    }
}

/// Sort key `(year, number)` parsed from `CVE-YYYY-NNNN`; ids that do not
/// parse sort last by string.
pub fn cve_sort_key(id: &str) -> (i64, i64, String) {
    let mut parts = id.split('-');
    let parsed = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(_), Some(y), Some(n), None) => y.parse().ok().zip(n.parse().ok()),
        _ => None,
    };
    match parsed {
        Some((y, n)) => (y, n, String::new()),
        None => (i64::MAX, i64::MAX, id.to_string()),
    }
}

pub fn sort_records(records: &mut [CveRecord]) {
    records.sort_by_cached_key(|r| cve_sort_key(&r.id));
}

/// Collapses runs of whitespace to one space and trims.
pub fn clean_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestTally {
    pub items: usize,
    pub records: usize,
    pub labeled: usize,
    pub rejected: usize,
    pub missing_description: usize,
    pub empty_description: usize,
    pub sentinel_labels: usize,
    pub malformed: usize,
    pub duplicates: usize,
}

impl IngestTally {
    fn merge(&mut self, o: &IngestTally) {
        self.items += o.items;
        self.records += o.records;
        self.labeled += o.labeled;
        self.rejected += o.rejected;
        self.missing_description += o.missing_description;
        self.empty_description += o.empty_description;
        self.sentinel_labels += o.sentinel_labels;
        self.malformed += o.malformed;
        self.duplicates += o.duplicates;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<CveRecord>,
    pub tally: IngestTally,
}

enum ItemOutcome {
    Record(CveRecord, usize),
    Rejected,
    MissingDescription,
    EmptyDescription,
}

/// Parses one NVD JSON 1.1 feed document. Under `strict` a malformed item
/// is an error naming it; otherwise it is skipped and tallied.
pub fn ingest_nvd(bytes: &[u8], strict: bool) -> Result<Ingested> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| json_error(bytes, &e))?;
    let items = doc
        .get("CVE_Items")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::MalformedItem {
            item: "<document>".into(),
            reason: "missing CVE_Items array".into(),
        })?;
    let mut out = Ingested::default();
    for (i, item) in items.iter().enumerate() {
        out.tally.items += 1;
        match parse_item(item) {
            Ok(ItemOutcome::Record(r, sentinels)) => {
                out.tally.sentinel_labels += sentinels;
                out.records.push(r);
            }
            Ok(ItemOutcome::Rejected) => out.tally.rejected += 1,
            Ok(ItemOutcome::MissingDescription) => out.tally.missing_description += 1,
            Ok(ItemOutcome::EmptyDescription) => out.tally.empty_description += 1,
            Err(reason) => {
                let name = item
                    .pointer("/cve/CVE_data_meta/ID")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("item #{i}"));
                if strict {
                    return Err(Error::MalformedItem { item: name, reason });
                }
                log::warn!("skipping malformed item {name}: {reason}");
                out.tally.malformed += 1;
            }
        }
    }
    dedupe(&mut out);
    Ok(out)
}

fn dedupe(out: &mut Ingested) {
    sort_records(&mut out.records);
    let before = out.records.len();
    out.records.dedup_by(|b, a| a.id == b.id);
    out.tally.duplicates += before - out.records.len();
    out.tally.records = out.records.len();
    out.tally.labeled = out.records.iter().filter(|r| r.is_labeled()).count();
}

/// Ingests several feed files concurrently; records are merged by CVE id
/// order and the first occurrence of a duplicate id wins.
pub fn ingest_nvd_files(paths: &[impl AsRef<Path> + Sync], strict: bool) -> Result<Ingested> {
    let parts: Vec<Result<Ingested>> = paths
        .par_iter()
        .map(|p| {
            let bytes = std::fs::read(p.as_ref())?;
            ingest_nvd(&bytes, strict).map_err(|e| match e {
                Error::Json { offset, message } => Error::Json {
                    offset,
                    message: format!("{}: {message}", p.as_ref().display()),
                },
                other => other,
            })
        })
        .collect();
    let mut all = Ingested::default();
    for part in parts {
        let part = part?;
        all.tally.merge(&part.tally);
        all.records.extend(part.records);
    }
    all.tally.records = 0;
    all.tally.labeled = 0;
    // Stable sort keeps file order among equal ids.
    dedupe(&mut all);
    Ok(all)
}

fn json_error(bytes: &[u8], e: &serde_json::Error) -> Error {
    let mut offset = 0;
    if e.line() > 0 {
        let mut line = 1;
        for (i, b) in bytes.iter().enumerate() {
            if line == e.line() {
                offset = i;
                break;
            }
            if *b == b'\n' {
                line += 1;
            }
        }
        offset = (offset + e.column().saturating_sub(1)).min(bytes.len());
    }
    Error::Json {
        offset,
        message: e.to_string(),
    }
}

fn parse_item(item: &Value) -> std::result::Result<ItemOutcome, String> {
    let id = item
        .pointer("/cve/CVE_data_meta/ID")
        .and_then(Value::as_str)
        .ok_or("missing cve.CVE_data_meta.ID")?;
    if id.trim().is_empty() {
        return Err("empty CVE id".into());
    }
    let published = item
        .get("publishedDate")
        .and_then(Value::as_str)
        .ok_or("missing publishedDate")?;
    let year: i32 = published
        .get(..4)
        .and_then(|y| y.parse().ok())
        .ok_or_else(|| format!("unparseable publishedDate `{published}`"))?;

    let Some(descriptions) = item.pointer("/cve/description/description_data") else {
        return Ok(ItemOutcome::MissingDescription);
    };
    let descriptions = descriptions
        .as_array()
        .ok_or("description_data is not an array")?;
    let mut text = None;
    for d in descriptions {
        if d.get("lang").and_then(Value::as_str) == Some("en") {
            text = Some(
                d.get("value")
                    .and_then(Value::as_str)
                    .ok_or("description value is not a string")?,
            );
            break;
        }
    }
    let Some(text) = text else {
        return Ok(ItemOutcome::MissingDescription);
    };
    if text.trim_start().starts_with(REJECT_MARKER) {
        return Ok(ItemOutcome::Rejected);
    }
    let description = clean_text(text);
    if description.is_empty() {
        return Ok(ItemOutcome::EmptyDescription);
    }

    let mut labels = BTreeSet::new();
    let mut sentinels = 0;
    if let Some(pt) = item.pointer("/cve/problemtype/problemtype_data") {
        for entry in pt.as_array().ok_or("problemtype_data is not an array")? {
            let Some(descs) = entry.get("description") else {
                continue;
            };
            for d in descs
                .as_array()
                .ok_or("problemtype description is not an array")?
            {
                let v = d
                    .get("value")
                    .and_then(Value::as_str)
                    .ok_or("problemtype value is not a string")?
                    .trim();
                if SENTINEL_LABELS.contains(&v) {
                    sentinels += 1;
                } else if !v.is_empty() {
                    labels.insert(CweId::new(v));
                }
            }
        }
    }
    Ok(ItemOutcome::Record(
        CveRecord {
            id: id.to_string(),
            description,
            year,
            labels,
        },
        sentinels,
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    year: i32,
    description: String,
    labels: String,
}

/// Writes `id,year,description,labels` rows with labels `;`-joined.
pub fn write_csv(records: &[CveRecord], w: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in records {
        wtr.serialize(CsvRow {
            id: r.id.clone(),
            year: r.year,
            description: r.description.clone(),
            labels: r
                .labels
                .iter()
                .map(CweId::as_str)
                .collect::<Vec<_>>()
                .join(";"),
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_csv(r: impl Read) -> Result<Vec<CveRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let row: CsvRow = row?;
        let description = clean_text(&row.description);
        if description.is_empty() {
            return Err(Error::EmptyDescription(row.id));
        }
        out.push(CveRecord {
            id: row.id,
            description,
            year: row.year,
            labels: row
                .labels
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(CweId::new)
                .collect(),
        });
    }
    Ok(out)
}

pub fn read_csv_path(path: &Path) -> Result<Vec<CveRecord>> {
    read_csv(std::fs::File::open(path)?)
}

/// Restricts labels to the hierarchy. Records whose labels all fall
/// outside it stay in the list unlabeled (usable for pretraining) and are
/// counted in the returned tally.
pub fn restrict_labels(records: &[CveRecord], h: &CweHierarchy) -> (Vec<CveRecord>, usize) {
    let mut outside = 0;
    let out = records
        .iter()
        .map(|r| {
            let kept: BTreeSet<CweId> = r
                .labels
                .iter()
                .filter(|l| h.contains(l.as_str()))
                .cloned()
                .collect();
            if kept.len() < r.labels.len() {
                outside += 1;
            }
            CveRecord {
                labels: kept,
                ..r.clone()
            }
        })
        .collect();
    (out, outside)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<CveRecord>,
    pub test1: Vec<CveRecord>,
    pub test2: Vec<CveRecord>,
    pub validation: Option<Vec<CveRecord>>,
    /// Unlabeled records from the training window, for pretraining only.
    pub unlabeled: Vec<CveRecord>,
    /// Records outside every window, or categories too small to stratify.
    pub excluded: usize,
}

/// Inclusive year windows for a temporal split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearWindows {
    pub train: (i32, i32),
    pub test1: Option<(i32, i32)>,
    pub test2: (i32, i32),
}

impl YearWindows {
    /// 1999–2017 train, 2018 near-future test, 2019–2020 far-future test.
    pub const STANDARD: YearWindows = YearWindows {
        train: (1999, 2017),
        test1: Some((2018, 2018)),
        test2: (2019, 2020),
    };

    /// Retraining with 2018 added: 1999–2018 train, 2019–2020 test.
    pub const INCREMENTAL: YearWindows = YearWindows {
        train: (1999, 2018),
        test1: None,
        test2: (2019, 2020),
    };

    fn contains(w: (i32, i32), y: i32) -> bool {
        w.0 <= y && y <= w.1
    }
}

pub fn temporal_split(records: &[CveRecord], windows: YearWindows) -> DatasetSplit {
    let mut split = DatasetSplit::default();
    for r in records {
        let in_train = YearWindows::contains(windows.train, r.year);
        if !r.is_labeled() {
            if in_train {
                split.unlabeled.push(r.clone());
            } else {
                split.excluded += 1;
            }
            continue;
        }
        if in_train {
            split.train.push(r.clone());
        } else if windows
            .test1
            .is_some_and(|w| YearWindows::contains(w, r.year))
        {
            split.test1.push(r.clone());
        } else if YearWindows::contains(windows.test2, r.year) {
            split.test2.push(r.clone());
        } else {
            split.excluded += 1;
        }
    }
    split
}

/// Train/validation/test sizes for a category of `n` records: rounded 70%
/// and 10%, remainder to test; fewer than three records all go to train.
pub fn stratum_sizes(n: usize) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let train = (0.7 * n as f64).round() as usize;
    let val = ((0.1 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Per-category 70/10/20 split of labeled records; the test part lands in
/// `test1`.
pub fn random_split(records: &[CveRecord], seed: u64) -> DatasetSplit {
    let mut by_cat: BTreeMap<&CweId, Vec<&CveRecord>> = BTreeMap::new();
    let mut split = DatasetSplit {
        validation: Some(Vec::new()),
        ..DatasetSplit::default()
    };
    for r in records {
        match r.category() {
            Some(c) => by_cat.entry(c).or_default().push(r),
            None => split.unlabeled.push(r.clone()),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (cat, mut members) in by_cat {
        members.sort_by_cached_key(|r| cve_sort_key(&r.id));
        members.shuffle(&mut rng);
        let (tr, va, _) = stratum_sizes(members.len());
        if members.len() < 3 {
            log::debug!("category {cat} has {} records; all to train", members.len());
        }
        for (i, r) in members.into_iter().enumerate() {
            let dest = if i < tr {
                &mut split.train
            } else if i < tr + va {
                split.validation.as_mut().expect("set above")
            } else {
                &mut split.test1
            };
            dest.push(r.clone());
        }
    }
    sort_records(&mut split.train);
    sort_records(&mut split.test1);
    if let Some(v) = split.validation.as_mut() {
        sort_records(v);
    }
    split
}

/// Retraining windows ending at each year in `last_train_years`, each tested
/// on the remaining years of the far-future window.
pub fn incremental_splits(
    records: &[CveRecord],
    last_train_years: &[i32],
    test: (i32, i32),
) -> Vec<(i32, DatasetSplit)> {
    last_train_years
        .iter()
        .map(|&y| {
            let w = YearWindows {
                train: (YearWindows::STANDARD.train.0, y),
                test1: None,
                test2: (test.0.max(y + 1), test.1),
            };
            (y, temporal_split(records, w))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Bucket {
    ZeroShot,
    From1To50,
    From51To100,
    From101To150,
    From1To100,
    Over100,
}

impl Bucket {
    pub const ALL: [Bucket; 6] = [
        Bucket::From1To50,
        Bucket::From51To100,
        Bucket::From101To150,
        Bucket::From1To100,
        Bucket::Over100,
        Bucket::ZeroShot,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Bucket::ZeroShot => "zero-shot",
            Bucket::From1To50 => "[1,50]",
            Bucket::From51To100 => "[51,100]",
            Bucket::From101To150 => "[101,150]",
            Bucket::From1To100 => "[1,100]",
            Bucket::Over100 => ">100",
        }
    }

    pub fn matches(self, n: usize) -> bool {
        match self {
            Bucket::ZeroShot => n == 0,
            Bucket::From1To50 => (1..=50).contains(&n),
            Bucket::From51To100 => (51..=100).contains(&n),
            Bucket::From101To150 => (101..=150).contains(&n),
            Bucket::From1To100 => (1..=100).contains(&n),
            Bucket::Over100 => n > 100,
        }
    }
}

/// Number of training records labeled with each CWE (direct labels only).
pub fn training_counts(train: &[CveRecord]) -> BTreeMap<CweId, usize> {
    let mut counts = BTreeMap::new();
    for r in train {
        for l in &r.labels {
            *counts.entry(l.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Groups `test` CVEs by the training frequency of their CWEs. A CVE lands
/// in every bucket matched by any of its in-hierarchy labels.
pub fn bucket_by_training_count(
    train: &[CveRecord],
    test: &[CveRecord],
    h: &CweHierarchy,
) -> BTreeMap<Bucket, Vec<CveRecord>> {
    let counts = training_counts(train);
    let mut out: BTreeMap<Bucket, Vec<CveRecord>> =
        Bucket::ALL.iter().map(|b| (*b, Vec::new())).collect();
    for r in test {
        let mut hit = BTreeSet::new();
        for l in r.labels.iter().filter(|l| h.contains(l.as_str())) {
            let n = counts.get(l).copied().unwrap_or(0);
            hit.extend(Bucket::ALL.iter().filter(|b| b.matches(n)));
        }
        for b in hit {
            out.get_mut(&b)
                .expect("all buckets present")
                .push(r.clone());
        }
    }
    out
}

/// `word,synonym` pairs; a word may have several synonyms.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Lexicon {
    synonyms: BTreeMap<String, Vec<String>>,
}

const BUNDLED_SYNONYMS: &str = include_str!("../data/synonyms.csv");

impl Lexicon {
    pub fn bundled() -> Self {
        Self::from_csv(BUNDLED_SYNONYMS.as_bytes()).expect("bundled lexicon parses")
    }

    pub fn from_csv(r: impl Read) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            word: String,
            synonym: String,
        }
        let mut synonyms: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for row in csv::Reader::from_reader(r).deserialize() {
            let row: Row = row?;
            let list = synonyms.entry(row.word.trim().to_lowercase()).or_default();
            let s = row.synonym.trim().to_lowercase();
            if !list.contains(&s) {
                list.push(s);
            }
        }
        Ok(Lexicon { synonyms })
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.synonyms.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.synonyms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synonyms.is_empty()
    }
}

/// Splits on ". " when the next character is uppercase; the period stays
/// with its sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, _) in text.match_indices(". ") {
        let next = text[i + 2..].chars().next();
        if next.is_some_and(char::is_uppercase) {
            out.push(text[start..=i].trim().to_string());
            start = i + 2;
        }
    }
    if start < bytes.len() {
        let tail = text[start..].trim();
        if !tail.is_empty() {
            out.push(tail.to_string());
        }
    }
    out
}

/// Probability that any given substitutable word is replaced.
pub const SUBSTITUTION_PROB: f64 = 0.1;
/// Most sentences drawn into one synthetic record.
pub const MAX_SAMPLED_SENTENCES: usize = 3;

/// Replaces words found in `lexicon`; at least one when any word is
/// substitutable. Returns the text and the number of replacements.
pub fn substitute<R: Rng + ?Sized>(text: &str, lexicon: &Lexicon, rng: &mut R) -> (String, usize) {
    let mut words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    let core = |w: &str| -> (usize, usize) {
        let start = w.find(|c: char| c.is_alphanumeric()).unwrap_or(w.len());
        let end = w.rfind(|c: char| c.is_alphanumeric()).map_or(start, |e| {
            e + w[e..].chars().next().map_or(1, char::len_utf8)
        });
        (start, end.max(start))
    };
    let candidates: Vec<usize> = (0..words.len())
        .filter(|i| {
            let (s, e) = core(&words[*i]);
            lexicon.get(&words[*i][s..e]).is_some()
        })
        .collect();
    if candidates.is_empty() {
        return (words.join(" "), 0);
    }
    let mut chosen: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < SUBSTITUTION_PROB)
        .collect();
    if chosen.is_empty() {
        chosen.push(*candidates.choose(rng).expect("non-empty"));
    }
    for i in &chosen {
        let (s, e) = core(&words[*i]);
        let syn = lexicon
            .get(&words[*i][s..e])
            .expect("candidate")
            .choose(rng)
            .expect("non-empty list");
        words[*i] = format!("{}{}{}", &words[*i][..s], syn, &words[*i][e..]);
    }
    (words.join(" "), chosen.len())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentTally {
    pub synthetic: usize,
    pub cwes_augmented: usize,
    pub empty_pool: usize,
}

/// Synthetic records for every in-hierarchy CWE with fewer than `limit`
/// training records, topping each up to `limit` (or by at most `cap`).
/// Each synthetic record samples up to three sentences from the CWE's pool
/// and carries exactly that CWE as its label.
pub fn augment(
    records: &[CveRecord],
    h: &CweHierarchy,
    limit: usize,
    cap: Option<usize>,
    lexicon: &Lexicon,
    seed: u64,
) -> (Vec<CveRecord>, AugmentTally) {
    let mut pools: BTreeMap<&CweId, (Vec<String>, usize, i32)> = BTreeMap::new();
    for r in records {
        for l in r.labels.iter().filter(|l| h.contains(l.as_str())) {
            let e = pools.entry(l).or_insert_with(|| (Vec::new(), 0, r.year));
            e.0.extend(split_sentences(&r.description));
            e.1 += 1;
            e.2 = e.2.max(r.year);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tally = AugmentTally::default();
    let mut out = Vec::new();
    for (cwe, (pool, count, year)) in pools {
        if count >= limit {
            continue;
        }
        if pool.is_empty() {
            tally.empty_pool += 1;
            continue;
        }
        let needed = (limit - count).min(cap.unwrap_or(usize::MAX));
        tally.cwes_augmented += 1;
        for i in 0..needed {
            let k = rng.random_range(1..=MAX_SAMPLED_SENTENCES.min(pool.len()));
            let picked: Vec<&String> = pool.choose_multiple(&mut rng, k).collect();
            let joined = picked
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let (description, _) = substitute(&joined, lexicon, &mut rng);
            out.push(CveRecord {
                id: format!("AUG-{cwe}-{:05}", i + 1),
                description,
                year,
                labels: BTreeSet::from([cwe.clone()]),
            });
        }
    }
    tally.synthetic = out.len();
    (out, tally)
}
