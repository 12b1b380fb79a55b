//! The run record written next to every output, and the flag groups that
//! edit it.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use v2w_core::eval::DEFAULT_BETA;
use v2w_core::synth::SynthConfig;
use v2w_core::tfidf::{TfidfLinkConfig, CLASS_HIDDEN};
use v2w_core::tokenizer::DEFAULT_VOCAB_SIZE;
use v2w_core::trainer::BalanceMode;
use v2w_core::{CombinationKind, CweId, KTriple, ModelConfig, Pooling, TrainConfig};

use crate::Exit;

pub const RUN_CONFIG: &str = "run_config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train up to 2017, test on 2018 and on 2019–2020.
    #[default]
    Temporal,
    /// Per-category 70/10/20 split.
    Random,
    /// Random split with `--hold-out` CWEs removed from training.
    ZeroShot,
    /// Train up to `--last-train-year`, test on the later far-future years.
    Incremental,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Siamese transformer link predictor.
    #[default]
    V2w,
    /// Link predictor over TF-IDF features.
    TfidfLink,
    /// Flat TF-IDF classifier over the training CWEs.
    TfidfClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub data: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub init: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub protocol: Protocol,
    pub split_seed: u64,
    pub hold_out: Vec<CweId>,
    pub last_train_year: i32,
    pub model_kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tfidf_link: TfidfLinkConfig,
    pub tfidf_class_hidden: usize,
    pub vocab_size: usize,
    pub synth: SynthConfig,
    pub k: KTriple,
    pub beta: f64,
    pub monte_carlo_seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            data: None,
            vocab: None,
            init: None,
            out: None,
            protocol: Protocol::Temporal,
            split_seed: 0,
            hold_out: Vec::new(),
            last_train_year: 2018,
            model_kind: ModelKind::V2w,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tfidf_link: TfidfLinkConfig::default(),
            tfidf_class_hidden: CLASS_HIDDEN,
            vocab_size: DEFAULT_VOCAB_SIZE,
            synth: SynthConfig::default(),
            k: KTriple::PRECISE,
            beta: DEFAULT_BETA,
            monte_carlo_seed: 0,
            threads: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            return Err(Exit::Missing(format!("run config {}", path.display())).into());
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(RUN_CONFIG), text)?;
        Ok(())
    }

    pub fn data_dir(&self) -> anyhow::Result<&Path> {
        self.data
            .as_deref()
            .context("no data directory given (--data)")
    }

    pub fn out_dir(&self) -> anyhow::Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory given (--out)")
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_mult: Option<usize>,
    /// Bottom encoder layers frozen during link training.
    #[arg(long)]
    pub frozen: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// CLS, MEAN or MAX.
    #[arg(long)]
    pub pooling: Option<Pooling>,
    /// CONCAT, ABSDIFF, MUL, ABSDIFF_MUL, CONCAT_MUL, CONCAT_ABSDIFF or
    /// CONCAT_ABSDIFF_MUL.
    #[arg(long)]
    pub combination: Option<CombinationKind>,
}

impl ModelArgs {
    pub fn apply(&self, m: &mut ModelConfig) {
        let e = &mut m.encoder;
        set(&mut e.layers, self.layers);
        set(&mut e.hidden, self.hidden);
        set(&mut e.heads, self.heads);
        set(&mut e.ffn_mult, self.ffn_mult);
        set(&mut e.frozen_layers, self.frozen);
        set(&mut e.max_len, self.max_len);
        set(&mut e.dropout, self.dropout);
        set(&mut m.pooling, self.pooling);
        set(&mut m.combination, self.combination);
    }

    /// Architecture fields given on the command line that disagree with
    /// `stored`. Freeze depth and dropout may change between runs.
    pub fn conflicts(&self, stored: &ModelConfig) -> Vec<String> {
        let e = &stored.encoder;
        let mut out = Vec::new();
        let mut check = |name: &str, given: Option<String>, have: String| {
            if let Some(g) = given {
                if g != have {
                    out.push(format!("--{name} {g} (checkpoint has {have})"));
                }
            }
        };
        check(
            "layers",
            self.layers.map(|v| v.to_string()),
            e.layers.to_string(),
        );
        check(
            "hidden",
            self.hidden.map(|v| v.to_string()),
            e.hidden.to_string(),
        );
        check(
            "heads",
            self.heads.map(|v| v.to_string()),
            e.heads.to_string(),
        );
        check(
            "ffn-mult",
            self.ffn_mult.map(|v| v.to_string()),
            e.ffn_mult.to_string(),
        );
        check(
            "max-len",
            self.max_len.map(|v| v.to_string()),
            e.max_len.to_string(),
        );
        check(
            "pooling",
            self.pooling.map(|v| format!("{v:?}")),
            format!("{:?}", stored.pooling),
        );
        check(
            "combination",
            self.combination.map(|v| format!("{v:?}")),
            format!("{:?}", stored.combination),
        );
        out
    }
}

/// Architecture fields of two configs that differ.
pub fn architecture_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (x, y) = (&a.encoder, &b.encoder);
    let mut out = Vec::new();
    let pairs = [
        ("layers", x.layers, y.layers),
        ("hidden", x.hidden, y.hidden),
        ("heads", x.heads, y.heads),
        ("ffn_mult", x.ffn_mult, y.ffn_mult),
        ("max_len", x.max_len, y.max_len),
    ];
    for (name, p, q) in pairs {
        if p != q {
            out.push(format!("{name} {p} vs {q}"));
        }
    }
    if a.pooling != b.pooling {
        out.push(format!("pooling {:?} vs {:?}", a.pooling, b.pooling));
    }
    if a.combination != b.combination {
        out.push(format!(
            "combination {:?} vs {:?}",
            a.combination, b.combination
        ));
    }
    out
}

#[derive(Args, Debug, Default, Clone)]
pub struct TrainArgs {
    /// Link-training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    /// Sequences per pretraining batch.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// CVEs per link-training batch.
    #[arg(long)]
    pub link_batch_size: Option<usize>,
    /// Peak pretraining learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Peak link-training learning rate.
    #[arg(long)]
    pub link_lr: Option<f64>,
    /// Negative CWEs sampled per CVE.
    #[arg(long)]
    pub k_neg: Option<usize>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Joint reconstruction loss on or off.
    #[arg(long)]
    pub rd: Option<bool>,
    /// repeat or weight.
    #[arg(long)]
    pub balance: Option<BalanceMode>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub head_dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.epochs_link, self.epochs);
        set(&mut t.epochs_pretrain, self.pretrain_epochs);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.link_batch_size, self.link_batch_size);
        set(&mut t.lr, self.lr);
        set(&mut t.link_lr, self.link_lr);
        set(&mut t.k_neg, self.k_neg);
        set(&mut t.gamma1, self.gamma1);
        set(&mut t.gamma2, self.gamma2);
        set(&mut t.warmup_frac, self.warmup_frac);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.rd_enabled, self.rd);
        set(&mut t.balance, self.balance);
        set(&mut t.clip_norm, self.clip_norm);
        set(&mut t.head_dropout, self.head_dropout);
        set(&mut t.seed, self.seed);
    }
}

#[derive(Args, Debug, Default, Clone)]
pub struct SplitArgs {
    #[arg(long, value_enum)]
    pub protocol: Option<Protocol>,
    /// Comma-separated CWE ids withheld from training (zero-shot).
    #[arg(long, value_delimiter = ',')]
    pub hold_out: Option<Vec<String>>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub last_train_year: Option<i32>,
}

impl SplitArgs {
    fn hold_out_ids(&self) -> Option<Vec<CweId>> {
        self.hold_out.as_ref().map(|v| {
            let mut ids: Vec<CweId> = v.iter().map(|s| CweId::new(s.trim())).collect();
            ids.sort();
            ids.dedup();
            ids
        })
    }

    pub fn apply(&self, c: &mut RunConfig) {
        set(&mut c.protocol, self.protocol);
        set(&mut c.hold_out, self.hold_out_ids());
        set(&mut c.split_seed, self.split_seed);
        set(&mut c.last_train_year, self.last_train_year);
    }

    /// Split flags that disagree with the run being evaluated.
    pub fn conflicts(&self, run: &RunConfig) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(p) = self.protocol.filter(|p| *p != run.protocol) {
            out.push(format!("--protocol {p:?} (run used {:?})", run.protocol));
        }
        if let Some(h) = self.hold_out_ids().filter(|h| *h != run.hold_out) {
            out.push(format!("--hold-out {h:?} (run used {:?})", run.hold_out));
        }
        if let Some(s) = self.split_seed.filter(|s| *s != run.split_seed) {
            out.push(format!("--split-seed {s} (run used {})", run.split_seed));
        }
        if let Some(y) = self.last_train_year.filter(|y| *y != run.last_train_year) {
            out.push(format!(
                "--last-train-year {y} (run used {})",
                run.last_train_year
            ));
        }
        out
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
