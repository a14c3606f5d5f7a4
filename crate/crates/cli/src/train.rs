//! Pre-training and fine-tuning commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, ValueEnum};
use dnsgt_core::baselines::{W2vConfig, W2vHead, W2vModel, W2vVariant};
use dnsgt_core::model::{DnsGtModel, Head};
use dnsgt_core::sequencer::RawSequence;
use dnsgt_core::training::{
    finetune, finetune_w2v, make_splits, pretrain, pretrain_w2v, restrict_labels, Corpus,
    FinetuneLabels, PipelineConfig, SplitPlan, TrainConfig, TrainReport,
};
use dnsgt_core::vocab::Vocabulary;
use serde::Serialize;

use crate::data::{
    create, default_vocab_path, fit, load_vocab, read_domain_labels, read_host_labels,
    read_sequences, sequences_from_capture, tokenize_all, write_sequences, AnyModel,
};
use crate::manifest::{beside, Manifest};
use crate::Usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dnsgt,
    Cbow,
    Skipgram,
}

/// Flags overriding the training section of a config file.
#[derive(Debug, Args, Serialize)]
pub struct TrainOverrides {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Global gradient-norm clip (off unless given)
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, t: &mut TrainConfig) {
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.max_steps {
            t.max_steps = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if self.clip_norm.is_some() {
            t.clip_norm = self.clip_norm;
        }
    }
}

fn read_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| dnsgt_core::Error::FileNotFound(path.to_path_buf()))?;
    Ok(PipelineConfig::from_json(&text)?)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn write_losses(path: &Path, report: &TrainReport) -> Result<()> {
    report.write_csv(std::io::BufWriter::new(create(path)?))?;
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct PretrainArgs {
    /// Pipeline config (JSON); data paths are resolved relative to it
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum, default_value = "dnsgt")]
    pub model: ModelKind,
    /// Sequence file used instead of the config's data paths
    #[arg(long)]
    pub sequences: Option<PathBuf>,
    /// Output directory; defaults to the config's directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output file stem; defaults to the config file stem
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

pub fn pretrain_cmd(a: &PretrainArgs) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    a.overrides.apply(&mut cfg.train);
    cfg.validate()?;
    let base = base_dir(&a.config);
    let mut m = Manifest::new("pretrain", a)?;
    m.input(&a.config)?;
    let data = cfg.data.clone().unwrap_or_default();
    let raw = if let Some(p) = &a.sequences {
        m.input(p)?;
        read_sequences(p)?
    } else if let Some(p) = &data.sequences {
        let p = base.join(p);
        m.input(&p)?;
        read_sequences(&p)?
    } else if let Some(p) = &data.queries {
        let p = base.join(p);
        m.input(&p)?;
        sequences_from_capture(&p, &cfg.sequencing)?
    } else {
        return Err(
            Usage("config has no data.queries or data.sequences; pass --sequences".into()).into(),
        );
    };
    let raw = fit(&raw, cfg.model.seq_len);
    let vocab = Vocabulary::build(&raw, cfg.max_domains)?;
    let hash = vocab.hash();
    let seed = cfg.train.seed;
    let (model, report) = match a.model {
        ModelKind::Dnsgt => {
            let mut model = DnsGtModel::new(cfg.model.clone().with_vocab(&vocab), seed)?;
            let corpus = Corpus::build(&raw, &vocab, &model.config)?;
            let r = pretrain(&mut model, &corpus, &cfg.train, &cfg.masking, &hash)?;
            (AnyModel::Gt(model), r)
        }
        ModelKind::Cbow | ModelKind::Skipgram => {
            let variant = if a.model == ModelKind::Cbow {
                W2vVariant::Cbow
            } else {
                W2vVariant::SkipGram
            };
            let wc = W2vConfig::new(
                variant,
                cfg.model.dim,
                cfg.model.seq_len,
                vocab.domain_vocab_size(),
            );
            let mut model = W2vModel::new(wc, seed)?;
            let seqs = tokenize_all(&raw, &vocab, cfg.model.seq_len)?;
            let r = pretrain_w2v(&mut model, &seqs, &cfg.train, &hash)?;
            (AnyModel::W2v(model), r)
        }
    };
    let out = a.out.clone().unwrap_or(base);
    let stem = a.name.clone().unwrap_or_else(|| {
        a.config
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("model")
            .to_string()
    });
    std::fs::create_dir_all(&out)?;
    let ckpt = out.join(format!("{stem}.ckpt"));
    let vocab_path = default_vocab_path(&ckpt);
    let loss_path = out.join(format!("{stem}.loss.csv"));
    let seq_path = out.join(format!("{stem}.sequences.jsonl"));
    model.save(&ckpt, &hash)?;
    vocab.save(&vocab_path)?;
    write_losses(&loss_path, &report)?;
    write_sequences(&seq_path, &raw)?;
    m.config(&cfg)?;
    m.seed = Some(seed);
    for p in [&ckpt, &vocab_path, &loss_path, &seq_path] {
        m.output(p);
    }
    m.write(&out.join(format!("{stem}.pretrain.manifest.json")))?;
    println!(
        "{} sequences, {} steps, loss {:.4} -> {:.4}; checkpoint {}",
        raw.len(),
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Hostclass,
}

/// Temporal split and domain folds shared by `finetune` and `eval`.
#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    /// Number of domain folds
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Fraction of the time range used for training
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    /// Seed of the domain-fold shuffle
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

impl SplitArgs {
    pub fn plan(&self, raw: &[RawSequence], vocab: &Vocabulary) -> Result<SplitPlan> {
        let ts: Vec<f64> = raw
            .iter()
            .flat_map(|s| s.queries.iter().map(|q| q.0))
            .collect();
        Ok(make_splits(
            &ts,
            vocab,
            self.folds,
            self.train_fraction,
            self.split_seed,
        )?)
    }
}

pub fn is_test(plan: &SplitPlan, s: &RawSequence) -> bool {
    s.queries.first().is_some_and(|q| plan.is_test_time(q.0))
}

/// Per-position domain labels padded to `cap`; unlabeled domains get None.
pub fn position_labels(
    raw: &[RawSequence],
    labels: &BTreeMap<String, bool>,
    cap: usize,
) -> Vec<Vec<Option<f64>>> {
    raw.iter()
        .map(|s| {
            let mut v: Vec<Option<f64>> = s
                .domains()
                .map(|d| labels.get(d).map(|&y| f64::from(u8::from(y))))
                .collect();
            v.resize(cap, None);
            v
        })
        .collect()
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary; defaults to `<checkpoint stem>.vocab.json`
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Sequence file
    #[arg(long)]
    pub corpus: PathBuf,
    /// Domain labels (binary) or host labels (hostclass), JSONL
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    pub task: Task,
    /// Held-out domain fold excluded from supervision
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Pipeline config whose training section is used
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Output checkpoint
    #[arg(long)]
    pub out: PathBuf,
}

pub fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    if a.fold >= a.split.folds {
        return Err(Usage(format!(
            "--fold {} must be below --folds {}",
            a.fold, a.split.folds
        ))
        .into());
    }
    let mut m = Manifest::new("finetune", a)?;
    let mut train = match &a.config {
        Some(p) => {
            m.input(p)?;
            read_config(p)?.train
        }
        None => TrainConfig::default(),
    };
    a.overrides.apply(&mut train);
    train.validate()?;
    let (mut model, hash) = AnyModel::load(&a.checkpoint)?;
    let vocab_path = a
        .vocab
        .clone()
        .unwrap_or_else(|| default_vocab_path(&a.checkpoint));
    let vocab = load_vocab(&vocab_path, &hash)?;
    for p in [&a.checkpoint, &vocab_path, &a.corpus, &a.labels] {
        m.input(p)?;
    }
    let raw = fit(&read_sequences(&a.corpus)?, model.seq_len());
    let plan = a.split.plan(&raw, &vocab)?.with_fold(a.fold);
    let train_raw: Vec<RawSequence> = raw.iter().filter(|s| !is_test(&plan, s)).cloned().collect();
    let seed = train.seed;
    let report = match a.task {
        Task::Binary => {
            let labels = read_domain_labels(&a.labels)?;
            let corpus = model.corpus(&train_raw, &vocab)?;
            let per_pos = position_labels(&train_raw, &labels, model.seq_len());
            let per_pos = restrict_labels(&corpus.seqs, &per_pos, &plan.eval_domains());
            match &mut model {
                AnyModel::Gt(g) => {
                    if g.config.head != Head::Binary {
                        g.swap_head(Head::Binary, seed)?;
                    }
                    finetune(g, &corpus, &FinetuneLabels::Binary(per_pos), &train, &hash)?
                }
                AnyModel::W2v(w) => {
                    if w.config.head != W2vHead::Classify {
                        w.swap_head(W2vHead::Classify, seed);
                    }
                    finetune_w2v(w, &corpus.seqs, &per_pos, &train, &hash)?
                }
            }
        }
        Task::Hostclass => {
            let AnyModel::Gt(g) = &mut model else {
                return Err(Usage("host classification needs a DNS-GT checkpoint".into()).into());
            };
            let (by_host, classes) = read_host_labels(&a.labels)?;
            let labeled: Vec<RawSequence> = train_raw
                .into_iter()
                .filter(|s| by_host.contains_key(&s.host))
                .collect();
            let ids: Vec<usize> = labeled.iter().map(|s| by_host[&s.host]).collect();
            let head = Head::HostClass {
                classes: classes.len(),
            };
            if g.config.head != head {
                g.swap_head(head, seed)?;
            }
            let corpus = Corpus::build(&labeled, &vocab, &g.config)?;
            finetune(g, &corpus, &FinetuneLabels::HostClass(ids), &train, &hash)?
        }
    };
    let vocab_out = default_vocab_path(&a.out);
    let loss_path = a.out.with_extension("loss.csv");
    model.save(&a.out, &hash)?;
    vocab.save(&vocab_out)?;
    write_losses(&loss_path, &report)?;
    m.config(&train)?;
    m.seed = Some(seed);
    for p in [&a.out, &vocab_out, &loss_path] {
        m.output(p);
    }
    m.write(&beside(&a.out))?;
    println!(
        "{} training sequences, {} labeled domains, loss {:.4} -> {:.4}; checkpoint {}",
        plan_count(&raw, &plan),
        report.labeled_domains.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

fn plan_count(raw: &[RawSequence], plan: &SplitPlan) -> usize {
    raw.iter().filter(|s| !is_test(plan, s)).count()
}
