//! Evaluation, inference, embedding export, score analysis and benchmarking.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, ValueEnum};
use dnsgt_core::baselines::W2vHead;
use dnsgt_core::bench::{bench, write_bench_csv, BenchMode, DEFAULT_RUNS, DEFAULT_SKIP};
use dnsgt_core::evalx::{
    binary_report, context_sensitivity, domain_scores, embedding_table, multiclass_report,
    occurrences, roc_curve, sequence_vs_random_distance, write_roc_csv, write_scores_csv,
    BinaryReport,
};
use dnsgt_core::model::{
    host_prediction, softmax, write_embeddings_bin, write_embeddings_jsonl, Batch, Head, Targets,
};
use dnsgt_core::sequencer::RawSequence;
use dnsgt_core::training::Corpus;
use dnsgt_core::vocab::{Vocabulary, NUM_DOMAIN_SPECIALS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{
    create, default_vocab_path, fit, load_vocab, read_domain_labels, read_host_labels,
    read_sequences, AnyModel,
};
use crate::manifest::{beside, Manifest};
use crate::train::{is_test, SplitArgs, Task};
use crate::Usage;

/// Checkpoint plus its vocabulary (defaulting to the file beside it).
#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary; defaults to `<checkpoint stem>.vocab.json`
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

impl ModelArgs {
    fn vocab_path(&self) -> PathBuf {
        self.vocab
            .clone()
            .unwrap_or_else(|| default_vocab_path(&self.checkpoint))
    }

    fn load(&self, m: Option<&mut Manifest>) -> Result<(AnyModel, Vocabulary)> {
        let (model, hash) = AnyModel::load(&self.checkpoint)?;
        let vocab = load_vocab(&self.vocab_path(), &hash)?;
        if let Some(m) = m {
            m.input(&self.checkpoint)?;
            m.input(&self.vocab_path())?;
        }
        Ok((model, vocab))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sequence file
    #[arg(long)]
    pub corpus: PathBuf,
    /// Domain labels (binary) or host labels (hostclass), JSONL
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    pub task: Task,
    #[command(flatten)]
    pub split: SplitArgs,
    /// JSON metric report; ROC and score CSVs are written beside it
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Serialize)]
struct FoldReport {
    fold: usize,
    domains: usize,
    /// None when the fold's domains carry a single label.
    metrics: Option<BinaryReport>,
}

fn sibling(report: &Path, suffix: &str) -> PathBuf {
    let stem = report
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    report.with_file_name(format!("{stem}.{suffix}"))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut m = Manifest::new("eval", a)?;
    let (model, vocab) = a.model.load(Some(&mut m))?;
    m.input(&a.corpus)?;
    m.input(&a.labels)?;
    let raw = fit(&read_sequences(&a.corpus)?, model.seq_len());
    let plan = a.split.plan(&raw, &vocab)?;
    let test: Vec<RawSequence> = raw.iter().filter(|s| is_test(&plan, s)).cloned().collect();
    if test.is_empty() {
        return Err(dnsgt_core::Error::EmptyCorpus.into());
    }
    let report = match a.task {
        Task::Binary => {
            let labels = read_domain_labels(&a.labels)?;
            let corpus = model.corpus(&test, &vocab)?;
            let scores = model.scorer().token_scores(&corpus.seqs, &corpus.topos)?;
            let occ = occurrences(&corpus.seqs, &scores);
            let per_domain = domain_scores(&occ);
            let labeled: Vec<(usize, f64, bool)> = per_domain
                .iter()
                .filter_map(|(&id, &s)| {
                    let y = *labels.get(vocab.domain(id)?)?;
                    Some((id, s, y))
                })
                .collect();
            let split = |rows: &[&(usize, f64, bool)]| -> (Vec<f64>, Vec<bool>) {
                rows.iter().map(|r| (r.1, r.2)).unzip()
            };
            let all: Vec<&(usize, f64, bool)> = labeled.iter().collect();
            let (s, y) = split(&all);
            let overall = binary_report(&s, &y)?;
            let mut f = BufWriter::new(create(&sibling(&a.report, "roc.csv"))?);
            write_roc_csv(&mut f, &roc_curve(&s, &y)?)?;
            f.flush()?;
            let mut f = BufWriter::new(create(&sibling(&a.report, "domain_scores.csv"))?);
            writeln!(f, "domain,label,score")?;
            for (id, s, y) in &labeled {
                writeln!(
                    f,
                    "{},{},{s}",
                    vocab.domain(*id).unwrap_or_default(),
                    u8::from(*y)
                )?;
            }
            f.flush()?;
            let per_fold: Vec<FoldReport> = plan
                .domain_folds
                .iter()
                .enumerate()
                .map(|(k, ids)| {
                    let rows: Vec<&(usize, f64, bool)> = labeled
                        .iter()
                        .filter(|r| ids.binary_search(&r.0).is_ok())
                        .collect();
                    let (s, y) = split(&rows);
                    FoldReport {
                        fold: k,
                        domains: rows.len(),
                        metrics: binary_report(&s, &y).ok(),
                    }
                })
                .collect();
            let occ_labeled: Vec<(f64, bool)> = occ
                .iter()
                .filter_map(|o| Some((o.score, *labels.get(vocab.domain(o.domain)?)?)))
                .collect();
            let (os, oy): (Vec<f64>, Vec<bool>) = occ_labeled.into_iter().unzip();
            serde_json::json!({
                "task": "binary",
                "level": "domain",
                "sequences": test.len(),
                "domains": labeled.len(),
                "auc": overall.auc,
                "f1_at_05": overall.f1_at_05,
                "f1_best": overall.f1_best,
                "per_fold": per_fold,
                "occurrence": binary_report(&os, &oy).ok(),
            })
        }
        Task::Hostclass => {
            let AnyModel::Gt(g) = &model else {
                return Err(Usage("host classification needs a DNS-GT checkpoint".into()).into());
            };
            let (by_host, classes) = read_host_labels(&a.labels)?;
            let labeled: Vec<RawSequence> = test
                .into_iter()
                .filter(|s| by_host.contains_key(&s.host))
                .collect();
            let corpus = Corpus::build(&labeled, &vocab, &g.config)?;
            let mut per_host: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
            for (chunk, raw) in corpus
                .seqs
                .chunks(64)
                .zip(corpus.topos.chunks(64))
                .zip(labeled.chunks(64))
            {
                let (probs, _) = g.forward_hostclass(chunk.0, chunk.1, None)?;
                for (p, r) in probs.into_iter().zip(raw) {
                    per_host.entry(r.host.as_str()).or_default().push(p);
                }
            }
            let (probs, ys): (Vec<Vec<f64>>, Vec<usize>) = per_host
                .iter()
                .filter_map(|(h, ps)| Some((host_prediction(ps)?.0, by_host[*h])))
                .unzip();
            let r = multiclass_report(&probs, &ys)?;
            serde_json::json!({
                "task": "hostclass",
                "sequences": labeled.len(),
                "hosts": ys.len(),
                "classes": classes,
                "accuracy": r.accuracy,
                "auc": r.auc,
                "f1": r.f1,
                "per_fold": [],
            })
        }
    };
    let mut f = create(&a.report)?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;
    m.output(&a.report);
    if a.task == Task::Binary {
        m.output(&sibling(&a.report, "roc.csv"));
        m.output(&sibling(&a.report, "domain_scores.csv"));
    }
    m.seed = Some(a.split.split_seed);
    m.write(&beside(&a.report))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct InferArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Host followed by domains, e.g. '172.31.1.4 a.com <MASK> c.com'
    #[arg(long)]
    pub sequence: String,
    /// Also write the listing to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Predicted domain and probability at every position of one sequence.
fn predict_positions(
    model: &AnyModel,
    vocab: &Vocabulary,
    raw: &RawSequence,
) -> Result<Vec<(String, f64)>> {
    let seq = vocab.tokenize(raw, model.seq_len())?;
    let rows: Vec<Vec<f64>> = match model {
        AnyModel::Gt(g) => {
            if g.config.head != Head::Mlm {
                return Err(dnsgt_core::Error::WrongHead("mlm").into());
            }
            let topo = g.topology_for(&seq, vocab)?;
            let batch =
                Batch::from_tokens(std::slice::from_ref(&seq), std::slice::from_ref(&topo))?;
            let out = g.forward(&batch, Targets::None, false)?;
            (0..seq.len).map(|i| softmax(out.logits.row(i))).collect()
        }
        AnyModel::W2v(w) => w.predict(&seq)?.into_iter().take(seq.len).collect(),
    };
    Ok(rows
        .iter()
        .map(|p| {
            let (id, prob) = p.iter().enumerate().skip(NUM_DOMAIN_SPECIALS).fold(
                (NUM_DOMAIN_SPECIALS, f64::NEG_INFINITY),
                |b, (i, &v)| {
                    if v > b.1 {
                        (i, v)
                    } else {
                        b
                    }
                },
            );
            (vocab.domain(id).unwrap_or_default().to_string(), prob)
        })
        .collect())
}

/// `host domain ----> predicted (pp.pp%)`, arrows aligned on the longest input.
pub fn listing(host: &str, domains: &[String], preds: &[(String, f64)]) -> String {
    let width = domains.iter().map(String::len).max().unwrap_or(0);
    let mut out = String::new();
    for (d, (p, prob)) in domains.iter().zip(preds) {
        out.push_str(&format!(
            "{host} {d} {}> {p} ({:.2}%)\n",
            "-".repeat(width - d.len() + 1),
            prob * 100.0
        ));
    }
    out
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let mut parts = a.sequence.split_whitespace();
    let host = parts
        .next()
        .ok_or_else(|| Usage("--sequence needs a host and at least one domain".into()))?;
    let domains: Vec<String> = parts.map(str::to_string).collect();
    if domains.is_empty() {
        return Err(Usage("--sequence needs a host and at least one domain".into()).into());
    }
    let mut m = Manifest::new("infer", a)?;
    let (model, vocab) = a.model.load(Some(&mut m))?;
    let raw = RawSequence {
        host: host.to_string(),
        queries: domains.iter().map(|d| (0.0, d.clone())).collect(),
        start: 0,
    };
    let preds = predict_positions(&model, &vocab, &raw)?;
    let text = listing(host, &domains, &preds);
    print!("{text}");
    if let Some(out) = &a.out {
        create(out)?.write_all(text.as_bytes())?;
        m.output(out);
        m.write(&beside(out))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedFormat {
    Jsonl,
    Bin,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: EmbedFormat,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn embed(a: &EmbedArgs) -> Result<()> {
    let mut m = Manifest::new("embed", a)?;
    let (model, vocab) = a.model.load(Some(&mut m))?;
    let rows = model.export_embeddings(&vocab);
    let mut w = BufWriter::new(create(&a.out)?);
    match a.format {
        EmbedFormat::Jsonl => write_embeddings_jsonl(&mut w, &rows)?,
        EmbedFormat::Bin => write_embeddings_bin(&mut w, &rows)?,
    }
    w.flush()?;
    m.output(&a.out);
    m.write(&beside(&a.out))?;
    println!("{} embeddings -> {}", rows.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sequence file
    #[arg(long)]
    pub corpus: PathBuf,
    /// Minimum number of sequences a domain must occur in for its CV
    #[arg(long, default_value_t = 5)]
    pub min_occurrences: usize,
    /// Sequences sampled for the distance comparison
    #[arg(long, default_value_t = 200)]
    pub n_sequences: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

fn has_token_scores(model: &AnyModel) -> bool {
    match model {
        AnyModel::Gt(g) => g.config.head == Head::Binary,
        AnyModel::W2v(w) => w.config.head == W2vHead::Classify,
    }
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let mut m = Manifest::new("analyze", a)?;
    let (model, vocab) = a.model.load(Some(&mut m))?;
    m.input(&a.corpus)?;
    m.seed = Some(a.seed);
    let raw = fit(&read_sequences(&a.corpus)?, model.seq_len());
    std::fs::create_dir_all(&a.out)?;
    let emb = embedding_table(model.export_embeddings(&vocab));
    let names: Vec<Vec<String>> = raw
        .iter()
        .map(|s| {
            s.domains()
                .filter(|d| vocab.lookup_domain(d).is_some())
                .map(str::to_string)
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let distance = sequence_vs_random_distance(&emb, &names, a.n_sequences, &mut rng)?;
    let mut report = serde_json::json!({ "distance": distance });
    if has_token_scores(&model) {
        let corpus = model.corpus(&raw, &vocab)?;
        let scores = model.scorer().token_scores(&corpus.seqs, &corpus.topos)?;
        let occ = occurrences(&corpus.seqs, &scores);
        let name = |id: usize| vocab.domain(id).unwrap_or_default().to_string();
        let scores_path = a.out.join("scores.csv");
        let mut w = BufWriter::new(create(&scores_path)?);
        write_scores_csv(&mut w, &occ, name)?;
        w.flush()?;
        m.output(&scores_path);
        let cv = context_sensitivity(&occ, a.min_occurrences);
        let per_domain: BTreeMap<String, _> = cv
            .per_domain
            .iter()
            .map(|(&id, d)| (name(id), *d))
            .collect();
        report["context_sensitivity"] = serde_json::json!({
            "min_occurrences": a.min_occurrences,
            "domains": per_domain.len(),
            "exceedance": cv.exceedance,
            "per_domain": per_domain,
        });
    }
    let path = a.out.join("analysis.json");
    let mut f = create(&path)?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;
    m.output(&path);
    m.write(&a.out.join("analyze.manifest.json"))?;
    println!("{}", serde_json::to_string(&report["distance"])?);
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated batch sizes
    #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
    pub batch_sizes: Vec<usize>,
    /// Executions per batch size and mode
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    /// Leading batches excluded from throughput
    #[arg(long, default_value_t = DEFAULT_SKIP)]
    pub skip: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let mut m = Manifest::new("bench", a)?;
    let (model, _) = AnyModel::load(&a.checkpoint)?;
    m.input(&a.checkpoint)?;
    m.seed = Some(a.seed);
    let AnyModel::Gt(g) = model else {
        return Err(Usage("bench needs a DNS-GT checkpoint".into()).into());
    };
    let report = bench(&g, &a.batch_sizes, a.runs, a.skip, a.seed)?;
    println!(
        "{:<6} {:>6} {:>14} {:>16} {:>18}",
        "mode", "batch", "cold_start_s", "mean_latency_s", "throughput_b/s"
    );
    for r in &report.rows {
        let mode = match r.mode {
            BenchMode::Infer => "infer",
            BenchMode::Train => "train",
        };
        println!(
            "{mode:<6} {:>6} {:>14.6} {:>16.6} {:>18.2}",
            r.batch_size, r.cold_start, r.mean_latency, r.throughput
        );
    }
    let mut wrote = None;
    if let Some(p) = &a.csv {
        let mut w = BufWriter::new(create(p)?);
        write_bench_csv(&mut w, &report)?;
        w.flush()?;
        m.output(p);
        wrote = Some(p);
    }
    if let Some(p) = &a.json {
        let mut f = create(p)?;
        serde_json::to_writer_pretty(&mut f, &report)?;
        f.write_all(b"\n")?;
        m.output(p);
        wrote = wrote.or(Some(p));
    }
    if let Some(p) = wrote {
        m.write(&beside(p))?;
    }
    Ok(())
}
