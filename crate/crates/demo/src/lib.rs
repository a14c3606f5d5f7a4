//! Browser demo: sequencing explorer, attention maps of a small pre-trained
//! encoder, and ROC/F1 for pasted scores.
//!
//! Every operation has a plain Rust form returning JSON text (used by the
//! native tests) and a `wasm_bindgen` wrapper around it.

use dnsgt_core::evalx::{binary_report, roc_curve};
use dnsgt_core::ingest::QueryStream;
use dnsgt_core::ingest::{clean_pipeline, filter_hosts, normalize_domain, CleanConfig, HostFilter};
use dnsgt_core::model::{softmax, Batch, DnsGtModel, ModelConfig, Targets};
use dnsgt_core::sequencer::{sequence_stream, RawSequence, SequencingConfig, Strategy};
use dnsgt_core::synth::{generate, SynthConfig};
use dnsgt_core::training::{pretrain, Corpus, TrainConfig};
use dnsgt_core::vocab::{MaskingConfig, Vocabulary, NUM_DOMAIN_SPECIALS};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Core(#[from] dnsgt_core::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, DemoError>;

fn parse_err(line: usize, msg: impl Into<String>) -> DemoError {
    DemoError::Parse {
        line: line + 1,
        msg: msg.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parses `timestamp domain` lines into one chronological stream.
pub fn parse_stream(text: &str) -> Result<QueryStream> {
    let mut queries = Vec::new();
    for (i, line) in content_lines(text) {
        let mut parts = line.split_whitespace();
        let ts: f64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| parse_err(i, "expected a timestamp"))?;
        let name = parts
            .next()
            .ok_or_else(|| parse_err(i, "expected a domain after the timestamp"))?;
        let domain = normalize_domain(name).ok_or_else(|| parse_err(i, "invalid domain"))?;
        queries.push((ts, domain));
    }
    if queries.is_empty() {
        return Err(DemoError::Input("no queries".into()));
    }
    queries.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(QueryStream {
        host: "demo".into(),
        queries,
    })
}

#[derive(Serialize)]
struct SequenceSpan {
    start: usize,
    len: usize,
    t0: f64,
    t1: f64,
    domains: Vec<String>,
}

/// Splits a pasted stream with one strategy. The result lists every query
/// with the index of its sequence (null when no sequence covers it).
pub fn sequence_json(
    text: &str,
    strategy: &str,
    max_len: usize,
    delta_intra: f64,
    delta_base: f64,
    delta_inter: f64,
) -> Result<String> {
    let stream = parse_stream(text)?;
    let cfg = SequencingConfig {
        strategy: strategy.parse::<Strategy>()?,
        max_len,
        stride: max_len,
        delta_intra,
        delta_base,
        delta_inter,
        min_pts: 1,
    };
    cfg.validate()?;
    let seqs = sequence_stream(&stream, &cfg);
    let mut owner: Vec<Option<usize>> = vec![None; stream.len()];
    for (k, s) in seqs.iter().enumerate() {
        for slot in &mut owner[s.start..s.start + s.len()] {
            slot.get_or_insert(k);
        }
    }
    let spans: Vec<SequenceSpan> = seqs
        .iter()
        .map(|s| SequenceSpan {
            start: s.start,
            len: s.len(),
            t0: s.queries[0].0,
            t1: s.queries[s.len() - 1].0,
            domains: s.domains().map(str::to_string).collect(),
        })
        .collect();
    let queries: Vec<_> = stream
        .queries
        .iter()
        .zip(&owner)
        .map(|((t, d), o)| json!([t, d, o]))
        .collect();
    Ok(json!({ "queries": queries, "sequences": spans }).to_string())
}

/// `score label` or `score,label` lines to AUC, F1 and the ROC curve.
pub fn metrics_json(text: &str) -> Result<String> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in content_lines(text) {
        let mut parts = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|p| !p.is_empty());
        let score: f64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(i, "expected a score"))?;
        let label = match parts.next() {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            _ => return Err(parse_err(i, "expected a 0/1 label after the score")),
        };
        scores.push(score);
        labels.push(label);
    }
    let report = binary_report(&scores, &labels)?;
    let roc: Vec<[f64; 2]> = roc_curve(&scores, &labels)?
        .into_iter()
        .map(|(fpr, tpr, _)| [fpr, tpr])
        .collect();
    Ok(json!({
        "n": scores.len(),
        "positives": labels.iter().filter(|&&l| l).count(),
        "auc": report.auc,
        "f1_at_05": report.f1_at_05,
        "f1_best": report.f1_best.value,
        "threshold": report.f1_best.threshold,
        "roc": roc,
    })
    .to_string())
}

/// A tiny encoder pre-trained on the planted-pairs corpus, where every
/// `aK` domain is always queried next to its partner `bK`.
pub struct Trained {
    model: DnsGtModel,
    vocab: Vocabulary,
    losses: Vec<f64>,
}

impl Trained {
    pub fn train(steps: usize, seed: u64) -> Result<Self> {
        let out = generate(&SynthConfig::planted_pairs())?;
        let (kept, _) = filter_hosts(&out.records, &HostFilter::default());
        let streams = clean_pipeline(&out.records, &kept, &CleanConfig::default());
        let base = ModelConfig::tiny();
        let seq_cfg = SequencingConfig {
            max_len: base.seq_len,
            ..SequencingConfig::default()
        };
        let raw: Vec<RawSequence> = streams
            .values()
            .flat_map(|s| sequence_stream(s, &seq_cfg))
            .collect();
        let vocab = Vocabulary::build(&raw, 50)?;
        let config = base.with_vocab(&vocab);
        let corpus = Corpus::build(&raw, &vocab, &config)?;
        let mut model = DnsGtModel::new(config, seed)?;
        let cfg = TrainConfig {
            lr: 6e-3,
            batch_size: 64,
            max_steps: steps,
            seed,
            ..TrainConfig::default()
        };
        let report = pretrain(
            &mut model,
            &corpus,
            &cfg,
            &MaskingConfig::default(),
            &vocab.hash(),
        )?;
        Ok(Self {
            model,
            vocab,
            losses: report.losses,
        })
    }

    pub fn domains(&self) -> Vec<String> {
        self.vocab
            .real_domain_ids()
            .filter_map(|id| self.vocab.domain(id).map(str::to_string))
            .collect()
    }

    /// Top-3 predictions at every position and the attention weights of
    /// every block and head, restricted to the real tokens.
    pub fn inspect(&self, sequence: &str) -> Result<String> {
        let domains: Vec<String> = sequence.split_whitespace().map(str::to_string).collect();
        let cap = self.model.config.seq_len;
        if domains.is_empty() || domains.len() > cap {
            return Err(DemoError::Input(format!(
                "enter between 1 and {cap} domains"
            )));
        }
        let raw = RawSequence {
            host: "demo".into(),
            queries: domains.iter().map(|d| (0.0, d.clone())).collect(),
            start: 0,
        };
        let seq = self.vocab.tokenize(&raw, cap)?;
        let topo = self.model.topology_for(&seq, &self.vocab)?;
        let batch = Batch::from_tokens(std::slice::from_ref(&seq), std::slice::from_ref(&topo))?;
        let out = self.model.forward(&batch, Targets::None, true)?;
        let n = seq.len;
        let predictions: Vec<_> = (0..n)
            .map(|i| {
                let mut cands: Vec<(usize, f64)> = softmax(out.logits.row(i))
                    .into_iter()
                    .enumerate()
                    .skip(NUM_DOMAIN_SPECIALS)
                    .collect();
                cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                cands
                    .iter()
                    .take(3)
                    .map(|&(id, p)| json!([self.vocab.domain(id), p]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let attention: Vec<_> = out
            .attention
            .iter()
            .map(|a| {
                let w = a.weights.data();
                let rows: Vec<Vec<f64>> =
                    (0..n).map(|i| w[i * cap..i * cap + n].to_vec()).collect();
                json!({ "block": a.block, "head": a.head, "topology": a.topology, "weights": rows })
            })
            .collect();
        let tokens: Vec<_> = (0..n)
            .map(|i| {
                let id = seq.domain_ids[i];
                json!({ "input": domains[i], "id": id, "known": id >= NUM_DOMAIN_SPECIALS })
            })
            .collect();
        Ok(
            json!({ "tokens": tokens, "predictions": predictions, "attention": attention })
                .to_string(),
        )
    }
}

fn js_err(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn sequence(
    text: &str,
    strategy: &str,
    max_len: usize,
    delta_intra: f64,
    delta_base: f64,
    delta_inter: f64,
) -> std::result::Result<String, JsError> {
    sequence_json(
        text,
        strategy,
        max_len,
        delta_intra,
        delta_base,
        delta_inter,
    )
    .map_err(js_err)
}

#[wasm_bindgen]
pub fn metrics(text: &str) -> std::result::Result<String, JsError> {
    metrics_json(text).map_err(js_err)
}

#[wasm_bindgen]
pub struct DemoModel(Trained);

#[wasm_bindgen]
impl DemoModel {
    #[wasm_bindgen(constructor)]
    pub fn new(steps: usize, seed: u64) -> std::result::Result<DemoModel, JsError> {
        Trained::train(steps, seed).map(DemoModel).map_err(js_err)
    }

    /// Loss per step as a JSON array.
    pub fn losses(&self) -> String {
        serde_json::to_string(&self.0.losses).unwrap_or_default()
    }

    /// Vocabulary domains as a JSON array.
    pub fn domains(&self) -> String {
        serde_json::to_string(&self.0.domains()).unwrap_or_default()
    }

    pub fn inspect(&self, sequence: &str) -> std::result::Result<String, JsError> {
        self.0.inspect(sequence).map_err(js_err)
    }
}
