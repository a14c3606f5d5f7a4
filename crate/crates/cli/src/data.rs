//! On-disk formats owned by the CLI: sequence files, label files and
//! checkpoint loading for either model family.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dnsgt_core::baselines::W2vModel;
use dnsgt_core::checkpoint::CheckpointFile;
use dnsgt_core::evalx::TokenScorer;
use dnsgt_core::ingest::{
    clean_pipeline, filter_hosts, parse_jsonl, parse_pcap, CleanConfig, HostFilter, ParseOutcome,
};
use dnsgt_core::model::DnsGtModel;
use dnsgt_core::sequencer::{sequence_stream, RawSequence, SequencingConfig};
use dnsgt_core::topology::{AdjacencyMatrix, TopologySet};
use dnsgt_core::training::{check_vocab, Corpus};
use dnsgt_core::vocab::{TokenSequence, Vocabulary};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
struct SequenceLine {
    host: String,
    ts: Vec<f64>,
    domains: Vec<String>,
}

pub fn write_sequences(path: &Path, seqs: &[RawSequence]) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    for s in seqs {
        let line = SequenceLine {
            host: s.host.clone(),
            ts: s.queries.iter().map(|q| q.0).collect(),
            domains: s.domains().map(str::to_string).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<Vec<RawSequence>> {
    read_lines::<SequenceLine>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            if l.ts.len() != l.domains.len() {
                bail!(
                    "{}: line {} has {} timestamps for {} domains",
                    path.display(),
                    i + 1,
                    l.ts.len(),
                    l.domains.len()
                );
            }
            Ok(RawSequence {
                host: l.host,
                queries: l.ts.into_iter().zip(l.domains).collect(),
                start: 0,
            })
        })
        .collect()
}

pub fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

pub fn open(path: &Path) -> Result<File> {
    if !path.exists() {
        return Err(dnsgt_core::Error::FileNotFound(path.to_path_buf()).into());
    }
    File::open(path).with_context(|| format!("opening {}", path.display()))
}

pub fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    File::create(path).with_context(|| format!("creating {}", path.display()))
}

/// Parses a capture by extension: `.pcap` is libpcap, anything else JSONL.
pub fn parse_capture(path: &Path, pcap: bool) -> Result<ParseOutcome> {
    if !path.exists() {
        return Err(dnsgt_core::Error::FileNotFound(path.to_path_buf()).into());
    }
    Ok(if pcap {
        parse_pcap(path)?
    } else {
        parse_jsonl(path)?
    })
}

/// Raw traffic to sequences with the default host filter and cleaning.
pub fn sequences_from_capture(path: &Path, cfg: &SequencingConfig) -> Result<Vec<RawSequence>> {
    let pcap = path.extension().is_some_and(|e| e == "pcap");
    let parsed = parse_capture(path, pcap)?;
    let (kept, _) = filter_hosts(&parsed.records, &HostFilter::default());
    let streams = clean_pipeline(&parsed.records, &kept, &CleanConfig::default());
    Ok(streams
        .values()
        .flat_map(|s| sequence_stream(s, cfg))
        .collect())
}

#[derive(Debug, Deserialize)]
struct DomainLabelLine {
    domain: String,
    label: u8,
}

#[derive(Debug, Deserialize)]
struct HostLabelLine {
    host: String,
    class: String,
}

pub fn read_domain_labels(path: &Path) -> Result<BTreeMap<String, bool>> {
    read_lines::<DomainLabelLine>(path)?
        .into_iter()
        .map(|l| match l.label {
            0 | 1 => Ok((l.domain, l.label == 1)),
            other => bail!("domain {} has label {other}, expected 0 or 1", l.domain),
        })
        .collect()
}

/// Host classes, with the class list sorted by name.
pub fn read_host_labels(path: &Path) -> Result<(BTreeMap<String, usize>, Vec<String>)> {
    let lines = read_lines::<HostLabelLine>(path)?;
    let mut classes: Vec<String> = lines.iter().map(|l| l.class.clone()).collect();
    classes.sort();
    classes.dedup();
    let by_host = lines
        .into_iter()
        .map(|l| {
            let c = classes.binary_search(&l.class).expect("class listed");
            (l.host, c)
        })
        .collect();
    Ok((by_host, classes))
}

/// Either model family, as stored in a checkpoint.
pub enum AnyModel {
    Gt(DnsGtModel),
    W2v(W2vModel),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        if !path.exists() {
            return Err(dnsgt_core::Error::FileNotFound(path.to_path_buf()).into());
        }
        let ck = CheckpointFile::load(path)?;
        let cfg: serde_json::Value = serde_json::from_str(&ck.config_json)?;
        let model = if cfg.get("variant").is_some() {
            AnyModel::W2v(W2vModel::from_checkpoint(&ck)?)
        } else {
            AnyModel::Gt(DnsGtModel::from_checkpoint(&ck)?)
        };
        Ok((model, ck.vocab_hash))
    }

    pub fn save(&self, path: &Path, hash: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        match self {
            AnyModel::Gt(m) => m.save(path, hash)?,
            AnyModel::W2v(m) => m.save(path, hash)?,
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        match self {
            AnyModel::Gt(m) => m.config.seq_len,
            AnyModel::W2v(m) => m.config.seq_len,
        }
    }

    pub fn export_embeddings(&self, vocab: &Vocabulary) -> Vec<(String, Vec<f64>)> {
        match self {
            AnyModel::Gt(m) => m.export_embeddings(vocab),
            AnyModel::W2v(m) => m.export_embeddings(vocab),
        }
    }

    /// Tokenized corpus of sequences already [`fit`] to the model capacity.
    pub fn corpus(&self, raw: &[RawSequence], vocab: &Vocabulary) -> Result<Corpus> {
        match self {
            AnyModel::Gt(m) => Ok(Corpus::build(raw, vocab, &m.config)?),
            AnyModel::W2v(m) => {
                let seqs = tokenize_all(raw, vocab, m.config.seq_len)?;
                let topos = seqs
                    .iter()
                    .map(|s| TopologySet::single(AdjacencyMatrix::identity(s.capacity())))
                    .collect();
                Ok(Corpus::new(seqs, topos)?)
            }
        }
    }

    pub fn scorer(&self) -> &dyn TokenScorer {
        match self {
            AnyModel::Gt(m) => m,
            AnyModel::W2v(m) => m,
        }
    }
}

pub fn tokenize_all(
    raw: &[RawSequence],
    vocab: &Vocabulary,
    cap: usize,
) -> Result<Vec<TokenSequence>> {
    Ok(raw
        .iter()
        .map(|r| vocab.tokenize(r, cap))
        .collect::<dnsgt_core::Result<_>>()?)
}

/// Splits sequences into chunks of at most `cap` queries.
pub fn fit(raw: &[RawSequence], cap: usize) -> Vec<RawSequence> {
    raw.iter()
        .flat_map(|r| {
            r.queries
                .chunks(cap)
                .enumerate()
                .map(move |(i, q)| RawSequence {
                    host: r.host.clone(),
                    queries: q.to_vec(),
                    start: r.start + i * cap,
                })
        })
        .collect()
}

/// Loads a vocabulary and checks it against the checkpoint hash.
pub fn load_vocab(path: &Path, checkpoint_hash: &str) -> Result<Vocabulary> {
    let vocab = Vocabulary::load(path)?;
    check_vocab(checkpoint_hash, &vocab)?;
    Ok(vocab)
}

/// `<dir>/<stem>.vocab.json` for a checkpoint `<dir>/<stem>.ckpt`.
pub fn default_vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab.json")
}
