//! Data preparation: capture to per-host streams, streams to sequences,
//! vocabulary building and synthetic corpora.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use dnsgt_core::ingest::{
    clean_pipeline, filter_hosts, read_stream_jsonl, write_streams_jsonl, CleanConfig, HostFilter,
};
use dnsgt_core::sequencer::{sequence_stream, SequencingConfig, Strategy};
use dnsgt_core::synth::{generate, SynthConfig};
use dnsgt_core::training::{DataPaths, PipelineConfig};
use dnsgt_core::vocab::Vocabulary;
use serde::Serialize;

use crate::data::{create, parse_capture, read_sequences, write_sequences};
use crate::manifest::{beside, Manifest};

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptureFormat {
    Pcap,
    Jsonl,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// Capture file (libpcap or JSONL records)
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; inferred from the extension when omitted
    #[arg(long, value_enum)]
    pub format: Option<CaptureFormat>,
    /// Minimum number of requests for a host to be kept
    #[arg(long, default_value_t = 100)]
    pub min_requests: u64,
    /// Lowest accepted request/response ratio
    #[arg(long, default_value_t = 0.985)]
    pub ratio_low: f64,
    /// Highest accepted request/response ratio
    #[arg(long, default_value_t = 1.015)]
    pub ratio_high: f64,
    /// Retransmission window in seconds
    #[arg(long, default_value_t = 5.0)]
    pub dedup_window: f64,
    /// Output directory (one `<host>.jsonl` per kept host plus `stats.json`)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct HostReport<'a> {
    host: &'a str,
    requests: u64,
    responses: u64,
    ratio: Option<f64>,
    kept: bool,
    cleaned_queries: usize,
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let pcap = match a.format {
        Some(f) => matches!(f, CaptureFormat::Pcap),
        None => a.input.extension().is_some_and(|e| e == "pcap"),
    };
    let parsed = parse_capture(&a.input, pcap)?;
    let filter = HostFilter {
        min_requests: a.min_requests,
        ratio_low: a.ratio_low,
        ratio_high: a.ratio_high,
    };
    let (kept, stats) = filter_hosts(&parsed.records, &filter);
    let streams = clean_pipeline(
        &parsed.records,
        &kept,
        &CleanConfig {
            dedup_window: a.dedup_window,
        },
    );
    std::fs::create_dir_all(&a.out)?;
    let mut m = Manifest::new("preprocess", a)?;
    m.input(&a.input)?;
    for s in streams.values() {
        let path = a.out.join(format!("{}.jsonl", s.host));
        write_streams_jsonl(create(&path)?, s)?;
        m.output(&path);
    }
    let hosts: Vec<HostReport> = stats
        .iter()
        .map(|s| HostReport {
            host: &s.host,
            requests: s.request_count,
            responses: s.response_count,
            ratio: s.ratio(),
            kept: kept.contains(&s.host),
            cleaned_queries: streams.get(&s.host).map_or(0, |q| q.len()),
        })
        .collect();
    let report = serde_json::json!({
        "records": parsed.records.len(),
        "skipped": parsed.skipped,
        "hosts_seen": stats.len(),
        "hosts_kept": kept.len(),
        "hosts": hosts,
    });
    let stats_path = a.out.join("stats.json");
    let mut f = create(&stats_path)?;
    serde_json::to_writer_pretty(&mut f, &report)?;
    f.write_all(b"\n")?;
    m.output(&stats_path);
    m.write(&a.out.join("preprocess.manifest.json"))?;
    println!(
        "{} records ({} skipped), kept {} of {} hosts -> {}",
        parsed.records.len(),
        parsed.skipped,
        kept.len(),
        stats.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyArg {
    Fixed,
    Time,
    Density,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Fixed => Strategy::Fixed,
            StrategyArg::Time => Strategy::Time,
            StrategyArg::Density => Strategy::Density,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SequenceArgs {
    #[arg(long, value_enum, default_value = "density")]
    pub strategy: StrategyArg,
    /// Maximum sequence length
    #[arg(long = "L", default_value_t = 32)]
    pub max_len: usize,
    /// Window stride for the fixed strategy
    #[arg(long, default_value_t = 32)]
    pub stride: usize,
    /// Largest gap to the previous query, seconds
    #[arg(long, default_value_t = 30.0)]
    pub delta_intra: f64,
    /// Base sequence duration, seconds
    #[arg(long, default_value_t = 300.0)]
    pub delta_base: f64,
    /// Gap allowing extension past the base duration, seconds
    #[arg(long, default_value_t = 2.0)]
    pub delta_inter: f64,
    /// DBSCAN core-point threshold
    #[arg(long, default_value_t = 1)]
    pub min_pts: usize,
    /// Directory of per-host streams written by `preprocess`
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output JSONL file, one `{host, ts, domains}` object per line
    #[arg(long)]
    pub out: PathBuf,
}

impl SequenceArgs {
    fn config(&self) -> SequencingConfig {
        SequencingConfig {
            strategy: self.strategy.into(),
            max_len: self.max_len,
            stride: self.stride,
            delta_intra: self.delta_intra,
            delta_base: self.delta_base,
            delta_inter: self.delta_inter,
            min_pts: self.min_pts,
        }
    }
}

fn stream_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(dnsgt_core::Error::FileNotFound(dir.to_path_buf()).into());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn sequence(a: &SequenceArgs) -> Result<()> {
    let cfg = a.config();
    cfg.validate()?;
    let mut m = Manifest::new("sequence", a)?;
    m.config(&cfg)?;
    let mut seqs = Vec::new();
    for path in stream_files(&a.input)? {
        let host = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let stream = read_stream_jsonl(&path, &host)?;
        m.input(&path)?;
        seqs.extend(sequence_stream(&stream, &cfg));
    }
    write_sequences(&a.out, &seqs)?;
    m.output(&a.out);
    m.write(&beside(&a.out))?;
    println!("{} sequences -> {}", seqs.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct BuildVocabArgs {
    /// Sequence file written by `sequence`
    #[arg(long)]
    pub sequences: PathBuf,
    /// Number of most frequent domains kept
    #[arg(long, default_value_t = 30_000)]
    pub max_domains: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn build_vocab(a: &BuildVocabArgs) -> Result<()> {
    let seqs = read_sequences(&a.sequences)?;
    let vocab = Vocabulary::build(&seqs, a.max_domains)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    vocab.save(&a.out)?;
    let mut m = Manifest::new("build-vocab", a)?;
    m.input(&a.sequences)?;
    m.output(&a.out);
    m.write(&beside(&a.out))?;
    println!(
        "{} domains, {} hosts, hash {} -> {}",
        vocab.num_real_domains(),
        vocab.host_vocab_size() - 1,
        vocab.hash(),
        a.out.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// tiny, planted_pairs, two_topic or botnet
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Overrides the preset seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::preset(&a.preset)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let out = generate(&cfg)?;
    let paths = out.write_dir(&a.out, &a.preset)?;
    let rel = |p: &Path| p.file_name().map(PathBuf::from);
    let mut pipe = PipelineConfig::tiny();
    pipe.train.seed = cfg.seed;
    pipe.data = Some(DataPaths {
        queries: rel(&paths.queries),
        sequences: None,
        domain_labels: rel(&paths.domain_labels),
        host_labels: rel(&paths.host_labels),
    });
    let config_path = a.out.join(format!("{}.json", a.preset));
    let mut f = create(&config_path)?;
    f.write_all(pipe.to_json().as_bytes())?;
    f.write_all(b"\n")?;
    let mut m = Manifest::new("synth", a)?;
    m.config(&cfg)?;
    m.seed = Some(cfg.seed);
    for p in [
        &paths.queries,
        &paths.sessions,
        &paths.domain_labels,
        &paths.host_labels,
        &config_path,
    ] {
        m.output(p);
    }
    m.write(&a.out.join(format!("{}.synth.manifest.json", a.preset)))?;
    println!(
        "{} records, {} sessions, {} hosts -> {}",
        out.records.len(),
        out.sessions.len(),
        out.host_labels.len(),
        config_path.display()
    );
    Ok(())
}
