//! Deterministic synthetic DNS traffic with planted co-occurrence structure,
//! context-dependent labels and beaconing bot hosts.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{self, RawDnsRecord, DNS_PORT, QTYPE_A};
use crate::sequencer::RawSequence;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicConfig {
    pub name: String,
    pub domains: Vec<String>,
    /// Relative draw weights; empty means uniform.
    #[serde(default)]
    pub weights: Vec<f64>,
    pub malicious: bool,
}

/// Hosts of one bot class: ordinary sessions plus fixed-period queries to a
/// small domain set between sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BotProfile {
    pub class: String,
    pub hosts: usize,
    pub domains: Vec<String>,
    pub period: f64,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Hosts without a bot profile.
    pub n_hosts: usize,
    pub topics: Vec<TopicConfig>,
    /// Per-topic session probability; empty means uniform.
    pub topic_weights: Vec<f64>,
    pub min_sessions: usize,
    /// Sessions are added until every host's activity spans this many seconds.
    pub min_duration: f64,
    /// Sessions are added until every host has at least this many requests.
    pub min_requests: usize,
    pub session_len_min: usize,
    pub session_len_max: usize,
    pub intra_gap: f64,
    pub inter_gap: f64,
    /// Extra uniform gap in [0, inter_jitter) between sessions.
    pub inter_jitter: f64,
    pub response_delay: f64,
    /// When the first member is drawn, the second follows immediately.
    pub planted_pairs: Vec<(String, String)>,
    /// Sessions made only of whole planted pairs (`session_len_*` count pairs).
    pub pairs_only: bool,
    pub bots: Vec<BotProfile>,
    pub clean_class: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_hosts: 4,
            topics: Vec::new(),
            topic_weights: Vec::new(),
            min_sessions: 1,
            min_duration: 0.0,
            min_requests: 100,
            session_len_min: 4,
            session_len_max: 8,
            intra_gap: 0.1,
            inter_gap: 120.0,
            inter_jitter: 60.0,
            response_delay: 0.01,
            planted_pairs: Vec::new(),
            pairs_only: false,
            bots: Vec::new(),
            clean_class: "clean".into(),
        }
    }
}

fn names(prefix: &str, n: usize, tld: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}.{tld}")).collect()
}

impl SynthConfig {
    /// Ten pairs (a_k, b_k) over twenty domains; each session is one to
    /// three distinct pairs in random order.
    pub fn planted_pairs() -> Self {
        let a = names("a", 10, "pair.com");
        let b = names("b", 10, "pair.com");
        Self {
            seed: 7,
            n_hosts: 16,
            topics: vec![TopicConfig {
                name: "pairs".into(),
                domains: a.clone(),
                weights: Vec::new(),
                malicious: false,
            }],
            session_len_min: 1,
            session_len_max: 3,
            planted_pairs: a.into_iter().zip(b).collect(),
            pairs_only: true,
            ..Self::default()
        }
    }

    /// One benign and one malicious topic sharing a block of ambiguous
    /// domains that make up half of each topic's draws.
    pub fn two_topic(specific: usize, ambiguous: usize) -> Self {
        let amb = names("shared", ambiguous, "org");
        let topic = |name: &str, prefix: &str, tld: &str, malicious: bool| {
            let own = names(prefix, specific, tld);
            let mut weights = vec![0.5 / specific as f64; specific];
            weights.extend(std::iter::repeat_n(0.5 / ambiguous as f64, ambiguous));
            TopicConfig {
                name: name.into(),
                domains: own.into_iter().chain(amb.clone()).collect(),
                weights,
                malicious,
            }
        };
        Self {
            seed: 11,
            n_hosts: 12,
            topics: vec![
                topic("benign", "web", "com", false),
                topic("malicious", "evil", "net", true),
            ],
            min_sessions: 20,
            session_len_min: 6,
            session_len_max: 8,
            ..Self::default()
        }
    }

    /// Clean hosts and two beaconing bot classes over shared benign browsing.
    pub fn botnet() -> Self {
        let bot = |class: &str| BotProfile {
            class: class.into(),
            hosts: 4,
            domains: names(class, 3, "biz"),
            period: 30.0,
            jitter: 2.0,
        };
        Self {
            seed: 13,
            n_hosts: 8,
            topics: vec![
                TopicConfig {
                    name: "news".into(),
                    domains: names("news", 12, "com"),
                    weights: Vec::new(),
                    malicious: false,
                },
                TopicConfig {
                    name: "shop".into(),
                    domains: names("shop", 12, "com"),
                    weights: Vec::new(),
                    malicious: false,
                },
            ],
            min_duration: 3600.0,
            session_len_min: 4,
            session_len_max: 8,
            bots: vec![bot("virut"), bot("necurs")],
            ..Self::default()
        }
    }

    /// Small two-topic corpus with one bot class, sized for the tiny model preset.
    pub fn tiny() -> Self {
        let mut cfg = Self::two_topic(15, 10);
        cfg.seed = 1;
        cfg.n_hosts = 6;
        cfg.min_sessions = 15;
        cfg.min_duration = 2400.0;
        cfg.bots = vec![BotProfile {
            class: "pitou".into(),
            hosts: 2,
            domains: names("pitou", 3, "biz"),
            period: 30.0,
            jitter: 2.0,
        }];
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "planted" | "planted_pairs" => Ok(Self::planted_pairs()),
            "two_topic" => Ok(Self::two_topic(20, 10)),
            "botnet" => Ok(Self::botnet()),
            other => Err(Error::BadConfig(format!("unknown synth preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadConfig(m));
        if self.topics.is_empty() {
            return bad("at least one topic is required".into());
        }
        if self.n_hosts + self.bots.iter().map(|b| b.hosts).sum::<usize>() == 0 {
            return bad("no hosts".into());
        }
        for t in &self.topics {
            if t.domains.is_empty() {
                return bad(format!("topic '{}' has no domains", t.name));
            }
            if !t.weights.is_empty()
                && (t.weights.len() != t.domains.len() || !valid_weights(&t.weights))
            {
                return bad(format!("topic '{}' has invalid weights", t.name));
            }
        }
        if !self.topic_weights.is_empty()
            && (self.topic_weights.len() != self.topics.len()
                || !valid_weights(&self.topic_weights))
        {
            return bad("invalid topic weights".into());
        }
        if self.session_len_min < 1 || self.session_len_min > self.session_len_max {
            return bad("need 1 <= session_len_min <= session_len_max".into());
        }
        if !(self.min_duration >= 0.0 && self.min_duration.is_finite()) {
            return bad("min_duration must be finite and >= 0".into());
        }
        if !(self.intra_gap > 0.0 && self.inter_gap > self.intra_gap && self.inter_jitter >= 0.0) {
            return bad("need 0 < intra_gap < inter_gap and inter_jitter >= 0".into());
        }
        if !(self.response_delay > 0.0 && self.response_delay < self.intra_gap) {
            return bad("response_delay must lie in (0, intra_gap)".into());
        }
        if self.pairs_only {
            if self.planted_pairs.is_empty() {
                return bad("pairs_only needs planted pairs".into());
            }
            if self.session_len_max > self.planted_pairs.len() {
                return bad("session_len_max exceeds the number of planted pairs".into());
            }
        }
        for b in &self.bots {
            if b.domains.is_empty()
                || !b.period.is_finite()
                || b.period <= 0.0
                || !(b.jitter >= 0.0 && b.jitter < b.period / 2.0)
            {
                return bad(format!("bot profile '{}' is invalid", b.class));
            }
            if b.class == self.clean_class {
                return bad("bot class collides with the clean class".into());
            }
        }
        Ok(())
    }
}

fn valid_weights(w: &[f64]) -> bool {
    w.iter().all(|x| x.is_finite() && *x >= 0.0) && w.iter().sum::<f64>() > 0.0
}

/// One ground-truth burst of a host's queries with per-occurrence labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSession {
    pub host: String,
    pub session: usize,
    pub topic: String,
    pub ts: Vec<f64>,
    pub domains: Vec<String>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainLabel {
    pub domain: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostLabel {
    pub host: String,
    pub class: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub records: Vec<RawDnsRecord>,
    /// Chronological per host, hosts in generation order.
    pub sessions: Vec<SynthSession>,
    pub domain_labels: Vec<DomainLabel>,
    pub host_labels: Vec<HostLabel>,
    /// Clean class first, then bot classes in profile order.
    pub classes: Vec<String>,
}

/// Files written by [`SynthOutput::write_dir`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub queries: PathBuf,
    pub sessions: PathBuf,
    pub domain_labels: PathBuf,
    pub host_labels: PathBuf,
}

fn host_ip(i: usize) -> String {
    format!("10.{}.{}.{}", 1 + i / 62500, (i / 250) % 250, i % 250 + 1)
}

struct HostPlan<'a> {
    ip: String,
    class: &'a str,
    bot: Option<&'a BotProfile>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topic_pick = WeightedIndex::new(if cfg.topic_weights.is_empty() {
        vec![1.0; cfg.topics.len()]
    } else {
        cfg.topic_weights.clone()
    })
    .map_err(|e| Error::BadConfig(e.to_string()))?;
    let domain_picks: Vec<WeightedIndex<f64>> = cfg
        .topics
        .iter()
        .map(|t| {
            WeightedIndex::new(if t.weights.is_empty() {
                vec![1.0; t.domains.len()]
            } else {
                t.weights.clone()
            })
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::BadConfig(e.to_string()))?;
    let partner: HashMap<&str, &str> = cfg
        .planted_pairs
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();

    let mut hosts: Vec<HostPlan> = (0..cfg.n_hosts)
        .map(|_| HostPlan {
            ip: String::new(),
            class: &cfg.clean_class,
            bot: None,
        })
        .collect();
    for b in &cfg.bots {
        hosts.extend((0..b.hosts).map(|_| HostPlan {
            ip: String::new(),
            class: &b.class,
            bot: Some(b),
        }));
    }
    for (i, h) in hosts.iter_mut().enumerate() {
        h.ip = host_ip(i);
    }

    let mut sessions = Vec::new();
    for (hi, h) in hosts.iter().enumerate() {
        let t0 = hi as f64 * 7.25;
        let mut t = t0;
        let mut requests = 0usize;
        let mut n_sessions = 0usize;
        while n_sessions < cfg.min_sessions
            || requests < cfg.min_requests
            || t - t0 < cfg.min_duration
        {
            let ti = topic_pick.sample(&mut rng);
            let topic = &cfg.topics[ti];
            let len = rng.random_range(cfg.session_len_min..=cfg.session_len_max);
            let mut domains: Vec<String> = Vec::with_capacity(len * 2);
            if cfg.pairs_only {
                let mut order: Vec<usize> = (0..cfg.planted_pairs.len()).collect();
                order.shuffle(&mut rng);
                for &k in &order[..len] {
                    domains.push(cfg.planted_pairs[k].0.clone());
                    domains.push(cfg.planted_pairs[k].1.clone());
                }
            } else {
                while domains.len() < len {
                    let d = &topic.domains[domain_picks[ti].sample(&mut rng)];
                    domains.push(d.clone());
                    if let Some(p) = partner.get(d.as_str()) {
                        if domains.len() < len {
                            domains.push(p.to_string());
                        }
                    }
                }
            }
            let ts: Vec<f64> = (0..domains.len())
                .map(|j| t + j as f64 * cfg.intra_gap)
                .collect();
            let end = *ts.last().expect("non-empty session");
            let label = u8::from(topic.malicious);
            requests += domains.len();
            sessions.push(SynthSession {
                host: h.ip.clone(),
                session: 0,
                topic: topic.name.clone(),
                labels: vec![label; domains.len()],
                ts,
                domains,
            });
            n_sessions += 1;
            let gap = cfg.inter_gap + rng.random::<f64>() * cfg.inter_jitter;
            if let Some(b) = h.bot {
                let mut bt = end + b.period;
                while bt + b.period <= end + gap {
                    let at = bt + (rng.random::<f64>() * 2.0 - 1.0) * b.jitter;
                    let d = b.domains[rng.random_range(0..b.domains.len())].clone();
                    sessions.push(SynthSession {
                        host: h.ip.clone(),
                        session: 0,
                        topic: format!("beacon:{}", b.class),
                        ts: vec![at],
                        domains: vec![d],
                        labels: vec![1],
                    });
                    requests += 1;
                    bt += b.period;
                }
            }
            t = end + gap;
        }
    }
    for (i, s) in sessions.iter_mut().enumerate() {
        s.session = i;
    }

    let mut records = Vec::new();
    let mut txn: HashMap<&str, u16> = HashMap::new();
    for s in &sessions {
        for (&ts, d) in s.ts.iter().zip(&s.domains) {
            let id = txn.entry(s.host.as_str()).or_insert(0);
            *id = id.wrapping_add(1);
            let base = RawDnsRecord {
                timestamp: ts,
                src_host: s.host.clone(),
                dst_port: DNS_PORT,
                qtype: QTYPE_A,
                is_request: true,
                domain: d.clone(),
                txn_id: *id,
            };
            let response = RawDnsRecord {
                timestamp: ts + cfg.response_delay,
                dst_port: 33000,
                is_request: false,
                ..base.clone()
            };
            records.push(base);
            records.push(response);
        }
    }
    records.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.src_host.cmp(&b.src_host))
            .then(b.is_request.cmp(&a.is_request))
    });

    // a domain is malicious iff most of its occurrences carry a malicious label
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in &sessions {
        for (d, &l) in s.domains.iter().zip(&s.labels) {
            let e = tally.entry(d.as_str()).or_default();
            e.0 += usize::from(l);
            e.1 += 1;
        }
    }
    let domain_labels = tally
        .into_iter()
        .map(|(d, (m, n))| DomainLabel {
            domain: d.to_string(),
            label: u8::from(2 * m > n),
        })
        .collect();
    let host_labels = hosts
        .iter()
        .map(|h| HostLabel {
            host: h.ip.clone(),
            class: h.class.to_string(),
        })
        .collect();
    let mut classes = vec![cfg.clean_class.clone()];
    classes.extend(cfg.bots.iter().map(|b| b.class.clone()));
    Ok(SynthOutput {
        records,
        sessions,
        domain_labels,
        host_labels,
        classes,
    })
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

impl SynthOutput {
    /// Writes `{prefix}.queries.jsonl`, `.sessions.jsonl`,
    /// `.domain_labels.jsonl` and `.host_labels.jsonl` into `dir`.
    pub fn write_dir(&self, dir: &Path, prefix: &str) -> Result<SynthPaths> {
        std::fs::create_dir_all(dir)?;
        let p = |s: &str| dir.join(format!("{prefix}.{s}.jsonl"));
        let paths = SynthPaths {
            queries: p("queries"),
            sessions: p("sessions"),
            domain_labels: p("domain_labels"),
            host_labels: p("host_labels"),
        };
        ingest::write_jsonl(File::create(&paths.queries)?, &self.records)?;
        write_lines(&paths.sessions, &self.sessions)?;
        write_lines(&paths.domain_labels, &self.domain_labels)?;
        write_lines(&paths.host_labels, &self.host_labels)?;
        Ok(paths)
    }

    /// Ground-truth sessions as raw sequences (not chopped to any capacity).
    pub fn raw_sessions(&self) -> Vec<RawSequence> {
        self.sessions
            .iter()
            .map(|s| RawSequence {
                host: s.host.clone(),
                queries: s
                    .ts
                    .iter()
                    .copied()
                    .zip(s.domains.iter().cloned())
                    .collect(),
                start: 0,
            })
            .collect()
    }

    fn occurrence_map(&self) -> HashMap<(&str, u64), u8> {
        let mut m = HashMap::new();
        for s in &self.sessions {
            for (t, &l) in s.ts.iter().zip(&s.labels) {
                m.insert((s.host.as_str(), t.to_bits()), l);
            }
        }
        m
    }

    /// Per-position occurrence labels for sequences cut from this output,
    /// padded with `None` to `cap`.
    pub fn occurrence_labels(&self, seqs: &[RawSequence], cap: usize) -> Vec<Vec<Option<f64>>> {
        let m = self.occurrence_map();
        seqs.iter()
            .map(|s| {
                let mut v: Vec<Option<f64>> = s
                    .queries
                    .iter()
                    .take(cap)
                    .map(|(t, _)| {
                        m.get(&(s.host.as_str(), t.to_bits()))
                            .map(|&l| f64::from(l))
                    })
                    .collect();
                v.resize(cap, None);
                v
            })
            .collect()
    }

    /// Class id of each sequence's host (index into `classes`).
    pub fn host_class_ids(&self, seqs: &[RawSequence]) -> Result<Vec<usize>> {
        let by_host: HashMap<&str, usize> = self
            .host_labels
            .iter()
            .map(|h| {
                (
                    h.host.as_str(),
                    self.classes.iter().position(|c| *c == h.class).unwrap_or(0),
                )
            })
            .collect();
        seqs.iter()
            .map(|s| {
                by_host
                    .get(s.host.as_str())
                    .copied()
                    .ok_or_else(|| Error::MissingLabels(s.host.clone()))
            })
            .collect()
    }

    /// Session id of every request, keyed like the query streams.
    pub fn session_of(&self) -> HashMap<(String, u64), usize> {
        let mut m = HashMap::new();
        for s in &self.sessions {
            for t in &s.ts {
                m.insert((s.host.clone(), t.to_bits()), s.session);
            }
        }
        m
    }
}
