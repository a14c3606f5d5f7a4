//! Raw DNS traffic ingestion and cleaning.
//!
//! Both input formats converge on [`RawDnsRecord`]. The `host` of a record is
//! always the client endpoint: the IP source of a request and the IP
//! destination of a response, so per-host request/response ratios can be
//! computed from a single field.

mod jsonl;
mod pcap;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub use jsonl::{parse_jsonl, read_jsonl, read_stream_jsonl, write_jsonl, write_streams_jsonl};
pub use pcap::{parse_pcap, read_pcap, PcapStream, PcapWriter};

/// DNS query type code for IPv4 address records.
pub const QTYPE_A: u16 = 1;
pub const DNS_PORT: u16 = 53;
/// Longest presentation-form domain name accepted.
pub const MAX_DOMAIN_LEN: usize = 253;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDnsRecord {
    #[serde(rename = "ts")]
    pub timestamp: f64,
    #[serde(rename = "host")]
    pub src_host: String,
    pub dst_port: u16,
    pub qtype: u16,
    pub is_request: bool,
    pub domain: String,
    pub txn_id: u16,
}

/// Records plus the number of inputs that were skipped as non-DNS or malformed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParseOutcome {
    pub records: Vec<RawDnsRecord>,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostStats {
    pub host: String,
    pub request_count: u64,
    pub response_count: u64,
}

impl HostStats {
    /// Requests per response; `None` when no response was observed.
    pub fn ratio(&self) -> Option<f64> {
        (self.response_count > 0).then(|| self.request_count as f64 / self.response_count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryStream {
    pub host: String,
    pub queries: Vec<(f64, String)>,
}

impl QueryStream {
    pub fn timestamps(&self) -> Vec<f64> {
        self.queries.iter().map(|(t, _)| *t).collect()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Lowercases, strips one trailing dot and rejects empty or over-long names.
pub fn normalize_domain(name: &str) -> Option<String> {
    let trimmed = name.strip_suffix('.').unwrap_or(name);
    if trimmed.is_empty() || trimmed.len() > MAX_DOMAIN_LEN {
        return None;
    }
    Some(trimmed.to_ascii_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HostFilter {
    pub min_requests: u64,
    pub ratio_low: f64,
    pub ratio_high: f64,
}

impl Default for HostFilter {
    fn default() -> Self {
        Self {
            min_requests: 100,
            ratio_low: 0.985,
            ratio_high: 1.015,
        }
    }
}

/// Counts requests and responses per host (on all records, before any
/// A-record filtering) and keeps active end-user hosts.
pub fn filter_hosts(
    records: &[RawDnsRecord],
    filter: &HostFilter,
) -> (BTreeSet<String>, Vec<HostStats>) {
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for r in records {
        let entry = counts.entry(r.src_host.as_str()).or_default();
        if r.is_request {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    let stats: Vec<HostStats> = counts
        .into_iter()
        .map(|(host, (req, resp))| HostStats {
            host: host.to_string(),
            request_count: req,
            response_count: resp,
        })
        .collect();
    let kept = stats
        .iter()
        .filter(|s| {
            s.request_count >= filter.min_requests
                && s.ratio()
                    .is_some_and(|r| filter.ratio_low <= r && r <= filter.ratio_high)
        })
        .map(|s| s.host.clone())
        .collect();
    (kept, stats)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleanConfig {
    /// Seconds within which a repeated (host, txn_id, domain) is a retransmission.
    pub dedup_window: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { dedup_window: 5.0 }
    }
}

/// Returns true when a record is an A-record request sent to port 53.
pub fn is_a_request(r: &RawDnsRecord) -> bool {
    r.is_request && r.dst_port == DNS_PORT && r.qtype == QTYPE_A
}

/// Keeps A-record requests to port 53 from kept hosts, drops retransmissions,
/// and groups the survivors into chronologically sorted per-host streams.
pub fn clean_pipeline(
    records: &[RawDnsRecord],
    kept_hosts: &BTreeSet<String>,
    cfg: &CleanConfig,
) -> BTreeMap<String, QueryStream> {
    let mut per_host: BTreeMap<&str, Vec<&RawDnsRecord>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| is_a_request(r) && kept_hosts.contains(&r.src_host))
    {
        per_host.entry(r.src_host.as_str()).or_default().push(r);
    }

    per_host
        .into_iter()
        .map(|(host, mut recs)| {
            recs.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            // last sighting of each (txn_id, domain); retransmissions chain off the latest copy
            let mut last_seen: HashMap<(u16, &str), f64> = HashMap::new();
            let mut queries = Vec::with_capacity(recs.len());
            for r in recs {
                let key = (r.txn_id, r.domain.as_str());
                let dup = last_seen
                    .get(&key)
                    .is_some_and(|&t| r.timestamp - t <= cfg.dedup_window);
                last_seen.insert(key, r.timestamp);
                if !dup {
                    queries.push((r.timestamp, r.domain.clone()));
                }
            }
            (
                host.to_string(),
                QueryStream {
                    host: host.to_string(),
                    queries,
                },
            )
        })
        .filter(|(_, s)| !s.is_empty())
        .collect()
}
