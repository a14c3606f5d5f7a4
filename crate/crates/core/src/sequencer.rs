//! Packing a host's chronological query stream into temporally contiguous
//! sequences of at most `max_len` queries.

use serde::{Deserialize, Serialize};

use crate::ingest::QueryStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Fixed windows of `max_len` queries advanced by `stride` queries.
    Fixed,
    /// Greedy grouping on inter-query delays.
    #[serde(alias = "greedy")]
    Time,
    /// DBSCAN along the time axis with the median consecutive delta as radius.
    Density,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Strategy::Fixed),
            "time" | "greedy" => Ok(Strategy::Time),
            "density" | "dbscan" => Ok(Strategy::Density),
            other => Err(Error::BadSequencingConfig(format!(
                "unknown strategy '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SequencingConfig {
    pub strategy: Strategy,
    pub max_len: usize,
    pub stride: usize,
    /// Largest allowed gap to the previous query (seconds).
    pub delta_intra: f64,
    /// Base sequence duration (seconds).
    pub delta_base: f64,
    /// Gap below which a query may extend a sequence past `delta_base`.
    pub delta_inter: f64,
    pub min_pts: usize,
}

impl Default for SequencingConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Density,
            max_len: 32,
            stride: 32,
            delta_intra: 30.0,
            delta_base: 300.0,
            delta_inter: 2.0,
            min_pts: 1,
        }
    }
}

impl SequencingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSequencingConfig(m.to_string()));
        if self.max_len < 1 {
            return bad("max_len must be >= 1");
        }
        if self.stride < 1 {
            return bad("stride must be >= 1");
        }
        if !(self.delta_intra > 0.0 && self.delta_base > 0.0 && self.delta_inter > 0.0) {
            return bad("time thresholds must be > 0");
        }
        if self.min_pts < 1 {
            return bad("min_pts must be >= 1");
        }
        Ok(())
    }
}

/// A contiguous run of one host's queries. `start` is the index of the first
/// query in the host stream it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSequence {
    pub host: String,
    pub queries: Vec<(f64, String)>,
    #[serde(skip)]
    pub start: usize,
}

impl RawSequence {
    fn from_range(stream: &QueryStream, start: usize, end: usize) -> Self {
        Self {
            host: stream.host.clone(),
            queries: stream.queries[start..end].to_vec(),
            start,
        }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.queries.iter().map(|(_, d)| d.as_str())
    }
}

/// Windows start at 0, s, 2s, ...; a trailing window is emitted only when it
/// reaches past the end of the previous one.
pub fn fixed_length(stream: &QueryStream, max_len: usize, stride: usize) -> Vec<RawSequence> {
    let n = stream.len();
    let mut out = Vec::new();
    let mut prev_end = 0;
    let mut start = 0;
    while start < n {
        let end = (start + max_len).min(n);
        if end > prev_end {
            out.push(RawSequence::from_range(stream, start, end));
            prev_end = end;
        }
        if end == n {
            break;
        }
        start += stride;
    }
    out
}

/// Single-pass greedy grouping. Query i joins the open sequence (started at
/// t0) iff its gap to query i-1 is below `delta_intra`, it is within
/// `delta_base` of t0 or its gap is below `delta_inter`, and the sequence is
/// not full.
pub fn greedy_time_based(stream: &QueryStream, cfg: &SequencingConfig) -> Vec<RawSequence> {
    let q = &stream.queries;
    let mut out = Vec::new();
    if q.is_empty() {
        return out;
    }
    let mut start = 0;
    for i in 1..q.len() {
        let (t0, prev, t) = (q[start].0, q[i - 1].0, q[i].0);
        let gap = t - prev;
        let joins = gap < cfg.delta_intra
            && (t - t0 < cfg.delta_base || gap < cfg.delta_inter)
            && i - start < cfg.max_len;
        if !joins {
            out.push(RawSequence::from_range(stream, start, i));
            start = i;
        }
    }
    out.push(RawSequence::from_range(stream, start, q.len()));
    out
}

pub const NOISE: i64 = -1;

/// DBSCAN over sorted 1-d points with neighborhood |a - b| <= eps.
///
/// Neighborhoods are contiguous index ranges, so they are found with two
/// pointers. Core points chain into one cluster exactly when consecutive core
/// points are within eps. Border points go to the earliest cluster that
/// reaches them; clusters are numbered in order of their first member.
pub fn dbscan_1d(points: &[f64], eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.len();
    let mut labels = vec![NOISE; n];
    if n == 0 {
        return labels;
    }
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut core = vec![false; n];
    for i in 0..n {
        while points[i] - points[lo] > eps {
            lo += 1;
        }
        if hi < i {
            hi = i;
        }
        while hi + 1 < n && points[hi + 1] - points[i] <= eps {
            hi += 1;
        }
        core[i] = hi - lo + 1 >= min_pts;
    }

    let mut cluster = -1i64;
    let mut last_core: Option<usize> = None;
    for i in 0..n {
        if !core[i] {
            continue;
        }
        match last_core {
            Some(p) if points[i] - points[p] <= eps => {}
            _ => cluster += 1,
        }
        labels[i] = cluster;
        last_core = Some(i);
    }

    // border points: the nearest core on the left belongs to the earlier cluster
    let mut left_core: Option<usize> = None;
    let mut right_core = vec![None; n];
    let mut next: Option<usize> = None;
    for i in (0..n).rev() {
        right_core[i] = next;
        if core[i] {
            next = Some(i);
        }
    }
    for i in 0..n {
        if core[i] {
            left_core = Some(i);
            continue;
        }
        if let Some(c) = left_core.filter(|&c| points[i] - points[c] <= eps) {
            labels[i] = labels[c];
        } else if let Some(c) = right_core[i].filter(|&c| points[c] - points[i] <= eps) {
            labels[i] = labels[c];
        }
    }
    labels
}

/// Median of consecutive timestamp deltas (mean of the two middle values for
/// an even count).
pub fn median_delta(timestamps: &[f64]) -> Result<f64> {
    if timestamps.len() < 2 {
        return Err(Error::DegenerateStream(timestamps.len()));
    }
    let mut deltas: Vec<f64> = timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.sort_by(f64::total_cmp);
    let m = deltas.len();
    Ok(if m % 2 == 1 {
        deltas[m / 2]
    } else {
        0.5 * (deltas[m / 2 - 1] + deltas[m / 2])
    })
}

/// Relative widening of the radius so deltas equal to the median up to
/// rounding stay neighbors.
pub const EPS_SLACK: f64 = 1e-9;

/// Density sequencing: clusters in chronological order, each chopped into
/// chunks of at most `max_len`. Noise points (possible only with
/// `min_pts > 1`) are left out. A single-query stream yields one sequence.
pub fn cluster_time_based(stream: &QueryStream, cfg: &SequencingConfig) -> Vec<RawSequence> {
    let ts = stream.timestamps();
    let eps = match median_delta(&ts) {
        Ok(e) => e * (1.0 + EPS_SLACK),
        Err(_) => {
            return if stream.is_empty() {
                Vec::new()
            } else {
                vec![RawSequence::from_range(stream, 0, stream.len())]
            };
        }
    };
    let labels = dbscan_1d(&ts, eps, cfg.min_pts);
    let mut out = Vec::new();
    let mut i = 0;
    while i < labels.len() {
        if labels[i] == NOISE {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < labels.len() && labels[j] == labels[i] {
            j += 1;
        }
        let mut s = i;
        while s < j {
            let e = (s + cfg.max_len).min(j);
            out.push(RawSequence::from_range(stream, s, e));
            s = e;
        }
        i = j;
    }
    out
}

pub fn sequence_stream(stream: &QueryStream, cfg: &SequencingConfig) -> Vec<RawSequence> {
    match cfg.strategy {
        Strategy::Fixed => fixed_length(stream, cfg.max_len, cfg.stride),
        Strategy::Time => greedy_time_based(stream, cfg),
        Strategy::Density => cluster_time_based(stream, cfg),
    }
}
