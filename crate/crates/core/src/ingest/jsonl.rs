//! Canonical JSONL query log: one record object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::path::Path;

use super::{normalize_domain, ParseOutcome, QueryStream, RawDnsRecord};
use crate::{Error, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn validate(mut r: RawDnsRecord) -> Option<RawDnsRecord> {
    if !r.timestamp.is_finite() || r.timestamp < 0.0 {
        return None;
    }
    match normalize_domain(&r.domain) {
        Some(d) => r.domain = d,
        None if r.is_request => return None,
        None => r.domain.clear(),
    }
    Some(r)
}

/// Parses records from any line-oriented reader; schema failures are counted.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawDnsRecord>(&line)
            .ok()
            .and_then(validate)
        {
            Some(r) => out.records.push(r),
            None => out.skipped += 1,
        }
    }
    Ok(out)
}

pub fn parse_jsonl<P: AsRef<Path>>(path: P) -> Result<ParseOutcome> {
    read_jsonl(BufReader::new(open(path.as_ref())?))
}

pub fn write_jsonl<W: Write>(out: W, records: &[RawDnsRecord]) -> Result<()> {
    let mut w = BufWriter::new(out);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StreamLine {
    ts: f64,
    domain: String,
}

/// Writes one host stream as `{ts, domain}` lines.
pub fn write_streams_jsonl<W: Write>(out: W, stream: &QueryStream) -> Result<()> {
    let mut w = BufWriter::new(out);
    for (ts, domain) in &stream.queries {
        serde_json::to_writer(
            &mut w,
            &StreamLine {
                ts: *ts,
                domain: domain.clone(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stream_jsonl<P: AsRef<Path>>(path: P, host: &str) -> Result<QueryStream> {
    let reader = BufReader::new(open(path.as_ref())?);
    let mut queries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: StreamLine = serde_json::from_str(&line)?;
        queries.push((l.ts, l.domain));
    }
    Ok(QueryStream {
        host: host.to_string(),
        queries,
    })
}
