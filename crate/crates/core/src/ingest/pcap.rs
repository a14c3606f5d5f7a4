//! Classic libpcap reader and writer for Ethernet/IPv4/UDP DNS traffic.

use std::fs::File;
use std::io::{BufReader, ErrorKind, Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use super::{normalize_domain, ParseOutcome, RawDnsRecord};
use crate::{Error, Result};

const MAGIC_USEC: u32 = 0xa1b2_c3d4;
const MAGIC_NSEC: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_UDP: u8 = 17;
const MDNS_PORT: u16 = 5353;
/// Largest capture length honored; larger values indicate corruption.
const MAX_SNAPLEN: usize = 262_144;

#[derive(Debug, Clone, Copy)]
struct Format {
    big_endian: bool,
    nanos: bool,
}

impl Format {
    fn u32(&self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    }
}

/// Streaming iterator over DNS records in a pcap capture.
///
/// Non-DNS and malformed packets are skipped and counted; a truncated final
/// packet ends the stream and counts as one skip.
pub struct PcapStream<R> {
    reader: R,
    format: Format,
    skipped: usize,
    done: bool,
}

impl<R: Read> PcapStream<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        let got = read_full(&mut reader, &mut header)?;
        if got < 4 {
            return Err(Error::TruncatedHeader(got));
        }
        let magic_le = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
        let format = match magic_le {
            MAGIC_USEC => Format {
                big_endian: false,
                nanos: false,
            },
            MAGIC_NSEC => Format {
                big_endian: false,
                nanos: true,
            },
            m if m.swap_bytes() == MAGIC_USEC => Format {
                big_endian: true,
                nanos: false,
            },
            m if m.swap_bytes() == MAGIC_NSEC => Format {
                big_endian: true,
                nanos: true,
            },
            m => return Err(Error::BadMagic(m)),
        };
        if got < GLOBAL_HEADER_LEN {
            return Err(Error::TruncatedHeader(got));
        }
        let link = format.u32(&header[20..24]);
        if link != LINKTYPE_ETHERNET {
            return Err(Error::UnsupportedLinkType(link));
        }
        Ok(Self {
            reader,
            format,
            skipped: 0,
            done: false,
        })
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn next_packet(&mut self) -> Option<(f64, Vec<u8>)> {
        if self.done {
            return None;
        }
        let mut rh = [0u8; RECORD_HEADER_LEN];
        match read_full(&mut self.reader, &mut rh) {
            Ok(0) => {
                self.done = true;
                return None;
            }
            Ok(n) if n < RECORD_HEADER_LEN => {
                self.skipped += 1;
                self.done = true;
                return None;
            }
            Ok(_) => {}
            Err(_) => {
                self.skipped += 1;
                self.done = true;
                return None;
            }
        }
        let secs = self.format.u32(&rh[0..4]) as f64;
        let frac = self.format.u32(&rh[4..8]) as f64;
        let incl = self.format.u32(&rh[8..12]) as usize;
        if incl > MAX_SNAPLEN {
            self.skipped += 1;
            self.done = true;
            return None;
        }
        let mut data = vec![0u8; incl];
        match read_full(&mut self.reader, &mut data) {
            Ok(n) if n == incl => {}
            _ => {
                self.skipped += 1;
                self.done = true;
                return None;
            }
        }
        let ts = if self.format.nanos {
            secs + frac * 1e-9
        } else {
            secs + frac * 1e-6
        };
        Some((ts, data))
    }
}

impl<R: Read> Iterator for PcapStream<R> {
    type Item = RawDnsRecord;

    fn next(&mut self) -> Option<RawDnsRecord> {
        loop {
            let (ts, frame) = self.next_packet()?;
            match decode_frame(ts, &frame) {
                Some(r) => return Some(r),
                None => self.skipped += 1,
            }
        }
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn read_pcap<P: AsRef<Path>>(path: P) -> Result<PcapStream<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    PcapStream::new(BufReader::new(file))
}

/// Reads a whole capture into memory.
pub fn parse_pcap<P: AsRef<Path>>(path: P) -> Result<ParseOutcome> {
    let mut stream = read_pcap(path)?;
    let records: Vec<_> = stream.by_ref().collect();
    Ok(ParseOutcome {
        records,
        skipped: stream.skipped(),
    })
}

fn be16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]))
}

fn decode_frame(ts: f64, frame: &[u8]) -> Option<RawDnsRecord> {
    let mut ethertype = be16(frame, 12)?;
    let mut offset = 14;
    if ethertype == ETHERTYPE_VLAN {
        ethertype = be16(frame, 16)?;
        offset = 18;
    }
    if ethertype != ETHERTYPE_IPV4 {
        return None;
    }
    let ip = frame.get(offset..)?;
    let (&vihl, _) = ip.split_first()?;
    if vihl >> 4 != 4 {
        return None;
    }
    let ihl = usize::from(vihl & 0x0f) * 4;
    if ihl < 20 || ip.len() < ihl {
        return None;
    }
    let total_len = usize::from(be16(ip, 2)?);
    let flags_frag = be16(ip, 6)?;
    // fragments (MF set or nonzero offset) cannot be decoded on their own
    if flags_frag & 0x3fff != 0 {
        return None;
    }
    if ip[9] != IPPROTO_UDP || total_len < ihl || total_len > ip.len() {
        return None;
    }
    let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let udp = &ip[ihl..total_len];
    let src_port = be16(udp, 0)?;
    let dst_port = be16(udp, 2)?;
    let udp_len = usize::from(be16(udp, 4)?);
    if udp_len < 8 || udp_len > udp.len() {
        return None;
    }
    let dns_ports = [super::DNS_PORT, MDNS_PORT];
    if !dns_ports.contains(&src_port) && !dns_ports.contains(&dst_port) {
        return None;
    }
    let dns = &udp[8..udp_len];
    let txn_id = be16(dns, 0)?;
    let flags = be16(dns, 2)?;
    let qdcount = be16(dns, 4)?;
    if qdcount == 0 {
        return None;
    }
    let is_request = flags & 0x8000 == 0;
    let (name, end) = decode_name(dns, 12)?;
    let qtype = be16(dns, end)?;
    be16(dns, end + 2)?; // qclass must be present
    let domain = normalize_domain(&name)?;
    let host = if is_request { src } else { dst };
    Some(RawDnsRecord {
        timestamp: ts,
        src_host: host.to_string(),
        dst_port,
        qtype,
        is_request,
        domain,
        txn_id,
    })
}

/// Decodes a possibly compressed name at `start`; returns the dotted name and
/// the offset just past the name in the original (uncompressed) position.
pub(crate) fn decode_name(msg: &[u8], start: usize) -> Option<(String, usize)> {
    let mut labels: Vec<&[u8]> = Vec::new();
    let mut pos = start;
    let mut end = None;
    let mut jumps = 0;
    let mut wire_len = 0usize;
    loop {
        let len = *msg.get(pos)?;
        match len & 0xc0 {
            0x00 => {
                if len == 0 {
                    end.get_or_insert(pos + 1);
                    break;
                }
                let label = msg.get(pos + 1..pos + 1 + usize::from(len))?;
                wire_len += label.len() + 1;
                if wire_len > 255 {
                    return None;
                }
                labels.push(label);
                pos += 1 + usize::from(len);
            }
            0xc0 => {
                let target = usize::from(be16(msg, pos)? & 0x3fff);
                end.get_or_insert(pos + 2);
                jumps += 1;
                if jumps > 64 || target >= msg.len() {
                    return None;
                }
                pos = target;
            }
            _ => return None,
        }
    }
    let mut name = String::with_capacity(wire_len);
    for (i, label) in labels.iter().enumerate() {
        if i > 0 {
            name.push('.');
        }
        name.push_str(std::str::from_utf8(label).ok()?);
    }
    Some((name, end?))
}

/// Writes classic pcap captures; used for fixtures and round-trip checks.
pub struct PcapWriter<W: Write> {
    out: W,
    big_endian: bool,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut out: W, big_endian: bool) -> Result<Self> {
        let mut h = Vec::with_capacity(GLOBAL_HEADER_LEN);
        let put32 = |h: &mut Vec<u8>, v: u32| {
            h.extend(if big_endian {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            })
        };
        let put16 = |h: &mut Vec<u8>, v: u16| {
            h.extend(if big_endian {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            })
        };
        put32(&mut h, MAGIC_USEC);
        put16(&mut h, 2);
        put16(&mut h, 4);
        put32(&mut h, 0);
        put32(&mut h, 0);
        put32(&mut h, 65535);
        put32(&mut h, LINKTYPE_ETHERNET);
        out.write_all(&h)?;
        Ok(Self { out, big_endian })
    }

    /// Appends a raw link-layer frame. `ts` is split into seconds and microseconds.
    pub fn write_frame(&mut self, ts: f64, frame: &[u8]) -> Result<()> {
        let secs = ts.floor();
        let usec = ((ts - secs) * 1e6).round().min(999_999.0) as u32;
        let len = frame.len() as u32;
        for v in [secs as u32, usec, len, len] {
            self.out.write_all(&if self.big_endian {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            })?;
        }
        self.out.write_all(frame)?;
        Ok(())
    }

    /// Appends a single-question DNS message over UDP/IPv4/Ethernet.
    #[allow(clippy::too_many_arguments)]
    pub fn write_dns(
        &mut self,
        ts: f64,
        src: Ipv4Addr,
        dst: Ipv4Addr,
        src_port: u16,
        dst_port: u16,
        txn_id: u16,
        is_response: bool,
        qtype: u16,
        name: &str,
    ) -> Result<()> {
        let dns = dns_message(txn_id, is_response, qtype, name);
        let frame = ipv4_frame(
            src,
            dst,
            IPPROTO_UDP,
            &udp_segment(src_port, dst_port, &dns),
        );
        self.write_frame(ts, &frame)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// DNS message with one question and no answers; the name is uncompressed.
pub fn dns_message(txn_id: u16, is_response: bool, qtype: u16, name: &str) -> Vec<u8> {
    let mut m = Vec::with_capacity(18 + name.len());
    m.extend(txn_id.to_be_bytes());
    let flags: u16 = if is_response { 0x8180 } else { 0x0100 };
    m.extend(flags.to_be_bytes());
    m.extend(1u16.to_be_bytes());
    m.extend([0u8; 6]);
    for label in name.split('.').filter(|l| !l.is_empty()) {
        m.push(label.len() as u8);
        m.extend(label.as_bytes());
    }
    m.push(0);
    m.extend(qtype.to_be_bytes());
    m.extend(1u16.to_be_bytes());
    m
}

pub fn udp_segment(src_port: u16, dst_port: u16, payload: &[u8]) -> Vec<u8> {
    let mut s = Vec::with_capacity(8 + payload.len());
    s.extend(src_port.to_be_bytes());
    s.extend(dst_port.to_be_bytes());
    s.extend(((8 + payload.len()) as u16).to_be_bytes());
    s.extend([0, 0]);
    s.extend(payload);
    s
}

/// Ethernet II frame carrying an IPv4 packet (no options, checksum left zero).
pub fn ipv4_frame(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(34 + payload.len());
    f.extend([0x02, 0, 0, 0, 0, 0x01, 0x02, 0, 0, 0, 0, 0x02]);
    f.extend(ETHERTYPE_IPV4.to_be_bytes());
    f.push(0x45);
    f.push(0);
    f.extend(((20 + payload.len()) as u16).to_be_bytes());
    f.extend([0, 0, 0, 0]);
    f.push(64);
    f.push(protocol);
    f.extend([0, 0]);
    f.extend(src.octets());
    f.extend(dst.octets());
    f.extend(payload);
    f
}

#[cfg(test)]
mod tests {
    use super::*;

    fn capture(build: impl FnOnce(&mut PcapWriter<Vec<u8>>)) -> Vec<u8> {
        let mut w = PcapWriter::new(Vec::new(), false).unwrap();
        build(&mut w);
        w.into_inner()
    }

    fn parse_bytes(bytes: &[u8]) -> Result<ParseOutcome> {
        let mut s = PcapStream::new(bytes)?;
        let records: Vec<_> = s.by_ref().collect();
        Ok(ParseOutcome {
            records,
            skipped: s.skipped(),
        })
    }

    const CLIENT: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
    const RESOLVER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 53);

    #[test]
    fn single_request() {
        let bytes = capture(|w| {
            w.write_dns(1.5, CLIENT, RESOLVER, 40000, 53, 7, false, 1, "example.com")
                .unwrap()
        });
        let out = parse_bytes(&bytes).unwrap();
        assert_eq!(out.skipped, 0);
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert!(r.is_request);
        assert_eq!(
            (r.qtype, r.domain.as_str(), r.src_host.as_str()),
            (1, "example.com", "10.0.0.1")
        );
        assert_eq!(r.dst_port, 53);
        assert_eq!(r.timestamp, 1.5);
    }

    #[test]
    fn empty_capture() {
        let out = parse_bytes(&capture(|_| {})).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.skipped, 0);
    }

    #[test]
    fn tcp_packet_is_skipped() {
        let bytes = capture(|w| {
            // TCP segment from port 53: 20-byte TCP header, no payload
            let mut tcp = vec![0u8; 20];
            tcp[0..2].copy_from_slice(&53u16.to_be_bytes());
            tcp[2..4].copy_from_slice(&40000u16.to_be_bytes());
            tcp[12] = 0x50;
            w.write_frame(0.5, &ipv4_frame(RESOLVER, CLIENT, 6, &tcp))
                .unwrap();
            w.write_dns(1.0, CLIENT, RESOLVER, 40000, 53, 1, false, 1, "a.com")
                .unwrap();
        });
        let out = parse_bytes(&bytes).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn response_is_attributed_to_client() {
        let bytes = capture(|w| {
            w.write_dns(2.0, RESOLVER, CLIENT, 53, 40000, 9, true, 1, "a.com")
                .unwrap()
        });
        let r = &parse_bytes(&bytes).unwrap().records[0];
        assert!(!r.is_request);
        assert_eq!(r.src_host, "10.0.0.1");
        assert_eq!(r.dst_port, 40000);
    }

    #[test]
    fn big_endian_capture() {
        let mut w = PcapWriter::new(Vec::new(), true).unwrap();
        w.write_dns(
            3.25,
            CLIENT,
            RESOLVER,
            40000,
            53,
            2,
            false,
            1,
            "B.Example.org",
        )
        .unwrap();
        let out = parse_bytes(&w.into_inner()).unwrap();
        assert_eq!(out.records[0].domain, "b.example.org");
        assert_eq!(out.records[0].timestamp, 3.25);
    }

    #[test]
    fn compressed_names_decode() {
        // question "a.b.com" at 12, then a name "x" + pointer to offset 14 ("b.com")
        let mut msg = dns_message(1, true, 1, "a.b.com");
        let second = msg.len();
        msg.extend([1, b'x', 0xc0, 14]);
        let (n1, e1) = decode_name(&msg, 12).unwrap();
        assert_eq!((n1.as_str(), e1), ("a.b.com", 12 + 9));
        let (n2, e2) = decode_name(&msg, second).unwrap();
        assert_eq!((n2.as_str(), e2), ("x.b.com", second + 4));
    }

    #[test]
    fn pointer_loop_is_rejected() {
        let msg = [0u8, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0xc0, 12];
        assert!(decode_name(&msg, 12).is_none());
    }

    #[test]
    fn header_errors() {
        assert!(matches!(
            parse_bytes(&[1, 2, 3, 4, 5]),
            Err(Error::BadMagic(_))
        ));
        assert!(matches!(
            parse_bytes(&[0xd4, 0xc3]),
            Err(Error::TruncatedHeader(2))
        ));
        assert!(matches!(
            parse_bytes(&MAGIC_USEC.to_le_bytes()),
            Err(Error::TruncatedHeader(4))
        ));
    }

    #[test]
    fn truncated_packet_counts_as_skip() {
        let mut bytes = capture(|w| {
            w.write_dns(1.0, CLIENT, RESOLVER, 40000, 53, 1, false, 1, "a.com")
                .unwrap()
        });
        bytes.truncate(bytes.len() - 3);
        let out = parse_bytes(&bytes).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn missing_file() {
        assert!(matches!(
            parse_pcap("/nonexistent/x.pcap"),
            Err(Error::FileNotFound(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(tail in proptest::collection::vec(proptest::num::u8::ANY, 0..600), with_header: bool) {
            let mut bytes = if with_header { capture(|_| {}) } else { Vec::new() };
            bytes.extend(tail);
            match parse_bytes(&bytes) {
                Ok(_) | Err(Error::BadMagic(_)) | Err(Error::TruncatedHeader(_)) | Err(Error::UnsupportedLinkType(_)) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }
}
