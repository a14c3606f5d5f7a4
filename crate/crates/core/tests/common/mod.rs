#![allow(dead_code, clippy::needless_range_loop, clippy::type_complexity)]

use dnsgt_core::model::{Batch, DnsGtModel, Targets};
use dnsgt_core::tensor::{compare_gradients, GradCheckReport};
use dnsgt_core::topology::{pad_aware_full, TopologySet};
use dnsgt_core::vocab::{TokenSequence, NUM_DOMAIN_SPECIALS, PAD, UNK_HOST};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random prefix-packed token sequence with real domains and hosts.
pub fn random_sequence(
    rng: &mut ChaCha8Rng,
    cap: usize,
    domain_vocab: usize,
    host_vocab: usize,
) -> TokenSequence {
    let len = rng.random_range(1..=cap);
    let host = rng.random_range(0..host_vocab);
    let mut domain_ids = vec![PAD; cap];
    let mut host_ids = vec![UNK_HOST; cap];
    for i in 0..len {
        domain_ids[i] = rng.random_range(NUM_DOMAIN_SPECIALS..domain_vocab);
        host_ids[i] = host;
    }
    TokenSequence {
        host_ids,
        domain_ids,
        len,
    }
}

pub fn full_topology(seq: &TokenSequence) -> TopologySet {
    TopologySet::single(pad_aware_full(seq.len, seq.capacity()).unwrap())
}

pub fn eval_loss(model: &DnsGtModel, batch: &Batch, targets: Targets<'_>) -> f64 {
    model.forward(batch, targets, false).unwrap().loss.unwrap()
}

/// Analytic parameter gradients of the eval-mode loss against central
/// differences. `stride` > 1 checks every stride-th coordinate only.
pub fn model_grad_check(
    model: &DnsGtModel,
    batch: &Batch,
    targets: Targets<'_>,
    h: f64,
    stride: usize,
    tol: f64,
) -> GradCheckReport {
    model_grad_check_params(model, batch, targets, h, stride, tol, |_| true)
}

/// As [`model_grad_check`], restricted to parameters whose name passes `keep`.
pub fn model_grad_check_params(
    model: &DnsGtModel,
    batch: &Batch,
    targets: Targets<'_>,
    h: f64,
    stride: usize,
    tol: f64,
    keep: impl Fn(&str) -> bool,
) -> GradCheckReport {
    let mut pass = model
        .run(batch, targets, Default::default(), &mut seeded(0))
        .unwrap();
    let loss = pass.loss.unwrap();
    pass.graph.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model.clone();
    let mut k = 0usize;
    for (pi, p) in model.params.iter().enumerate() {
        if !keep(&p.name) {
            continue;
        }
        let grad = pass
            .graph
            .grad(pass.bound.var(pi))
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        for i in 0..p.value.numel() {
            k += 1;
            if !k.is_multiple_of(stride) {
                continue;
            }
            let name = p.name.clone();
            let orig = p.value.data()[i];
            probe.params.get_mut(&name).unwrap().value.data_mut()[i] = orig + h;
            let up = eval_loss(&probe, batch, targets);
            probe.params.get_mut(&name).unwrap().value.data_mut()[i] = orig - h;
            let down = eval_loss(&probe, batch, targets);
            probe.params.get_mut(&name).unwrap().value.data_mut()[i] = orig;
            analytic.push(grad[i]);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    compare_gradients(analytic, numeric, tol)
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use dnsgt_core::ingest::{clean_pipeline, filter_hosts, CleanConfig, HostFilter};
use dnsgt_core::model::ModelConfig;
use dnsgt_core::sequencer::{sequence_stream, RawSequence, SequencingConfig};
use dnsgt_core::synth::{generate, SynthConfig, SynthOutput};
use dnsgt_core::training::Corpus;
use dnsgt_core::vocab::Vocabulary;

/// Synthetic traffic pushed through ingest filters and density sequencing.
pub struct SynthPipeline {
    pub out: SynthOutput,
    pub raw: Vec<RawSequence>,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub corpus: Corpus,
}

pub fn synth_pipeline(cfg: &SynthConfig, model: ModelConfig, max_domains: usize) -> SynthPipeline {
    let out = generate(cfg).unwrap();
    let (kept, _) = filter_hosts(&out.records, &HostFilter::default());
    let streams = clean_pipeline(&out.records, &kept, &CleanConfig::default());
    let seq_cfg = SequencingConfig {
        max_len: model.seq_len,
        ..SequencingConfig::default()
    };
    let raw: Vec<RawSequence> = streams
        .values()
        .flat_map(|s| sequence_stream(s, &seq_cfg))
        .collect();
    let vocab = Vocabulary::build(&raw, max_domains).unwrap();
    let model = model.with_vocab(&vocab);
    let corpus = Corpus::build(&raw, &vocab, &model).unwrap();
    SynthPipeline {
        out,
        raw,
        vocab,
        model,
        corpus,
    }
}

use dnsgt_core::ingest::PcapWriter;
use std::net::Ipv4Addr;

const RESOLVER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 53);

/// Ten packets: requests and responses from two clients, one AAAA, one mDNS.
pub fn pcap_fixture(big_endian: bool) -> Vec<u8> {
    let a = Ipv4Addr::new(10, 0, 0, 1);
    let b = Ipv4Addr::new(10, 0, 0, 2);
    let mut w = PcapWriter::new(Vec::new(), big_endian).unwrap();
    let packets: [(f64, Ipv4Addr, Ipv4Addr, u16, u16, u16, bool, u16, &str); 10] = [
        (1.25, a, RESOLVER, 40001, 53, 1, false, 1, "Example.COM."),
        (1.5, RESOLVER, a, 53, 40001, 1, true, 1, "example.com"),
        (2.0, b, RESOLVER, 40002, 53, 2, false, 1, "mail.corp.org"),
        (
            2.000_250,
            RESOLVER,
            b,
            53,
            40002,
            2,
            true,
            1,
            "mail.corp.org",
        ),
        (
            3.75,
            a,
            RESOLVER,
            40003,
            53,
            3,
            false,
            28,
            "ipv6.example.com",
        ),
        (3.8, RESOLVER, a, 53, 40003, 3, true, 28, "ipv6.example.com"),
        (4.0, b, RESOLVER, 40004, 53, 4, false, 1, "cdn.shop.net"),
        (
            4.5,
            a,
            Ipv4Addr::new(224, 0, 0, 251),
            5353,
            5353,
            0,
            false,
            1,
            "printer.local",
        ),
        (5.125, RESOLVER, b, 53, 40004, 4, true, 1, "cdn.shop.net"),
        (
            1_600_000_000.5,
            a,
            RESOLVER,
            40005,
            53,
            5,
            false,
            1,
            "late.example.com",
        ),
    ];
    for (ts, src, dst, sp, dp, txn, resp, qtype, name) in packets {
        w.write_dns(ts, src, dst, sp, dp, txn, resp, qtype, name)
            .unwrap();
    }
    w.into_inner()
}
