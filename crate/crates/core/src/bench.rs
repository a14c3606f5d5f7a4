//! Wall-clock cold start, latency and throughput of training and inference steps.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Batch, DnsGtModel, Head, RunOptions, Targets};
use crate::topology::{pad_aware_full, TopologySet};
use crate::training::Adam;
use crate::vocab::{apply_mlm_mask, MaskingConfig, TokenSequence, NUM_DOMAIN_SPECIALS};
use crate::{Error, Result};

pub const DEFAULT_RUNS: usize = 50;
pub const DEFAULT_SKIP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub batch_size: usize,
    /// Seconds from invocation to the first processed batch.
    pub cold_start: f64,
    /// Mean seconds per batch over all runs, the first included.
    pub mean_latency: f64,
    /// Batches per second after the skipped warm-up batches.
    pub throughput: f64,
    /// Per-run seconds, in order.
    pub latencies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: usize,
    pub skip: usize,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn steady_state_cv(row: &BenchRow, skip: usize) -> f64 {
        let xs = &row.latencies[skip.min(row.latencies.len())..];
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt() / mean
    }
}

fn full_sequences(
    model: &DnsGtModel,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<TokenSequence>, Vec<TopologySet>) {
    let cfg = &model.config;
    let l = cfg.seq_len;
    let mut seqs = Vec::with_capacity(n);
    let mut topos = Vec::with_capacity(n);
    for _ in 0..n {
        let host = rng.random_range(0..cfg.host_vocab);
        let domain_ids: Vec<usize> = (0..l)
            .map(|_| {
                rng.random_range(NUM_DOMAIN_SPECIALS..cfg.domain_vocab.max(NUM_DOMAIN_SPECIALS + 1))
            })
            .collect();
        seqs.push(TokenSequence {
            host_ids: vec![host; l],
            domain_ids,
            len: l,
        });
        topos.push(TopologySet::single(
            pad_aware_full(l, l).expect("len == cap"),
        ));
    }
    (seqs, topos)
}

fn train_step(
    model: &mut DnsGtModel,
    adam: &mut Adam,
    seqs: &[TokenSequence],
    topos: &[TopologySet],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    model.params.zero_grads();
    let mut pass = match model.config.head {
        Head::Mlm => {
            let outs = seqs
                .iter()
                .map(|s| {
                    apply_mlm_mask(s, &MaskingConfig::default(), model.config.domain_vocab, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_masked(&outs, topos)?;
            let targets: Vec<usize> = outs
                .iter()
                .flat_map(|o| o.target_ids.iter().copied())
                .collect();
            let masked: Vec<bool> = outs
                .iter()
                .flat_map(|o| o.masked_positions.iter().copied())
                .collect();
            model.run(
                &batch,
                Targets::Mlm {
                    targets: &targets,
                    masked: &masked,
                },
                RunOptions::train(),
                rng,
            )?
        }
        Head::Binary => {
            let batch = Batch::from_tokens(seqs, topos)?;
            let labels: Vec<Option<f64>> = (0..batch.rows())
                .map(|_| Some(f64::from(rng.random::<bool>())))
                .collect();
            model.run(&batch, Targets::Binary(&labels), RunOptions::train(), rng)?
        }
        Head::HostClass { classes } => {
            let batch = Batch::from_tokens(seqs, topos)?;
            let labels: Vec<usize> = (0..seqs.len())
                .map(|_| rng.random_range(0..classes))
                .collect();
            model.run(
                &batch,
                Targets::HostClass(&labels),
                RunOptions::train(),
                rng,
            )?
        }
    };
    let loss = pass.loss.expect("targets given");
    pass.graph.backward(loss)?;
    model.params.accumulate_grads(&pass.graph, &pass.bound);
    adam.step(&mut model.params);
    Ok(())
}

fn bench_one(
    model: &DnsGtModel,
    mode: BenchMode,
    batch_size: usize,
    runs: usize,
    skip: usize,
    seed: u64,
) -> Result<BenchRow> {
    let mut latencies = Vec::with_capacity(runs);
    let invoked = Instant::now();
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (seqs, topos) = full_sequences(&m, batch_size, &mut rng);
    let mut adam = Adam::new(1e-4, 0.9, 0.999, 1e-8);
    let mut cold_start = 0.0;
    for r in 0..runs {
        let t = Instant::now();
        match mode {
            BenchMode::Train => train_step(&mut m, &mut adam, &seqs, &topos, &mut rng)?,
            BenchMode::Infer => {
                m.forward(&Batch::from_tokens(&seqs, &topos)?, Targets::None, false)?;
            }
        }
        let dt = t.elapsed().as_secs_f64();
        if r == 0 {
            cold_start = invoked.elapsed().as_secs_f64();
            latencies.push(cold_start);
        } else {
            latencies.push(dt);
        }
    }
    let mean_latency = latencies.iter().sum::<f64>() / runs as f64;
    let steady: f64 = latencies[skip..].iter().sum();
    let throughput = (runs - skip) as f64 / steady;
    Ok(BenchRow {
        mode,
        batch_size,
        cold_start,
        mean_latency,
        throughput,
        latencies,
    })
}

/// One row per (batch size, mode), inference first.
pub fn bench(
    model: &DnsGtModel,
    batch_sizes: &[usize],
    runs: usize,
    skip: usize,
    seed: u64,
) -> Result<BenchReport> {
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::BadConfig(
            "batch sizes must be non-empty and >= 1".into(),
        ));
    }
    if runs <= skip {
        return Err(Error::BadConfig(format!(
            "runs ({runs}) must exceed skipped batches ({skip})"
        )));
    }
    let mut rows = Vec::new();
    for &b in batch_sizes {
        for mode in [BenchMode::Infer, BenchMode::Train] {
            rows.push(bench_one(model, mode, b, runs, skip, seed)?);
        }
    }
    Ok(BenchReport { runs, skip, rows })
}

pub fn write_bench_csv<W: std::io::Write>(mut w: W, report: &BenchReport) -> Result<()> {
    writeln!(
        w,
        "mode,batch_size,cold_start_s,mean_latency_s,throughput_batches_per_s"
    )?;
    for r in &report.rows {
        let mode = match r.mode {
            BenchMode::Train => "train",
            BenchMode::Infer => "infer",
        };
        writeln!(
            w,
            "{mode},{},{},{},{}",
            r.batch_size, r.cold_start, r.mean_latency, r.throughput
        )?;
    }
    Ok(())
}
