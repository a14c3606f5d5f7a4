//! The graph-transformer encoder: merged host/domain embeddings, stacked
//! masked multi-head attention blocks with post-norm residuals, and the MLM,
//! per-token binary and host-class heads.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointFile, Entry};
use crate::tensor::{BatchStats, Bound, Graph, NormStats, ParamSet, Tensor, Var};
use crate::topology::{TopologyKind, TopologySet};
use crate::vocab::{MaskingOutcome, TokenSequence, Vocabulary, MASK, NUM_DOMAIN_SPECIALS, PAD};
use crate::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Mlm,
    Binary,
    HostClass { classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width N.
    pub dim: usize,
    /// Sequence capacity L.
    pub seq_len: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Weight of the domain embedding in the merge.
    pub omega: f64,
    pub dropout_embed: f64,
    pub dropout_finetune: f64,
    /// Domain vocabulary size including specials.
    pub domain_vocab: usize,
    /// Host vocabulary size including specials.
    pub host_vocab: usize,
    pub topologies: Vec<TopologyKind>,
    /// When false the attention branch is dropped and only the residual path remains.
    pub attention: bool,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            seq_len: 32,
            blocks: 8,
            heads: 8,
            omega: 1.0,
            dropout_embed: 0.15,
            dropout_finetune: 0.2,
            domain_vocab: 30_000 + NUM_DOMAIN_SPECIALS,
            host_vocab: 1,
            topologies: vec![TopologyKind::PadFull],
            attention: true,
            head: Head::Mlm,
        }
    }
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self::default()
    }

    pub fn tiny() -> Self {
        Self {
            dim: 32,
            seq_len: 8,
            blocks: 2,
            heads: 2,
            domain_vocab: 50 + NUM_DOMAIN_SPECIALS,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::BadConfig(format!(
                "unknown preset '{other}' (expected tiny or paper)"
            ))),
        }
    }

    /// Sizes the embedding tables to a vocabulary.
    pub fn with_vocab(mut self, vocab: &Vocabulary) -> Self {
        self.domain_vocab = vocab.domain_vocab_size();
        self.host_vocab = vocab.host_vocab_size();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::BadModelConfig(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.seq_len == 0 {
            return bad("seq_len must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return bad(format!("omega {} outside [0, 1]", self.omega));
        }
        for (n, r) in [
            ("dropout_embed", self.dropout_embed),
            ("dropout_finetune", self.dropout_finetune),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{n} {r} outside [0, 1)"));
            }
        }
        if self.domain_vocab < NUM_DOMAIN_SPECIALS || self.host_vocab == 0 {
            return bad("vocabulary sizes too small".into());
        }
        if self.topologies.is_empty() {
            return bad("at least one topology is required".into());
        }
        if let Head::HostClass { classes: 0 } = self.head {
            return bad("host-class head needs >= 1 class".into());
        }
        Ok(())
    }
}

/// Inputs for one forward pass: B sequences of capacity L with their
/// attention masks (one B×L×L mask per topology slot).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub host_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
    masks: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(items: &[(&[usize], &[usize], &TopologySet)]) -> Result<Self> {
        let first = items.first().ok_or(Error::EmptyCorpus)?;
        let len = first.1.len();
        let slots = first.2.len();
        let mut host_ids = Vec::with_capacity(items.len() * len);
        let mut domain_ids = Vec::with_capacity(items.len() * len);
        let mut masks = vec![Vec::with_capacity(items.len() * len * len); slots];
        for (hosts, domains, topo) in items {
            if hosts.len() != len
                || domains.len() != len
                || topo.size() != len
                || topo.len() != slots
            {
                return Err(Error::ShapeMismatch {
                    op: "batch",
                    detail: format!(
                        "item of length {} / topology {}x{} in a batch of length {len}",
                        domains.len(),
                        topo.len(),
                        topo.size()
                    ),
                });
            }
            host_ids.extend_from_slice(hosts);
            domain_ids.extend_from_slice(domains);
            for (m, a) in masks.iter_mut().zip(topo.matrices()) {
                m.extend(a.as_mask());
            }
        }
        Ok(Self {
            size: items.len(),
            len,
            host_ids,
            domain_ids,
            masks,
        })
    }

    pub fn from_tokens(seqs: &[TokenSequence], topos: &[TopologySet]) -> Result<Self> {
        let items: Vec<_> = seqs
            .iter()
            .zip(topos)
            .map(|(s, t)| (&s.host_ids[..], &s.domain_ids[..], t))
            .collect();
        Self::new(&items)
    }

    pub fn from_masked(outcomes: &[MaskingOutcome], topos: &[TopologySet]) -> Result<Self> {
        let items: Vec<_> = outcomes
            .iter()
            .zip(topos)
            .map(|(o, t)| (&o.host_ids[..], &o.input_ids[..], t))
            .collect();
        Self::new(&items)
    }

    pub fn rows(&self) -> usize {
        self.size * self.len
    }

    pub fn non_pad(&self) -> Vec<bool> {
        self.domain_ids.iter().map(|&d| d != PAD).collect()
    }

    pub fn topology_slots(&self) -> usize {
        self.masks.len()
    }
}

/// Training targets matching the configured head.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    None,
    /// Per-row target ids and the selected (masked) rows.
    Mlm {
        targets: &'a [usize],
        masked: &'a [bool],
    },
    /// Per-row labels; None rows are excluded from the loss.
    Binary(&'a [Option<f64>]),
    /// One class per sequence.
    HostClass(&'a [usize]),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub train: bool,
    pub capture_attention: bool,
}

impl RunOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train() -> Self {
        Self {
            train: true,
            capture_attention: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub block: usize,
    pub head: usize,
    pub topology: usize,
    /// B×L×L attention weights.
    pub weights: Tensor,
}

/// The recorded graph of one forward pass.
pub struct Pass {
    pub graph: Graph,
    pub bound: Bound,
    /// [B·L, N] final token states.
    pub states: Var,
    pub logits: Var,
    pub loss: Option<Var>,
    /// Rows of `states` the MLM logits were computed for.
    pub logit_rows: Vec<usize>,
    pub bn_stats: Option<(Vec<f64>, Vec<f64>)>,
    pub attention: Vec<AttentionMap>,
}

impl Pass {
    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.graph.value(l).item())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// B×L×N
    pub token_states: Tensor,
    pub logits: Tensor,
    pub attention: Vec<AttentionMap>,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPrediction {
    pub position: usize,
    /// (domain id, probability), descending.
    pub candidates: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DnsGtModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub bn_running_mean: Vec<f64>,
    pub bn_running_var: Vec<f64>,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(
        &[fan_in, fan_out],
        (6.0 / (fan_in + fan_out) as f64).sqrt(),
        rng,
    )
}

impl DnsGtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = config.dim;
        let d = n / config.heads;
        let mut p = ParamSet::new();
        p.add(
            "embed.host",
            Tensor::randn(&[config.host_vocab, n], EMBED_INIT_STD, &mut rng),
        );
        p.add(
            "embed.domain",
            Tensor::randn(&[config.domain_vocab, n], EMBED_INIT_STD, &mut rng),
        );
        p.add("bn.gamma", Tensor::full(&[n], 1.0));
        p.add("bn.beta", Tensor::zeros(&[n]));
        for b in 0..config.blocks {
            for h in 0..config.heads {
                for w in ["q", "k", "v"] {
                    p.add(&format!("block{b}.head{h}.{w}"), xavier(n, d, &mut rng));
                }
            }
            p.add(&format!("block{b}.wo"), xavier(n, n, &mut rng));
            p.add(&format!("block{b}.ln1.gain"), Tensor::full(&[n], 1.0));
            p.add(&format!("block{b}.ln1.bias"), Tensor::zeros(&[n]));
            p.add(&format!("block{b}.ffn.w1"), xavier(n, n, &mut rng));
            p.add(&format!("block{b}.ffn.b1"), Tensor::zeros(&[n]));
            p.add(&format!("block{b}.ffn.w2"), xavier(n, 4 * n, &mut rng));
            p.add(&format!("block{b}.ffn.b2"), Tensor::zeros(&[4 * n]));
            p.add(&format!("block{b}.ffn.w3"), xavier(4 * n, n, &mut rng));
            p.add(&format!("block{b}.ffn.b3"), Tensor::zeros(&[n]));
            p.add(&format!("block{b}.ln2.gain"), Tensor::full(&[n], 1.0));
            p.add(&format!("block{b}.ln2.bias"), Tensor::zeros(&[n]));
        }
        let mut model = Self {
            config,
            params: p,
            bn_running_mean: vec![0.0; n],
            bn_running_var: vec![1.0; n],
        };
        let head = model.config.head;
        model.add_head(head, &mut rng);
        Ok(model)
    }

    fn add_head(&mut self, head: Head, rng: &mut ChaCha8Rng) {
        let n = self.config.dim;
        let (name, out) = match head {
            Head::Mlm => ("mlm", self.config.domain_vocab),
            Head::Binary => ("binary", 1),
            Head::HostClass { classes } => ("host", classes),
        };
        self.params
            .add(&format!("head.{name}.w"), xavier(n, out, rng));
        self.params
            .add(&format!("head.{name}.b"), Tensor::zeros(&[out]));
        self.config.head = head;
    }

    /// Drops the current output head and attaches a freshly initialized one.
    pub fn swap_head(&mut self, head: Head, seed: u64) -> Result<()> {
        if let Head::HostClass { classes: 0 } = head {
            return Err(Error::BadModelConfig(
                "host-class head needs >= 1 class".into(),
            ));
        }
        self.params.remove_prefix("head.");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.add_head(head, &mut rng);
        Ok(())
    }

    /// Rounds parameters and running statistics to checkpoint precision.
    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
        for v in self
            .bn_running_mean
            .iter_mut()
            .chain(self.bn_running_var.iter_mut())
        {
            *v = f64::from(*v as f32);
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.var(
            self.params
                .id(name)
                .unwrap_or_else(|| panic!("parameter {name} missing")),
        )
    }

    /// Adjacency set for a tokenized (prefix-packed) sequence under the configured topologies.
    pub fn topology_for(&self, seq: &TokenSequence, vocab: &Vocabulary) -> Result<TopologySet> {
        let names: Vec<&str> = seq.domain_ids[..seq.len]
            .iter()
            .map(|&id| vocab.domain(id).unwrap_or(""))
            .collect();
        TopologySet::build(&self.config.topologies, &names, seq.capacity())
    }

    /// Folds batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &(Vec<f64>, Vec<f64>)) {
        for (r, b) in self.bn_running_mean.iter_mut().zip(&stats.0) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.bn_running_var.iter_mut().zip(&stats.1) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }

    fn check_ids(&self, batch: &Batch) -> Result<()> {
        if batch.len != self.config.seq_len {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "batch length {} for a model of length {}",
                    batch.len, self.config.seq_len
                ),
            });
        }
        if batch.topology_slots() != self.config.topologies.len() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "{} topology masks for {} configured",
                    batch.topology_slots(),
                    self.config.topologies.len()
                ),
            });
        }
        if let Some(&id) = batch
            .domain_ids
            .iter()
            .find(|&&id| id >= self.config.domain_vocab)
        {
            return Err(Error::IdOutOfRange {
                kind: "domain",
                id,
                size: self.config.domain_vocab,
            });
        }
        if let Some(&id) = batch
            .host_ids
            .iter()
            .find(|&&id| id >= self.config.host_vocab)
        {
            return Err(Error::IdOutOfRange {
                kind: "host",
                id,
                size: self.config.host_vocab,
            });
        }
        Ok(())
    }

    fn merge_raw(&self, g: &mut Graph, bound: &Bound, batch: &Batch) -> Result<Var> {
        let omega = self.config.omega;
        Ok(if omega == 1.0 {
            g.embedding_gather(self.var(bound, "embed.domain"), &batch.domain_ids)?
        } else if omega == 0.0 {
            g.embedding_gather(self.var(bound, "embed.host"), &batch.host_ids)?
        } else {
            let ed = g.embedding_gather(self.var(bound, "embed.domain"), &batch.domain_ids)?;
            let eh = g.embedding_gather(self.var(bound, "embed.host"), &batch.host_ids)?;
            let ed = g.scale(ed, omega)?;
            let eh = g.scale(eh, 1.0 - omega)?;
            g.add(ed, eh)?
        })
    }

    /// ω-weighted embedding merge before dropout and batch-norm, [B·L, N].
    pub fn merge_embeddings(&self, batch: &Batch) -> Result<Tensor> {
        self.check_ids(batch)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let v = self.merge_raw(&mut g, &bound, batch)?;
        Ok(g.value(v).clone())
    }

    fn merge<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &Batch,
        train: bool,
        rng: &mut R,
    ) -> Result<(Var, Option<BatchStats>)> {
        let merged = self.merge_raw(g, bound, batch)?;
        let x = g.dropout(merged, self.config.dropout_embed, train, rng)?;
        let stats = if train {
            NormStats::Batch
        } else {
            NormStats::Frozen {
                mean: &self.bn_running_mean,
                var: &self.bn_running_var,
            }
        };
        let (gamma, beta) = (self.var(bound, "bn.gamma"), self.var(bound, "bn.beta"));
        g.batch_norm(x, gamma, beta, &batch.non_pad(), stats)
    }

    fn linear(&self, g: &mut Graph, bound: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = g.matmul(x, self.var(bound, w))?;
        g.add(y, self.var(bound, b))
    }

    fn block(
        &self,
        g: &mut Graph,
        bound: &Bound,
        b: usize,
        x: Var,
        batch: &Batch,
        capture: Option<&mut Vec<AttentionMap>>,
    ) -> Result<Var> {
        let n = self.config.dim;
        let d = n / self.config.heads;
        let shape3 = [batch.size, batch.len, d];
        let h = if self.config.attention {
            let mut qkv = Vec::with_capacity(self.config.heads);
            for i in 0..self.config.heads {
                let mut proj = |w: &str| -> Result<Var> {
                    let y = g.matmul(x, self.var(bound, &format!("block{b}.head{i}.{w}")))?;
                    g.reshape(y, &shape3)
                };
                qkv.push((proj("q")?, proj("k")?, proj("v")?));
            }
            let scale = 1.0 / (d as f64).sqrt();
            let mut capture = capture;
            let mut total: Option<Var> = None;
            for (t, mask) in batch.masks.iter().enumerate() {
                let mut outs = Vec::with_capacity(qkv.len());
                for (i, &(q, k, v)) in qkv.iter().enumerate() {
                    let s = g.batch_matmul(q, k, true)?;
                    let s = g.scale(s, scale)?;
                    let p = g.masked_softmax_rows(s, mask)?;
                    if let Some(c) = capture.as_deref_mut() {
                        c.push(AttentionMap {
                            block: b,
                            head: i,
                            topology: t,
                            weights: g.value(p).clone(),
                        });
                    }
                    outs.push(g.batch_matmul(p, v, false)?);
                }
                let cat = g.concat_last_axis(&outs)?;
                let cat = g.reshape(cat, &[batch.rows(), n])?;
                let proj = g.matmul(cat, self.var(bound, &format!("block{b}.wo")))?;
                total = Some(match total {
                    None => proj,
                    Some(acc) => g.add(acc, proj)?,
                });
            }
            g.add(x, total.expect("at least one topology"))?
        } else {
            x
        };
        let h = g.layer_norm_rows(
            h,
            self.var(bound, &format!("block{b}.ln1.gain")),
            self.var(bound, &format!("block{b}.ln1.bias")),
        )?;
        let f = self.linear(
            g,
            bound,
            h,
            &format!("block{b}.ffn.w1"),
            &format!("block{b}.ffn.b1"),
        )?;
        let f = self.linear(
            g,
            bound,
            f,
            &format!("block{b}.ffn.w2"),
            &format!("block{b}.ffn.b2"),
        )?;
        let f = g.relu(f)?;
        let f = self.linear(
            g,
            bound,
            f,
            &format!("block{b}.ffn.w3"),
            &format!("block{b}.ffn.b3"),
        )?;
        let out = g.add(h, f)?;
        g.layer_norm_rows(
            out,
            self.var(bound, &format!("block{b}.ln2.gain")),
            self.var(bound, &format!("block{b}.ln2.bias")),
        )
    }

    /// Builds the full forward graph (encoder, head and optional loss).
    pub fn run<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        targets: Targets<'_>,
        opts: RunOptions,
        rng: &mut R,
    ) -> Result<Pass> {
        self.check_ids(batch)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let (mut x, bn_stats) = self.merge(&mut g, &bound, batch, opts.train, rng)?;
        let mut attention = Vec::new();
        for b in 0..self.config.blocks {
            let cap = opts.capture_attention.then_some(&mut attention);
            x = self.block(&mut g, &bound, b, x, batch, cap)?;
        }
        let states = x;
        let rows = batch.rows();
        let (logits, loss, logit_rows) = match (self.config.head, targets) {
            (Head::Mlm, Targets::Mlm { targets, masked }) => {
                if targets.len() != rows || masked.len() != rows {
                    return Err(Error::ShapeMismatch {
                        op: "mlm targets",
                        detail: format!("{} targets for {rows} rows", targets.len()),
                    });
                }
                let sel: Vec<usize> = (0..rows).filter(|&r| masked[r]).collect();
                if sel.is_empty() {
                    return Err(Error::NoMaskedPositions);
                }
                let picked = g.select_rows(states, &sel)?;
                let logits = self.linear(&mut g, &bound, picked, "head.mlm.w", "head.mlm.b")?;
                let pairs: Vec<(usize, usize)> = sel
                    .iter()
                    .enumerate()
                    .map(|(k, &r)| (k, targets[r]))
                    .collect();
                let loss = g.cross_entropy(logits, &pairs)?;
                (logits, Some(loss), sel)
            }
            (Head::Mlm, Targets::None) => {
                let all: Vec<usize> = (0..rows).collect();
                (
                    self.linear(&mut g, &bound, states, "head.mlm.w", "head.mlm.b")?,
                    None,
                    all,
                )
            }
            (Head::Binary, t @ (Targets::Binary(_) | Targets::None)) => {
                let h = g.dropout(states, self.config.dropout_finetune, opts.train, rng)?;
                let logits = self.linear(&mut g, &bound, h, "head.binary.w", "head.binary.b")?;
                let loss = match t {
                    Targets::Binary(labels) => {
                        if labels.len() != rows {
                            return Err(Error::MissingLabels(format!(
                                "{} labels for {rows} rows",
                                labels.len()
                            )));
                        }
                        let pad = batch.non_pad();
                        let pairs: Vec<(usize, f64)> = labels
                            .iter()
                            .enumerate()
                            .filter(|(r, _)| pad[*r])
                            .filter_map(|(r, y)| y.map(|y| (r, y)))
                            .collect();
                        if pairs.is_empty() {
                            return Err(Error::MissingLabels(
                                "no labeled non-PAD position in batch".into(),
                            ));
                        }
                        Some(g.binary_cross_entropy(logits, &pairs)?)
                    }
                    _ => None,
                };
                (logits, loss, Vec::new())
            }
            (Head::HostClass { classes }, t @ (Targets::HostClass(_) | Targets::None)) => {
                let groups = sequence_groups(batch)?;
                let pooled = g.mean_pool_rows(states, &groups)?;
                let pooled = g.dropout(pooled, self.config.dropout_finetune, opts.train, rng)?;
                let logits = self.linear(&mut g, &bound, pooled, "head.host.w", "head.host.b")?;
                let loss = match t {
                    Targets::HostClass(labels) => {
                        if labels.len() != batch.size {
                            return Err(Error::MissingLabels(format!(
                                "{} labels for {} sequences",
                                labels.len(),
                                batch.size
                            )));
                        }
                        if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
                            return Err(Error::IdOutOfRange {
                                kind: "class",
                                id: c,
                                size: classes,
                            });
                        }
                        let pairs: Vec<(usize, usize)> =
                            labels.iter().copied().enumerate().collect();
                        Some(g.cross_entropy(logits, &pairs)?)
                    }
                    _ => None,
                };
                (logits, loss, Vec::new())
            }
            (Head::Mlm, _) => return Err(Error::WrongHead("mlm")),
            (Head::Binary, _) => return Err(Error::WrongHead("binary")),
            (Head::HostClass { .. }, _) => return Err(Error::WrongHead("host_class")),
        };
        Ok(Pass {
            graph: g,
            bound,
            states,
            logits,
            loss,
            logit_rows,
            bn_stats,
            attention,
        })
    }

    fn output(&self, pass: &Pass, batch: &Batch) -> ForwardOutput {
        let states = pass.graph.value(pass.states).clone();
        let token_states = Tensor::new(
            vec![batch.size, batch.len, self.config.dim],
            states.into_data(),
        )
        .expect("state shape");
        ForwardOutput {
            token_states,
            logits: pass.graph.value(pass.logits).clone(),
            attention: pass.attention.clone(),
            loss: pass.loss_value(),
        }
    }

    /// Eval-mode forward.
    pub fn forward(
        &self,
        batch: &Batch,
        targets: Targets<'_>,
        capture_attention: bool,
    ) -> Result<ForwardOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.run(
            batch,
            targets,
            RunOptions {
                train: false,
                capture_attention,
            },
            &mut rng,
        )?;
        Ok(self.output(&pass, batch))
    }

    /// MLM loss over masked positions (eval mode); logits are rows of the masked positions.
    pub fn forward_mlm(
        &self,
        outcomes: &[MaskingOutcome],
        topos: &[TopologySet],
    ) -> Result<ForwardOutput> {
        let batch = Batch::from_masked(outcomes, topos)?;
        let targets: Vec<usize> = outcomes
            .iter()
            .flat_map(|o| o.target_ids.iter().copied())
            .collect();
        let masked: Vec<bool> = outcomes
            .iter()
            .flat_map(|o| o.masked_positions.iter().copied())
            .collect();
        self.forward(
            &batch,
            Targets::Mlm {
                targets: &targets,
                masked: &masked,
            },
            false,
        )
    }

    /// Per-token probabilities (B×L) and BCE over labeled non-PAD positions.
    pub fn forward_binary(
        &self,
        seqs: &[TokenSequence],
        topos: &[TopologySet],
        labels: Option<&[Option<f64>]>,
    ) -> Result<(Vec<Vec<f64>>, Option<f64>)> {
        if self.config.head != Head::Binary {
            return Err(Error::WrongHead("binary"));
        }
        let batch = Batch::from_tokens(seqs, topos)?;
        let out = self.forward(&batch, labels.map_or(Targets::None, Targets::Binary), false)?;
        let probs = out
            .logits
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect::<Vec<_>>();
        Ok((
            probs.chunks(batch.len).map(<[f64]>::to_vec).collect(),
            out.loss,
        ))
    }

    /// Per-sequence class probabilities and cross-entropy against host labels.
    pub fn forward_hostclass(
        &self,
        seqs: &[TokenSequence],
        topos: &[TopologySet],
        labels: Option<&[usize]>,
    ) -> Result<(Vec<Vec<f64>>, Option<f64>)> {
        if !matches!(self.config.head, Head::HostClass { .. }) {
            return Err(Error::WrongHead("host_class"));
        }
        let batch = Batch::from_tokens(seqs, topos)?;
        let out = self.forward(
            &batch,
            labels.map_or(Targets::None, Targets::HostClass),
            false,
        )?;
        let probs = (0..batch.size)
            .map(|b| softmax(out.logits.row(b)))
            .collect();
        Ok((probs, out.loss))
    }

    /// Top-k real-domain candidates at every MASK position.
    pub fn predict_masked(
        &self,
        seq: &TokenSequence,
        topo: &TopologySet,
        k: usize,
    ) -> Result<Vec<MaskedPrediction>> {
        if self.config.head != Head::Mlm {
            return Err(Error::WrongHead("mlm"));
        }
        let positions: Vec<usize> = (0..seq.capacity())
            .filter(|&i| seq.domain_ids[i] == MASK)
            .collect();
        if positions.is_empty() {
            return Err(Error::NoMaskPresent);
        }
        let batch = Batch::from_tokens(std::slice::from_ref(seq), std::slice::from_ref(topo))?;
        let out = self.forward(&batch, Targets::None, false)?;
        let k = k.min(self.config.domain_vocab - NUM_DOMAIN_SPECIALS);
        Ok(positions
            .into_iter()
            .map(|pos| {
                let probs = softmax(out.logits.row(pos));
                let mut cands: Vec<(usize, f64)> = probs
                    .into_iter()
                    .enumerate()
                    .skip(NUM_DOMAIN_SPECIALS)
                    .collect();
                cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                cands.truncate(k);
                MaskedPrediction {
                    position: pos,
                    candidates: cands,
                }
            })
            .collect())
    }

    /// Domain-table rows for every real domain, in vocabulary order.
    pub fn export_embeddings(&self, vocab: &Vocabulary) -> Vec<(String, Vec<f64>)> {
        let table = &self.params.get("embed.domain").expect("domain table").value;
        vocab
            .real_domain_ids()
            .filter_map(|id| Some((vocab.domain(id)?.to_string(), table.row(id).to_vec())))
            .collect()
    }

    pub fn checkpoint(&self, vocab_hash: &str) -> Result<CheckpointFile> {
        let mut entries: Vec<Entry> = self
            .params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        let n = self.config.dim;
        for (name, v) in [
            ("bn.running_mean", &self.bn_running_mean),
            ("bn.running_var", &self.bn_running_var),
        ] {
            entries.push(Entry {
                name: name.into(),
                shape: vec![n],
                data: v.iter().map(|&x| x as f32).collect(),
            });
        }
        Ok(CheckpointFile {
            config_json: serde_json::to_string(&self.config)?,
            vocab_hash: vocab_hash.to_string(),
            entries,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P, vocab_hash: &str) -> Result<()> {
        self.checkpoint(vocab_hash)?.save(path)
    }

    /// Rebuilds a model from a checkpoint, validating every shape against its config.
    pub fn from_checkpoint(ck: &CheckpointFile) -> Result<Self> {
        let config: ModelConfig = serde_json::from_str(&ck.config_json)?;
        let mut model = Self::new(config, 0)?;
        let expected = model.params.len() + 2;
        if ck.entries.len() != expected {
            return Err(Error::BadCheckpoint(format!(
                "{} entries, config implies {expected}",
                ck.entries.len()
            )));
        }
        for p in model.params.iter_mut() {
            let e = ck
                .entry(&p.name)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing parameter {}", p.name)))?;
            if e.shape != p.value.shape() {
                return Err(Error::BadCheckpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    p.name,
                    e.shape,
                    p.value.shape()
                )));
            }
            p.value
                .data_mut()
                .iter_mut()
                .zip(&e.data)
                .for_each(|(d, &s)| *d = f64::from(s));
        }
        let n = model.config.dim;
        for (name, dst) in [
            ("bn.running_mean", &mut model.bn_running_mean),
            ("bn.running_var", &mut model.bn_running_var),
        ] {
            let e = ck
                .entry(name)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing {name}")))?;
            if e.shape != [n] {
                return Err(Error::BadCheckpoint(format!("{name}: shape {:?}", e.shape)));
            }
            *dst = e.data.iter().map(|&v| f64::from(v)).collect();
        }
        if let Some(bad) = model
            .params
            .iter()
            .find(|p| p.value.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::BadCheckpoint(format!(
                "non-finite values in {}",
                bad.name
            )));
        }
        Ok(model)
    }

    /// Loads a checkpoint and returns it with the stored vocabulary hash.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<(Self, String)> {
        let ck = CheckpointFile::load(path)?;
        Ok((Self::from_checkpoint(&ck)?, ck.vocab_hash))
    }
}

/// Non-PAD rows of each sequence in a batch.
fn sequence_groups(batch: &Batch) -> Result<Vec<Vec<usize>>> {
    (0..batch.size)
        .map(|b| {
            let rows: Vec<usize> = (b * batch.len..(b + 1) * batch.len)
                .filter(|&r| batch.domain_ids[r] != PAD)
                .collect();
            if rows.is_empty() {
                Err(Error::EmptySequence)
            } else {
                Ok(rows)
            }
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Host-level prediction: mean of the sequence probability vectors and its
/// argmax (lowest class on ties).
pub fn host_prediction(seq_probs: &[Vec<f64>]) -> Option<(Vec<f64>, usize)> {
    let first = seq_probs.first()?;
    let mut mean = vec![0.0; first.len()];
    for p in seq_probs {
        mean.iter_mut().zip(p).for_each(|(m, v)| *m += v);
    }
    let inv = 1.0 / seq_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let class = argmax(&mean);
    Some((mean, class))
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn write_embeddings_jsonl<W: Write>(mut w: W, rows: &[(String, Vec<f64>)]) -> Result<()> {
    #[derive(Serialize)]
    struct Rec<'a> {
        domain: &'a str,
        vector: &'a [f64],
    }
    for (domain, vector) in rows {
        serde_json::to_writer(&mut w, &Rec { domain, vector })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Header u32 count, u32 width; then f32 rows in the order given.
pub fn write_embeddings_bin<W: Write>(mut w: W, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let width = rows.first().map_or(0, |r| r.1.len());
    w.write_all(&(rows.len() as u32).to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    for (_, v) in rows {
        for &x in v {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}
