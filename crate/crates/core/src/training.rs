//! Optimization loops, data splits and the pipeline configuration file.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{W2vHead, W2vModel};
use crate::model::{Batch, DnsGtModel, Head, ModelConfig, RunOptions, Targets};
use crate::sequencer::SequencingConfig;
use crate::tensor::ParamSet;
use crate::topology::TopologySet;
use crate::vocab::{apply_mlm_mask, MaskingConfig, TokenSequence, Vocabulary, NUM_DOMAIN_SPECIALS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint interval in steps (0 disables).
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Global gradient-norm clip; None disables.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 256,
            max_steps: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 0,
            checkpoint_path: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::BadTrainConfig(format!(
                "lr {} must be finite and >= 0",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::BadTrainConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::BadTrainConfig(
                "Adam betas must lie in [0, 1) and eps > 0".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::BadTrainConfig("clip_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data().to_vec();
            for (i, g) in grad.into_iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Seeded epoch shuffler yielding batches of indices.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n).max(1),
        }
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Domain ids that contributed at least one supervised loss term.
    pub labeled_domains: BTreeSet<usize>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss")?;
        for (i, l) in self.losses.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1)?;
        }
        Ok(())
    }
}

/// Models trained by the shared loop.
pub trait Trainable {
    fn params_mut(&mut self) -> &mut ParamSet;
    fn snapshot(&self, path: &std::path::Path, vocab_hash: &str) -> Result<()>;
}

impl Trainable for DnsGtModel {
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn snapshot(&self, path: &std::path::Path, vocab_hash: &str) -> Result<()> {
        self.save(path, vocab_hash)
    }
}

impl Trainable for W2vModel {
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn snapshot(&self, path: &std::path::Path, vocab_hash: &str) -> Result<()> {
        self.save(path, vocab_hash)
    }
}

/// Runs `cfg.max_steps` optimizer steps. `step` accumulates gradients for one
/// batch into the model parameters and returns the batch loss.
pub fn train_loop<M, F>(
    model: &mut M,
    n_items: usize,
    cfg: &TrainConfig,
    vocab_hash: &str,
    mut step: F,
) -> Result<Vec<f64>>
where
    M: Trainable,
    F: FnMut(&mut M, &[usize], &mut ChaCha8Rng) -> Result<f64>,
{
    cfg.validate()?;
    if n_items == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(n_items, cfg.batch_size);
    let mut adam = Adam::from_config(cfg);
    let mut losses = Vec::with_capacity(cfg.max_steps);
    for s in 1..=cfg.max_steps {
        let idx = sampler.next(&mut rng);
        model.params_mut().zero_grads();
        let loss = match step(model, &idx, &mut rng) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::NonFiniteDetected { .. }) => {
                return Err(Error::NonFiniteLoss { step: s })
            }
            Err(e) => return Err(e),
        };
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(model.params_mut(), c);
        }
        adam.step(model.params_mut());
        losses.push(loss);
        if let Some(path) = &cfg.checkpoint_path {
            if cfg.eval_every > 0 && s % cfg.eval_every == 0 {
                model.snapshot(path, vocab_hash)?;
            }
        }
    }
    Ok(losses)
}

/// Tokenized corpus with per-sequence adjacency sets.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub seqs: Vec<TokenSequence>,
    pub topos: Vec<TopologySet>,
}

impl Corpus {
    pub fn new(seqs: Vec<TokenSequence>, topos: Vec<TopologySet>) -> Result<Self> {
        if seqs.len() != topos.len() {
            return Err(Error::ShapeMismatch {
                op: "corpus",
                detail: format!("{} sequences, {} topologies", seqs.len(), topos.len()),
            });
        }
        Ok(Self { seqs, topos })
    }

    /// Tokenizes raw sequences and builds the model's configured topologies.
    pub fn build(
        raw: &[crate::sequencer::RawSequence],
        vocab: &Vocabulary,
        model: &ModelConfig,
    ) -> Result<Self> {
        let mut seqs = Vec::with_capacity(raw.len());
        let mut topos = Vec::with_capacity(raw.len());
        for r in raw {
            let t = vocab.tokenize(r, model.seq_len)?;
            let names: Vec<&str> = r.domains().collect();
            topos.push(TopologySet::build(
                &model.topologies,
                &names,
                model.seq_len,
            )?);
            seqs.push(t);
        }
        Ok(Self { seqs, topos })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> (Vec<TokenSequence>, Vec<TopologySet>) {
        (
            idx.iter().map(|&i| self.seqs[i].clone()).collect(),
            idx.iter().map(|&i| self.topos[i].clone()).collect(),
        )
    }
}

/// Masked-language-model pre-training with dynamic masking.
pub fn pretrain(
    model: &mut DnsGtModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    masking: &MaskingConfig,
    vocab_hash: &str,
) -> Result<TrainReport> {
    if model.config.head != Head::Mlm {
        return Err(Error::WrongHead("mlm"));
    }
    masking.validate()?;
    let v = model.config.domain_vocab;
    let losses = train_loop(model, corpus.len(), cfg, vocab_hash, |m, idx, rng| {
        let (seqs, topos) = corpus.select(idx);
        let outs = seqs
            .iter()
            .map(|s| apply_mlm_mask(s, masking, v, rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_masked(&outs, &topos)?;
        let targets: Vec<usize> = outs
            .iter()
            .flat_map(|o| o.target_ids.iter().copied())
            .collect();
        let masked: Vec<bool> = outs
            .iter()
            .flat_map(|o| o.masked_positions.iter().copied())
            .collect();
        let mut pass = m.run(
            &batch,
            Targets::Mlm {
                targets: &targets,
                masked: &masked,
            },
            RunOptions::train(),
            rng,
        )?;
        let loss = pass.loss.expect("mlm loss");
        let value = pass.graph.value(loss).item();
        pass.graph.backward(loss)?;
        m.params.accumulate_grads(&pass.graph, &pass.bound);
        if let Some(stats) = &pass.bn_stats {
            m.update_running_stats(stats);
        }
        Ok(value)
    })?;
    Ok(TrainReport {
        losses,
        labeled_domains: BTreeSet::new(),
    })
}

/// Supervision for fine-tuning.
#[derive(Debug, Clone)]
pub enum FinetuneLabels {
    /// Per-sequence, per-position labels (None = not supervised).
    Binary(Vec<Vec<Option<f64>>>),
    /// One class per sequence.
    HostClass(Vec<usize>),
}

/// Fine-tunes every parameter on a labeled corpus. The head must already
/// match the task (see [`DnsGtModel::swap_head`]).
pub fn finetune(
    model: &mut DnsGtModel,
    corpus: &Corpus,
    labels: &FinetuneLabels,
    cfg: &TrainConfig,
    vocab_hash: &str,
) -> Result<TrainReport> {
    match (model.config.head, labels) {
        (Head::Binary, FinetuneLabels::Binary(l)) if l.len() != corpus.len() => {
            return Err(Error::MissingLabels(format!(
                "{} label rows for {} sequences",
                l.len(),
                corpus.len()
            )));
        }
        (Head::HostClass { .. }, FinetuneLabels::HostClass(l)) if l.len() != corpus.len() => {
            return Err(Error::MissingLabels(format!(
                "{} labels for {} sequences",
                l.len(),
                corpus.len()
            )));
        }
        (Head::Binary, FinetuneLabels::Binary(_))
        | (Head::HostClass { .. }, FinetuneLabels::HostClass(_)) => {}
        (Head::Mlm, _) => return Err(Error::WrongHead("mlm")),
        (Head::Binary, _) => return Err(Error::WrongHead("binary")),
        (Head::HostClass { .. }, _) => return Err(Error::WrongHead("host_class")),
    }
    let mut seen = BTreeSet::new();
    let losses = train_loop(model, corpus.len(), cfg, vocab_hash, |m, idx, rng| {
        let (seqs, topos) = corpus.select(idx);
        let batch = Batch::from_tokens(&seqs, &topos)?;
        let flat: Vec<Option<f64>>;
        let classes: Vec<usize>;
        let targets = match labels {
            FinetuneLabels::Binary(l) => {
                flat = idx.iter().flat_map(|&i| l[i].iter().copied()).collect();
                for (r, y) in flat.iter().enumerate() {
                    if y.is_some() && batch.domain_ids[r] >= NUM_DOMAIN_SPECIALS {
                        seen.insert(batch.domain_ids[r]);
                    }
                }
                Targets::Binary(&flat)
            }
            FinetuneLabels::HostClass(l) => {
                classes = idx.iter().map(|&i| l[i]).collect();
                Targets::HostClass(&classes)
            }
        };
        let mut pass = m.run(&batch, targets, RunOptions::train(), rng)?;
        let loss = pass.loss.expect("finetune loss");
        let value = pass.graph.value(loss).item();
        pass.graph.backward(loss)?;
        m.params.accumulate_grads(&pass.graph, &pass.bound);
        if let Some(stats) = &pass.bn_stats {
            m.update_running_stats(stats);
        }
        Ok(value)
    })?;
    Ok(TrainReport {
        losses,
        labeled_domains: seen,
    })
}

pub fn pretrain_w2v(
    model: &mut W2vModel,
    seqs: &[TokenSequence],
    cfg: &TrainConfig,
    vocab_hash: &str,
) -> Result<TrainReport> {
    if model.config.head != W2vHead::Softmax {
        return Err(Error::WrongHead("softmax"));
    }
    let losses = train_loop(model, seqs.len(), cfg, vocab_hash, |m, idx, _| {
        let batch: Vec<TokenSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let mut pass = m.run(&batch, None)?;
        let Some(loss) = pass.loss else {
            return Ok(0.0);
        };
        let value = pass.graph.value(loss).item();
        pass.graph.backward(loss)?;
        m.accumulate(&pass);
        Ok(value)
    })?;
    Ok(TrainReport {
        losses,
        labeled_domains: BTreeSet::new(),
    })
}

pub fn finetune_w2v(
    model: &mut W2vModel,
    seqs: &[TokenSequence],
    labels: &[Vec<Option<f64>>],
    cfg: &TrainConfig,
    vocab_hash: &str,
) -> Result<TrainReport> {
    if model.config.head != W2vHead::Classify {
        return Err(Error::WrongHead("classify"));
    }
    if labels.len() != seqs.len() {
        return Err(Error::MissingLabels(format!(
            "{} label rows for {} sequences",
            labels.len(),
            seqs.len()
        )));
    }
    let mut seen = BTreeSet::new();
    let losses = train_loop(model, seqs.len(), cfg, vocab_hash, |m, idx, _| {
        let batch: Vec<TokenSequence> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let flat: Vec<Option<f64>> = idx
            .iter()
            .flat_map(|&i| labels[i].iter().copied())
            .collect();
        for (s, l) in idx.iter().map(|&i| (&seqs[i], &labels[i])) {
            for (d, y) in s.domain_ids.iter().zip(l) {
                if y.is_some() && *d >= NUM_DOMAIN_SPECIALS {
                    seen.insert(*d);
                }
            }
        }
        let mut pass = m.run(&batch, Some(&flat))?;
        let loss = pass.loss.expect("classification loss");
        let value = pass.graph.value(loss).item();
        pass.graph.backward(loss)?;
        m.accumulate(&pass);
        Ok(value)
    })?;
    Ok(TrainReport {
        losses,
        labeled_domains: seen,
    })
}

/// Fails with [`Error::VocabMismatch`] unless the checkpoint was trained
/// against this vocabulary.
pub fn check_vocab(checkpoint_hash: &str, vocab: &Vocabulary) -> Result<()> {
    let corpus = vocab.hash();
    if checkpoint_hash != corpus {
        return Err(Error::VocabMismatch {
            checkpoint: checkpoint_hash.to_string(),
            corpus,
        });
    }
    Ok(())
}

/// Temporal boundary plus a k-fold partition of the real-domain vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Queries at or after this timestamp belong to the test period.
    pub temporal_boundary: f64,
    pub domain_folds: Vec<Vec<usize>>,
    pub active_fold: usize,
}

impl SplitPlan {
    pub fn eval_domains(&self) -> BTreeSet<usize> {
        self.domain_folds[self.active_fold]
            .iter()
            .copied()
            .collect()
    }

    pub fn train_domains(&self) -> BTreeSet<usize> {
        self.domain_folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.active_fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }

    pub fn with_fold(&self, fold: usize) -> Self {
        Self {
            active_fold: fold,
            ..self.clone()
        }
    }

    pub fn is_test_time(&self, ts: f64) -> bool {
        ts >= self.temporal_boundary
    }
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.7;

/// Boundary at `train_fraction` of the timestamp range; folds dealt
/// round-robin from a seeded shuffle of the real-domain ids.
pub fn make_splits(
    timestamps: &[f64],
    vocab: &Vocabulary,
    folds: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitPlan> {
    if folds < 2 {
        return Err(Error::BadConfig(format!("folds must be >= 2, got {folds}")));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::BadConfig(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let lo = timestamps.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = timestamps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let temporal_boundary = if timestamps.is_empty() {
        0.0
    } else {
        lo + train_fraction * (hi - lo)
    };
    let mut ids: Vec<usize> = vocab.real_domain_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut domain_folds = vec![Vec::new(); folds];
    for (i, id) in ids.into_iter().enumerate() {
        domain_folds[i % folds].push(id);
    }
    domain_folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(SplitPlan {
        temporal_boundary,
        domain_folds,
        active_fold: 0,
    })
}

/// Labels restricted to training-fold domains: positions whose domain is in
/// `eval_domains` lose their label.
pub fn restrict_labels(
    seqs: &[TokenSequence],
    labels: &[Vec<Option<f64>>],
    eval_domains: &BTreeSet<usize>,
) -> Vec<Vec<Option<f64>>> {
    seqs.iter()
        .zip(labels)
        .map(|(s, l)| {
            s.domain_ids
                .iter()
                .zip(l)
                .map(|(d, y)| if eval_domains.contains(d) { None } else { *y })
                .collect()
        })
        .collect()
}

/// Flat configuration file covering model, training, sequencing and masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub preset: Option<String>,
    /// Maximum number of real domains kept in the vocabulary.
    pub max_domains: usize,
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub sequencing: SequencingConfig,
    #[serde(flatten)]
    pub masking: MaskingConfig,
    /// Input paths recorded by `synth`, relative to the config file.
    pub data: Option<DataPaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DataPaths {
    pub queries: Option<PathBuf>,
    pub sequences: Option<PathBuf>,
    pub domain_labels: Option<PathBuf>,
    pub host_labels: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl PipelineConfig {
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        Self {
            preset: Some("paper".into()),
            max_domains: 30_000,
            sequencing: SequencingConfig {
                max_len: model.seq_len,
                stride: model.seq_len,
                ..Default::default()
            },
            model,
            train: TrainConfig::default(),
            masking: MaskingConfig::default(),
            data: None,
        }
    }

    /// Desk-scale preset with a higher learning rate than the full-size one.
    pub fn tiny() -> Self {
        let model = ModelConfig::tiny();
        Self {
            preset: Some("tiny".into()),
            max_domains: 50,
            sequencing: SequencingConfig {
                max_len: model.seq_len,
                stride: model.seq_len,
                ..Default::default()
            },
            model,
            train: TrainConfig {
                lr: 3e-3,
                batch_size: 32,
                max_steps: 300,
                ..TrainConfig::default()
            },
            masking: MaskingConfig::default(),
            data: None,
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

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.sequencing.validate()?;
        self.masking.validate()?;
        if self.sequencing.max_len > self.model.seq_len {
            return Err(Error::BadConfig(format!(
                "sequencing max_len {} exceeds model seq_len {}",
                self.sequencing.max_len, self.model.seq_len
            )));
        }
        let mut probe = self.model.clone();
        probe.domain_vocab = probe.domain_vocab.max(NUM_DOMAIN_SPECIALS);
        probe.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
