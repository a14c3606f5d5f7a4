//! Word2Vec CBOW and SkipGram over domain sequences, written as dense
//! band-matrix products so a whole batch is processed at once.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointFile, Entry};
use crate::model::sigmoid;
use crate::tensor::{Bound, Graph, ParamSet, Tensor, Var};
use crate::vocab::{TokenSequence, Vocabulary, NUM_DOMAIN_SPECIALS, PAD};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2vVariant {
    Cbow,
    SkipGram,
}

impl std::str::FromStr for W2vVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cbow" => Ok(Self::Cbow),
            "skipgram" | "skip_gram" => Ok(Self::SkipGram),
            other => Err(Error::BadConfig(format!(
                "unknown word2vec variant '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2vHead {
    Softmax,
    Classify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W2vConfig {
    pub variant: W2vVariant,
    pub dim: usize,
    pub seq_len: usize,
    /// Domain vocabulary size including specials.
    pub vocab: usize,
    /// Context bandwidth r; None means r = L.
    pub bandwidth: Option<usize>,
    pub head: W2vHead,
    /// Keeps the embedding table fixed during training.
    pub freeze_embeddings: bool,
}

impl W2vConfig {
    pub fn new(variant: W2vVariant, dim: usize, seq_len: usize, vocab: usize) -> Self {
        Self {
            variant,
            dim,
            seq_len,
            vocab,
            bandwidth: None,
            head: W2vHead::Softmax,
            freeze_embeddings: false,
        }
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth.unwrap_or(self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.seq_len == 0
            || self.vocab < NUM_DOMAIN_SPECIALS
            || self.bandwidth() == 0
        {
            return Err(Error::BadModelConfig(format!(
                "invalid word2vec config {self:?}"
            )));
        }
        Ok(())
    }
}

/// Band matrix minus identity: `m[i][j] = 1` iff `0 < |i − j| ≤ r`.
pub fn context_band(len: usize, r: usize) -> Vec<f64> {
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        for j in 0..len {
            if i != j && i.abs_diff(j) <= r {
                m[i * len + j] = 1.0;
            }
        }
    }
    m
}

/// `(B_r − I)·E` with PAD rows of `e` zeroed first. `e` is L×N.
pub fn cbow_context(e: &Tensor, r: usize, non_pad: &[bool]) -> Result<Tensor> {
    let (l, n) = (e.rows(), e.cols());
    if r == 0 || non_pad.len() != l {
        return Err(Error::ShapeMismatch {
            op: "cbow_context",
            detail: format!("r={r}, {} flags for {l} rows", non_pad.len()),
        });
    }
    let factors: Vec<f64> = (0..l * n)
        .map(|i| if non_pad[i / n] { 1.0 } else { 0.0 })
        .collect();
    let mut g = Graph::new();
    let ev = g.constant(Tensor::new(vec![1, l, n], e.data().to_vec())?);
    let ez = g.const_mul(ev, factors)?;
    let band = g.constant(Tensor::new(vec![1, l, l], context_band(l, r))?);
    let c = g.batch_matmul(band, ez, false)?;
    Tensor::new(vec![l, n], g.value(c).data().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct W2vModel {
    pub config: W2vConfig,
    pub params: ParamSet,
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(
        &[fan_in, fan_out],
        (6.0 / (fan_in + fan_out) as f64).sqrt(),
        rng,
    )
}

/// Recorded graph of one Word2Vec forward pass.
pub struct W2vPass {
    pub graph: Graph,
    pub bound: Bound,
    pub hidden: Var,
    pub logits: Var,
    pub loss: Option<Var>,
}

impl W2vModel {
    pub fn new(config: W2vConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, v) = (config.dim, config.vocab);
        let mut p = ParamSet::new();
        p.add(
            "embed",
            Tensor::randn(&[v, n], crate::model::EMBED_INIT_STD, &mut rng),
        );
        p.add("hidden.w", xavier(n, n, &mut rng));
        p.add("hidden.b", Tensor::zeros(&[n]));
        let mut model = Self { config, params: p };
        let head = model.config.head;
        model.add_head(head, &mut rng);
        Ok(model)
    }

    fn add_head(&mut self, head: W2vHead, rng: &mut ChaCha8Rng) {
        let n = self.config.dim;
        let (name, out) = match head {
            W2vHead::Softmax => ("softmax", self.config.vocab),
            W2vHead::Classify => ("classify", 1),
        };
        self.params.add(&format!("{name}.w"), xavier(n, out, rng));
        self.params.add(&format!("{name}.b"), Tensor::zeros(&[out]));
        self.config.head = head;
    }

    /// Replaces the softmax head by a fresh classification head (or back).
    pub fn swap_head(&mut self, head: W2vHead, seed: u64) {
        self.params.remove_prefix("softmax.");
        self.params.remove_prefix("classify.");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.add_head(head, &mut rng);
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

    fn check(&self, seqs: &[TokenSequence]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for s in seqs {
            if s.capacity() != self.config.seq_len {
                return Err(Error::ShapeMismatch {
                    op: "word2vec",
                    detail: format!(
                        "sequence capacity {} for model length {}",
                        s.capacity(),
                        self.config.seq_len
                    ),
                });
            }
            if let Some(&id) = s.domain_ids.iter().find(|&&id| id >= self.config.vocab) {
                return Err(Error::IdOutOfRange {
                    kind: "domain",
                    id,
                    size: self.config.vocab,
                });
            }
        }
        Ok(())
    }

    /// Projected representation H (B·L × N) for a batch.
    fn hidden(&self, g: &mut Graph, bound: &Bound, seqs: &[TokenSequence]) -> Result<Var> {
        let (l, n) = (self.config.seq_len, self.config.dim);
        let ids: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.domain_ids.iter().copied())
            .collect();
        let e = g.embedding_gather(self.var(bound, "embed"), &ids)?;
        let input = match self.config.variant {
            W2vVariant::SkipGram => e,
            W2vVariant::Cbow => {
                let factors: Vec<f64> = ids
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(if d == PAD { 0.0 } else { 1.0 }, n))
                    .collect();
                let ez = g.const_mul(e, factors)?;
                let ez = g.reshape(ez, &[seqs.len(), l, n])?;
                let band = context_band(l, self.config.bandwidth());
                let bands = Tensor::new(vec![seqs.len(), l, l], band.repeat(seqs.len()))?;
                let bands = g.constant(bands);
                let c = g.batch_matmul(bands, ez, false)?;
                g.reshape(c, &[seqs.len() * l, n])?
            }
        };
        let h = g.matmul(input, self.var(bound, "hidden.w"))?;
        g.add(h, self.var(bound, "hidden.b"))
    }

    /// (row, target) pairs of the self-supervised objective.
    pub fn pretrain_pairs(&self, seqs: &[TokenSequence]) -> Vec<(usize, usize)> {
        let l = self.config.seq_len;
        let r = self.config.bandwidth();
        let mut pairs = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            for i in (0..l).filter(|&i| !s.is_pad(i)) {
                let ctx: Vec<usize> = (0..l)
                    .filter(|&j| j != i && i.abs_diff(j) <= r && !s.is_pad(j))
                    .collect();
                match self.config.variant {
                    W2vVariant::Cbow if !ctx.is_empty() => pairs.push((b * l + i, s.domain_ids[i])),
                    W2vVariant::Cbow => {}
                    W2vVariant::SkipGram => {
                        pairs.extend(ctx.into_iter().map(|j| (b * l + i, s.domain_ids[j])))
                    }
                }
            }
        }
        pairs
    }

    /// Builds the graph; `labels` switches the loss to the classification head.
    pub fn run(&self, seqs: &[TokenSequence], labels: Option<&[Option<f64>]>) -> Result<W2vPass> {
        self.check(seqs)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let hidden = self.hidden(&mut g, &bound, seqs)?;
        let rows = seqs.len() * self.config.seq_len;
        let (logits, loss) = match self.config.head {
            W2vHead::Softmax => {
                if labels.is_some() {
                    return Err(Error::WrongHead("softmax"));
                }
                let logits = g.matmul(hidden, self.var(&bound, "softmax.w"))?;
                let logits = g.add(logits, self.var(&bound, "softmax.b"))?;
                let pairs = self.pretrain_pairs(seqs);
                let loss = if pairs.is_empty() {
                    None
                } else {
                    Some(g.cross_entropy(logits, &pairs)?)
                };
                (logits, loss)
            }
            W2vHead::Classify => {
                let logits = g.matmul(hidden, self.var(&bound, "classify.w"))?;
                let logits = g.add(logits, self.var(&bound, "classify.b"))?;
                let loss = match labels {
                    Some(labels) => {
                        if labels.len() != rows {
                            return Err(Error::MissingLabels(format!(
                                "{} labels for {rows} rows",
                                labels.len()
                            )));
                        }
                        let pad: Vec<bool> = seqs
                            .iter()
                            .flat_map(|s| s.domain_ids.iter().map(|&d| d != PAD))
                            .collect();
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
                    None => None,
                };
                (logits, loss)
            }
        };
        Ok(W2vPass {
            graph: g,
            bound,
            hidden,
            logits,
            loss,
        })
    }

    /// Accumulates the gradients of a finished pass, honouring the freeze flag.
    pub fn accumulate(&mut self, pass: &W2vPass) {
        self.params.accumulate_grads(&pass.graph, &pass.bound);
        if self.config.freeze_embeddings {
            if let Some(p) = self.params.get_mut("embed") {
                p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    /// Softmax distribution over the vocabulary at every position (L rows of V).
    pub fn predict(&self, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        if self.config.head != W2vHead::Softmax {
            return Err(Error::WrongHead("softmax"));
        }
        let pass = self.run(std::slice::from_ref(seq), None)?;
        let logits = pass.graph.value(pass.logits);
        Ok((0..self.config.seq_len)
            .map(|i| crate::model::softmax(logits.row(i)))
            .collect())
    }

    /// Per-token probabilities (B×L) and the BCE loss when labels are given.
    pub fn forward_binary(
        &self,
        seqs: &[TokenSequence],
        labels: Option<&[Option<f64>]>,
    ) -> Result<(Vec<Vec<f64>>, Option<f64>)> {
        if self.config.head != W2vHead::Classify {
            return Err(Error::WrongHead("classify"));
        }
        let pass = self.run(seqs, labels)?;
        let probs: Vec<f64> = pass
            .graph
            .value(pass.logits)
            .data()
            .iter()
            .map(|&z| sigmoid(z))
            .collect();
        let loss = pass.loss.map(|l| pass.graph.value(l).item());
        Ok((
            probs
                .chunks(self.config.seq_len)
                .map(<[f64]>::to_vec)
                .collect(),
            loss,
        ))
    }

    pub fn export_embeddings(&self, vocab: &Vocabulary) -> Vec<(String, Vec<f64>)> {
        let table = &self.params.get("embed").expect("embedding table").value;
        vocab
            .real_domain_ids()
            .filter_map(|id| Some((vocab.domain(id)?.to_string(), table.row(id).to_vec())))
            .collect()
    }

    pub fn checkpoint(&self, vocab_hash: &str) -> Result<CheckpointFile> {
        let entries = self
            .params
            .iter()
            .map(|p| Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Ok(CheckpointFile {
            config_json: serde_json::to_string(&self.config)?,
            vocab_hash: vocab_hash.into(),
            entries,
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P, vocab_hash: &str) -> Result<()> {
        self.checkpoint(vocab_hash)?.save(path)
    }

    pub fn from_checkpoint(ck: &CheckpointFile) -> Result<Self> {
        let config: W2vConfig = serde_json::from_str(&ck.config_json)?;
        let mut model = Self::new(config, 0)?;
        if ck.entries.len() != model.params.len() {
            return Err(Error::BadCheckpoint(format!(
                "{} entries, config implies {}",
                ck.entries.len(),
                model.params.len()
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
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    #[test]
    fn full_band_sums_other_rows() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0]]).unwrap();
        let c = cbow_context(&e, 3, &[true; 3]).unwrap();
        assert_eq!(
            rows(&c),
            vec![vec![3.0, 5.0], vec![4.0, 3.0], vec![1.0, 2.0]]
        );
    }

    #[test]
    fn bandwidth_one() {
        let e = Tensor::from_rows(&[vec![1.0], vec![10.0], vec![100.0]]).unwrap();
        let c = cbow_context(&e, 1, &[true; 3]).unwrap();
        assert_eq!(rows(&c), vec![vec![10.0], vec![101.0], vec![10.0]]);
    }

    #[test]
    fn single_token_has_no_context() {
        let e = Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let c = cbow_context(&e, 2, &[true, false]).unwrap();
        assert_eq!(rows(&c)[0], vec![0.0, 0.0]);
    }

    #[test]
    fn untrained_cbow_loss_near_log_vocab() {
        let model = W2vModel::new(W2vConfig::new(W2vVariant::Cbow, 16, 4, 40), 1).unwrap();
        let seq = TokenSequence {
            host_ids: vec![0; 4],
            domain_ids: vec![5, 6, 7, PAD],
            len: 3,
        };
        let pass = model.run(&[seq], None).unwrap();
        let loss = pass.graph.value(pass.loss.unwrap()).item();
        assert!((loss - 40f64.ln()).abs() < 0.1, "{loss}");
    }

    #[test]
    fn skipgram_single_token_is_skipped() {
        let model = W2vModel::new(W2vConfig::new(W2vVariant::SkipGram, 4, 3, 10), 1).unwrap();
        let seq = TokenSequence {
            host_ids: vec![0; 3],
            domain_ids: vec![5, PAD, PAD],
            len: 1,
        };
        assert!(model.pretrain_pairs(std::slice::from_ref(&seq)).is_empty());
        assert!(model.run(&[seq], None).unwrap().loss.is_none());
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut model = W2vModel::new(W2vConfig::new(W2vVariant::Cbow, 4, 3, 10), 1).unwrap();
        model.swap_head(W2vHead::Classify, 2);
        model
            .params
            .get_mut("classify.w")
            .unwrap()
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let seq = TokenSequence {
            host_ids: vec![0; 3],
            domain_ids: vec![5, 6, PAD],
            len: 2,
        };
        let (p, loss) = model
            .forward_binary(&[seq], Some(&[Some(1.0), Some(0.0), None]))
            .unwrap();
        assert!(p[0].iter().all(|&v| v == 0.5));
        assert!((loss.unwrap() - 2f64.ln()).abs() < 1e-15);
    }
}
