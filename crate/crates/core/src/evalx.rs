//! Classification metrics, embedding-space distances and per-domain
//! context sensitivity.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::W2vModel;
use crate::model::{argmax, DnsGtModel};
use crate::topology::TopologySet;
use crate::vocab::{TokenSequence, NUM_DOMAIN_SPECIALS};
use crate::{Error, Result};

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            detail: format!("{} scores, {} labels", scores.len(), labels.len()),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteDetected {
            op: "metric",
            index: i,
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Mann–Whitney estimate of P(score₊ > score₋) + ½·P(tie).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the U statistic, kept integral for exact tie handling
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1
            } else {
                n += 1
            }
            j += 1;
        }
        u2 += 2 * p * neg_below + p * n;
        neg_below += n;
        i = j;
    }
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// F1 with predictions `score >= threshold`; 0 when there is no true positive.
pub fn f1_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_binary(scores, labels)?;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            _ => {}
        }
    }
    Ok(f1_from_counts(tp, fp, fne))
}

fn f1_from_counts(tp: usize, fp: usize, fne: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    }
}

/// Best F1 over thresholds {0, 1} ∪ distinct scores; lowest threshold on ties.
pub fn f1_best(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let (pos, _) = check_binary(scores, labels)?;
    let mut cands: Vec<f64> = scores.iter().copied().chain([0.0, 1.0]).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    let mut ps: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let mut ns: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    ps.sort_by(f64::total_cmp);
    ns.sort_by(f64::total_cmp);
    let at_least = |v: &[f64], t: f64| v.len() - v.partition_point(|&x| x < t);
    let mut best = (cands[0], -1.0);
    for &t in &cands {
        let tp = at_least(&ps, t);
        let fp = at_least(&ns, t);
        let f = f1_from_counts(tp, fp, pos - tp);
        if f > best.1 {
            best = (t, f);
        }
    }
    Ok(best)
}

/// (fpr, tpr, threshold) at every distinct score, from the strictest threshold down.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64, f64)>> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1
            } else {
                fp += 1
            }
            i += 1;
        }
        out.push((fp as f64 / neg as f64, tp as f64 / pos as f64, t));
    }
    Ok(out)
}

pub fn write_roc_csv<W: Write>(mut w: W, curve: &[(f64, f64, f64)]) -> Result<()> {
    writeln!(w, "fpr,tpr,threshold")?;
    for (f, t, th) in curve {
        writeln!(w, "{f},{t},{th}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Best {
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryReport {
    pub auc: f64,
    pub f1_at_05: f64,
    pub f1_best: F1Best,
}

pub fn binary_report(scores: &[f64], labels: &[bool]) -> Result<BinaryReport> {
    let (threshold, value) = f1_best(scores, labels)?;
    Ok(BinaryReport {
        auc: roc_auc(scores, labels)?,
        f1_at_05: f1_at(scores, labels, 0.5)?,
        f1_best: F1Best { threshold, value },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassReport {
    pub accuracy: f64,
    /// Macro one-vs-rest AUC over classes with both outcomes present.
    pub auc: f64,
    /// Macro F1 over classes present in labels or predictions.
    pub f1: f64,
}

/// Fraction of rows whose argmax (lowest class on ties) equals the label.
pub fn accuracy_multiclass(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count() as f64
        / probs.len() as f64
}

pub fn multiclass_report(probs: &[Vec<f64>], labels: &[usize]) -> Result<MulticlassReport> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "multiclass",
            detail: format!("{} rows, {} labels", probs.len(), labels.len()),
        });
    }
    let c = probs[0].len();
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mut aucs = Vec::new();
    let mut f1s = Vec::new();
    for k in 0..c {
        let y: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        if let Ok(a) = roc_auc(&s, &y) {
            aucs.push(a);
        }
        let tp = preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == k && l == k)
            .count();
        let fp = preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p == k && l != k)
            .count();
        let fne = preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| p != k && l == k)
            .count();
        if tp + fp + fne > 0 {
            f1s.push(f1_from_counts(tp, fp, fne));
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MulticlassReport {
        accuracy: accuracy_multiclass(probs, labels),
        auc: mean(&aucs),
        f1: mean(&f1s),
    })
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub type EmbeddingTable = BTreeMap<String, Vec<f64>>;

pub fn embedding_table(rows: Vec<(String, Vec<f64>)>) -> EmbeddingTable {
    rows.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub cosine: f64,
    pub euclidean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Mean over unordered distinct pairs of set A (None with fewer than two members).
    pub intra: Option<PairStats>,
    /// Mean over A × B.
    pub inter: PairStats,
}

fn lookup<'a>(emb: &'a EmbeddingTable, d: &str) -> Result<&'a [f64]> {
    emb.get(d)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::MissingDomain(d.to_string()))
}

fn mean_pairs<'a, I: Iterator<Item = (&'a [f64], &'a [f64])>>(pairs: I) -> Option<PairStats> {
    let (mut c, mut e, mut n) = (0.0, 0.0, 0usize);
    for (a, b) in pairs {
        c += cosine(a, b);
        e += euclidean(a, b);
        n += 1;
    }
    (n > 0).then(|| PairStats {
        cosine: c / n as f64,
        euclidean: e / n as f64,
    })
}

pub fn embedding_distances(
    emb: &EmbeddingTable,
    set_a: &[&str],
    set_b: &[&str],
) -> Result<DistanceReport> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::BadConfig(
            "embedding_distances needs non-empty sets".into(),
        ));
    }
    let a: Vec<&[f64]> = set_a
        .iter()
        .map(|d| lookup(emb, d))
        .collect::<Result<_>>()?;
    let b: Vec<&[f64]> = set_b
        .iter()
        .map(|d| lookup(emb, d))
        .collect::<Result<_>>()?;
    let intra = mean_pairs(
        (0..a.len())
            .flat_map(|i| (i + 1..a.len()).map(move |j| (i, j)))
            .map(|(i, j)| (a[i], a[j])),
    );
    let inter =
        mean_pairs(a.iter().flat_map(|x| b.iter().map(move |y| (*x, *y)))).expect("non-empty sets");
    Ok(DistanceReport { intra, inter })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceDistanceReport {
    pub sequences: usize,
    /// All position pairs, repeated domains included.
    pub within: PairStats,
    /// Distinct domains of each sequence only.
    pub within_distinct: PairStats,
    /// Size-matched uniform samples of the vocabulary.
    pub random: PairStats,
}

/// Within-sequence pairwise statistics against size-matched random domain sets.
pub fn sequence_vs_random_distance<R: Rng + ?Sized>(
    emb: &EmbeddingTable,
    sequences: &[Vec<String>],
    n_sequences: usize,
    rng: &mut R,
) -> Result<SequenceDistanceReport> {
    let names: Vec<&str> = emb.keys().map(String::as_str).collect();
    let eligible: Vec<&Vec<String>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    if eligible.is_empty() || names.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let picked: Vec<&&Vec<String>> = eligible
        .choose_multiple(rng, n_sequences.min(eligible.len()))
        .collect();
    let mut acc = [(0.0, 0.0, 0usize); 3];
    let mut add = |slot: usize, s: Option<PairStats>| {
        if let Some(s) = s {
            acc[slot].0 += s.cosine;
            acc[slot].1 += s.euclidean;
            acc[slot].2 += 1;
        }
    };
    for seq in picked {
        let vecs: Vec<&[f64]> = seq.iter().map(|d| lookup(emb, d)).collect::<Result<_>>()?;
        add(
            0,
            mean_pairs(
                (0..vecs.len())
                    .flat_map(|i| (i + 1..vecs.len()).map(move |j| (i, j)))
                    .map(|(i, j)| (vecs[i], vecs[j])),
            ),
        );
        let distinct: Vec<&[f64]> = seq
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|d| lookup(emb, d))
            .collect::<Result<_>>()?;
        add(
            1,
            mean_pairs(
                (0..distinct.len())
                    .flat_map(|i| (i + 1..distinct.len()).map(move |j| (i, j)))
                    .map(|(i, j)| (distinct[i], distinct[j])),
            ),
        );
        let k = seq.len().min(names.len());
        let sample: Vec<&[f64]> = names
            .choose_multiple(rng, k)
            .map(|d| emb[*d].as_slice())
            .collect();
        add(
            2,
            mean_pairs(
                (0..sample.len())
                    .flat_map(|i| (i + 1..sample.len()).map(move |j| (i, j)))
                    .map(|(i, j)| (sample[i], sample[j])),
            ),
        );
    }
    let fin = |(c, e, n): (f64, f64, usize)| PairStats {
        cosine: c / n.max(1) as f64,
        euclidean: e / n.max(1) as f64,
    };
    Ok(SequenceDistanceReport {
        sequences: acc[0].2,
        within: fin(acc[0]),
        within_distinct: fin(acc[1]),
        random: fin(acc[2]),
    })
}

/// Anything that assigns a score to every token of a batch of sequences.
pub trait TokenScorer {
    fn token_scores(&self, seqs: &[TokenSequence], topos: &[TopologySet]) -> Result<Vec<Vec<f64>>>;
}

const SCORE_CHUNK: usize = 64;

impl TokenScorer for DnsGtModel {
    fn token_scores(&self, seqs: &[TokenSequence], topos: &[TopologySet]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for (s, t) in seqs.chunks(SCORE_CHUNK).zip(topos.chunks(SCORE_CHUNK)) {
            out.extend(self.forward_binary(s, t, None)?.0);
        }
        Ok(out)
    }
}

impl TokenScorer for W2vModel {
    fn token_scores(
        &self,
        seqs: &[TokenSequence],
        _topos: &[TopologySet],
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for s in seqs.chunks(SCORE_CHUNK) {
            out.extend(self.forward_binary(s, None)?.0);
        }
        Ok(out)
    }
}

/// One scored, labeled token occurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occurrence {
    pub sequence: usize,
    pub position: usize,
    pub domain: usize,
    pub score: f64,
}

/// All real-token occurrences with their scores.
pub fn occurrences(seqs: &[TokenSequence], scores: &[Vec<f64>]) -> Vec<Occurrence> {
    let mut out = Vec::new();
    for (si, (s, sc)) in seqs.iter().zip(scores).enumerate() {
        for p in (0..s.capacity()).filter(|&p| s.domain_ids[p] >= NUM_DOMAIN_SPECIALS) {
            out.push(Occurrence {
                sequence: si,
                position: p,
                domain: s.domain_ids[p],
                score: sc[p],
            });
        }
    }
    out
}

/// Mean occurrence score of every scored domain.
pub fn domain_scores(occ: &[Occurrence]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for o in occ {
        let e = acc.entry(o.domain).or_default();
        e.0 += o.score;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(d, (s, n))| (d, s / n as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainCv {
    pub sequences: usize,
    pub mean: f64,
    pub std: f64,
    pub cv: f64,
}

pub const CV_THRESHOLDS: [f64; 3] = [0.01, 0.03, 0.05];
pub const DEFAULT_MIN_OCCURRENCES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub per_domain: BTreeMap<usize, DomainCv>,
    /// (threshold, fraction of domains whose CV exceeds it).
    pub exceedance: Vec<(f64, f64)>,
}

impl CvReport {
    pub fn fraction_above(&self, t: f64) -> f64 {
        if self.per_domain.is_empty() {
            return 0.0;
        }
        self.per_domain.values().filter(|d| d.cv > t).count() as f64 / self.per_domain.len() as f64
    }
}

/// Coefficient of variation (population std / mean) of every domain's
/// occurrence scores, over domains seen in at least `min_occurrences`
/// sequences. Domains with zero mean are left out.
pub fn context_sensitivity(occ: &[Occurrence], min_occurrences: usize) -> CvReport {
    let mut by_domain: BTreeMap<usize, (Vec<f64>, BTreeSet<usize>)> = BTreeMap::new();
    for o in occ {
        let e = by_domain.entry(o.domain).or_default();
        e.0.push(o.score);
        e.1.insert(o.sequence);
    }
    let mut per_domain = BTreeMap::new();
    for (d, (scores, seqs)) in by_domain {
        if seqs.len() < min_occurrences {
            continue;
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        if mean == 0.0 {
            continue;
        }
        // shifted by the first score so identical scores give exactly 0
        let k = scores[0];
        let m1 = scores.iter().map(|s| s - k).sum::<f64>() / n;
        let m2 = scores.iter().map(|s| (s - k).powi(2)).sum::<f64>() / n;
        let std = (m2 - m1 * m1).max(0.0).sqrt();
        per_domain.insert(
            d,
            DomainCv {
                sequences: seqs.len(),
                mean,
                std,
                cv: std / mean,
            },
        );
    }
    let mut report = CvReport {
        per_domain,
        exceedance: Vec::new(),
    };
    report.exceedance = CV_THRESHOLDS
        .iter()
        .map(|&t| (t, report.fraction_above(t)))
        .collect();
    report
}

/// Per-domain occurrence scores as CSV (domain, sequence, position, score).
pub fn write_scores_csv<W: Write>(
    mut w: W,
    occ: &[Occurrence],
    name: impl Fn(usize) -> String,
) -> Result<()> {
    writeln!(w, "domain,sequence,position,score")?;
    for o in occ {
        writeln!(
            w,
            "{},{},{},{}",
            name(o.domain),
            o.sequence,
            o.position,
            o.score
        )?;
    }
    Ok(())
}
