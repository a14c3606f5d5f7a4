//! Host and domain vocabularies, fixed-length tokenization and MLM masking.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::sequencer::RawSequence;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const NUM_DOMAIN_SPECIALS: usize = 3;
pub const UNK_HOST: usize = 0;
pub const NUM_HOST_SPECIALS: usize = 1;

pub const PAD_TOKEN: &str = "<PAD>";
pub const MASK_TOKEN: &str = "<MASK>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const UNK_HOST_TOKEN: &str = "<UNK_HOST>";

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    domain_to_id: HashMap<String, usize>,
    id_to_domain: Vec<String>,
    host_to_id: HashMap<String, usize>,
    id_to_host: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    host_specials: Vec<String>,
    domains: Vec<String>,
    hosts: Vec<String>,
}

impl Vocabulary {
    /// Keeps the `max_domains` most frequent domains (ties broken
    /// lexicographically) and every observed host, hosts sorted by name.
    pub fn build(corpus: &[RawSequence], max_domains: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if max_domains == 0 {
            return Err(Error::BadConfig("max_domains must be >= 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut hosts = BTreeSet::new();
        for seq in corpus {
            hosts.insert(seq.host.as_str());
            for d in seq.domains() {
                *counts.entry(d).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_domains);
        Ok(Self::from_lists(
            ranked.into_iter().map(|(d, _)| d.to_string()).collect(),
            hosts.into_iter().map(str::to_string).collect(),
        ))
    }

    /// Builds from ranked real-domain and host lists (specials are prepended).
    pub fn from_lists(domains: Vec<String>, hosts: Vec<String>) -> Self {
        let id_to_domain: Vec<String> = [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN]
            .into_iter()
            .map(str::to_string)
            .chain(domains)
            .collect();
        let id_to_host: Vec<String> = std::iter::once(UNK_HOST_TOKEN.to_string())
            .chain(hosts)
            .collect();
        let domain_to_id = id_to_domain
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i))
            .collect();
        let host_to_id = id_to_host
            .iter()
            .enumerate()
            .map(|(i, h)| (h.clone(), i))
            .collect();
        Self {
            domain_to_id,
            id_to_domain,
            host_to_id,
            id_to_host,
        }
    }

    /// Domain vocabulary size including specials.
    pub fn domain_vocab_size(&self) -> usize {
        self.id_to_domain.len()
    }

    pub fn host_vocab_size(&self) -> usize {
        self.id_to_host.len()
    }

    pub fn num_real_domains(&self) -> usize {
        self.id_to_domain.len() - NUM_DOMAIN_SPECIALS
    }

    pub fn real_domain_ids(&self) -> std::ops::Range<usize> {
        NUM_DOMAIN_SPECIALS..self.id_to_domain.len()
    }

    pub fn domain_id(&self, domain: &str) -> usize {
        self.domain_to_id.get(domain).copied().unwrap_or(UNK)
    }

    pub fn lookup_domain(&self, domain: &str) -> Option<usize> {
        self.domain_to_id
            .get(domain)
            .copied()
            .filter(|&i| i >= NUM_DOMAIN_SPECIALS)
    }

    pub fn host_id(&self, host: &str) -> usize {
        self.host_to_id.get(host).copied().unwrap_or(UNK_HOST)
    }

    pub fn domain(&self, id: usize) -> Option<&str> {
        self.id_to_domain.get(id).map(String::as_str)
    }

    pub fn host(&self, id: usize) -> Option<&str> {
        self.id_to_host.get(id).map(String::as_str)
    }

    /// Right-pads to `max_len` with PAD; unknown domains map to UNK and
    /// unknown hosts to UNK_HOST. PAD positions carry UNK_HOST.
    pub fn tokenize(&self, seq: &RawSequence, max_len: usize) -> Result<TokenSequence> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        if seq.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: max_len,
            });
        }
        let host = self.host_id(&seq.host);
        let mut host_ids = vec![UNK_HOST; max_len];
        let mut domain_ids = vec![PAD; max_len];
        for (i, d) in seq.domains().enumerate() {
            host_ids[i] = host;
            domain_ids[i] = self.domain_id(d);
        }
        Ok(TokenSequence {
            host_ids,
            domain_ids,
            len: seq.len(),
        })
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            version: FORMAT_VERSION,
            specials: self.id_to_domain[..NUM_DOMAIN_SPECIALS].to_vec(),
            host_specials: self.id_to_host[..NUM_HOST_SPECIALS].to_vec(),
            domains: self.id_to_domain[NUM_DOMAIN_SPECIALS..].to_vec(),
            hosts: self.id_to_host[NUM_HOST_SPECIALS..].to_vec(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(text)?;
        if f.version != FORMAT_VERSION {
            return Err(Error::BadConfig(format!(
                "unsupported vocabulary version {}",
                f.version
            )));
        }
        Ok(Self::from_lists(f.domains, f.hosts))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub host_ids: Vec<usize>,
    pub domain_ids: Vec<usize>,
    /// Number of real (non-PAD) positions.
    pub len: usize,
}

impl TokenSequence {
    pub fn capacity(&self) -> usize {
        self.domain_ids.len()
    }

    /// Reorders positions: entry `i` moves to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut host_ids = vec![0; self.capacity()];
        let mut domain_ids = vec![0; self.capacity()];
        for (i, &p) in perm.iter().enumerate() {
            host_ids[p] = self.host_ids[i];
            domain_ids[p] = self.domain_ids[i];
        }
        Self {
            host_ids,
            domain_ids,
            len: self.len,
        }
    }

    pub fn is_pad(&self, pos: usize) -> bool {
        self.domain_ids[pos] == PAD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    /// Per-position selection probability.
    pub p: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_same: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            p: 0.10,
            p_mask: 0.80,
            p_random: 0.10,
            p_same: 0.10,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if ![self.p, self.p_mask, self.p_random, self.p_same]
            .into_iter()
            .all(in_unit)
        {
            return Err(Error::BadProbabilities(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let total = self.p_mask + self.p_random + self.p_same;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::BadProbabilities(format!(
                "corruption split sums to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    Mask,
    Random,
    Same,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingOutcome {
    pub host_ids: Vec<usize>,
    pub input_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub masked_positions: Vec<bool>,
    /// How each selected position was corrupted (None where unselected).
    pub corruption: Vec<Option<Corruption>>,
    pub len: usize,
}

impl MaskingOutcome {
    pub fn masked_count(&self) -> usize {
        self.masked_positions.iter().filter(|&&m| m).count()
    }
}

/// Selects each real position with probability `p`; selected positions are
/// replaced by MASK, a uniformly drawn real domain, or left unchanged. When
/// nothing is selected, position 0 is forced. `num_domains` is the domain
/// vocabulary size including specials.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    seq: &TokenSequence,
    cfg: &MaskingConfig,
    num_domains: usize,
    rng: &mut R,
) -> Result<MaskingOutcome> {
    cfg.validate()?;
    if seq.len == 0 {
        return Err(Error::EmptySequence);
    }
    let cap = seq.capacity();
    let mut input_ids = seq.domain_ids.clone();
    let mut masked_positions = vec![false; cap];
    let mut corruption = vec![None; cap];
    for m in masked_positions.iter_mut().take(seq.len) {
        *m = rng.random::<f64>() < cfg.p;
    }
    if !masked_positions.iter().any(|&m| m) {
        masked_positions[0] = true;
    }
    let has_real = num_domains > NUM_DOMAIN_SPECIALS;
    for i in 0..seq.len {
        if !masked_positions[i] {
            continue;
        }
        let u = rng.random::<f64>();
        let kind = if u < cfg.p_mask {
            Corruption::Mask
        } else if u < cfg.p_mask + cfg.p_random && has_real {
            Corruption::Random
        } else {
            Corruption::Same
        };
        match kind {
            Corruption::Mask => input_ids[i] = MASK,
            Corruption::Random => input_ids[i] = rng.random_range(NUM_DOMAIN_SPECIALS..num_domains),
            Corruption::Same => {}
        }
        corruption[i] = Some(kind);
    }
    Ok(MaskingOutcome {
        host_ids: seq.host_ids.clone(),
        input_ids,
        target_ids: seq.domain_ids.clone(),
        masked_positions,
        corruption,
        len: seq.len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(host: &str, doms: &[&str]) -> RawSequence {
        RawSequence {
            host: host.into(),
            queries: doms
                .iter()
                .enumerate()
                .map(|(i, d)| (i as f64, d.to_string()))
                .collect(),
            start: 0,
        }
    }

    fn corpus() -> Vec<RawSequence> {
        vec![
            raw("h1", &["a", "a", "b", "a"]),
            raw("h2", &["a", "b", "c", "b", "a"]),
        ]
    }

    #[test]
    fn frequency_ranking_and_unk() {
        let v = Vocabulary::build(&corpus(), 2).unwrap();
        assert_eq!(v.domain_id("a"), 3);
        assert_eq!(v.domain_id("b"), 4);
        assert_eq!(v.domain_id("c"), UNK);
        assert_eq!(v.domain_vocab_size(), 5);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocabulary::build(&[raw("h", &["zeta", "alpha"])], 10).unwrap();
        assert!(v.domain_id("alpha") < v.domain_id("zeta"));
    }

    #[test]
    fn build_is_order_invariant() {
        let mut c = corpus();
        let a = Vocabulary::build(&c, 10).unwrap();
        c.reverse();
        assert_eq!(Vocabulary::build(&c, 10).unwrap(), a);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Vocabulary::build(&[], 5), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn tokenize_pads_and_maps_unknowns() {
        let v = Vocabulary::from_lists(vec!["a.com".into()], vec!["h".into()]);
        let t = v.tokenize(&raw("h", &["a.com", "zzz.unseen"]), 4).unwrap();
        assert_eq!(t.domain_ids, vec![3, UNK, PAD, PAD]);
        assert_eq!(t.len, 2);
        assert_eq!(t.host_ids, vec![1, 1, UNK_HOST, UNK_HOST]);
        assert!(matches!(
            v.tokenize(&raw("h", &[]), 4),
            Err(Error::EmptySequence)
        ));
        assert!(matches!(
            v.tokenize(&raw("h", &["a"; 5]), 4),
            Err(Error::SequenceTooLong { .. })
        ));
        let full = v.tokenize(&raw("x", &["a.com"; 4]), 4).unwrap();
        assert!(!full.domain_ids.contains(&PAD));
        assert_eq!(full.host_ids[0], UNK_HOST);
    }

    #[test]
    fn json_round_trip_and_hash() {
        let v = Vocabulary::build(&corpus(), 10).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        let other = Vocabulary::build(&corpus(), 1).unwrap();
        assert_ne!(other.hash(), v.hash());
    }

    fn token_seq(len: usize, cap: usize) -> TokenSequence {
        let mut domain_ids = vec![PAD; cap];
        for (i, d) in domain_ids.iter_mut().take(len).enumerate() {
            *d = 3 + i % 5;
        }
        TokenSequence {
            host_ids: vec![1; cap],
            domain_ids,
            len,
        }
    }

    #[test]
    fn full_masking() {
        let cfg = MaskingConfig {
            p: 1.0,
            p_mask: 1.0,
            p_random: 0.0,
            p_same: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = apply_mlm_mask(&token_seq(5, 8), &cfg, 10, &mut rng).unwrap();
        assert_eq!(&out.input_ids[..5], &[MASK; 5]);
        assert_eq!(
            out.masked_positions,
            [vec![true; 5], vec![false; 3]].concat()
        );
        assert_eq!(out.target_ids, token_seq(5, 8).domain_ids);
    }

    #[test]
    fn forced_selection_when_p_is_zero() {
        let cfg = MaskingConfig {
            p: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = apply_mlm_mask(&token_seq(5, 8), &cfg, 10, &mut rng).unwrap();
        assert_eq!(out.masked_count(), 1);
        assert!(out.masked_positions[0]);
    }

    #[test]
    fn bad_probabilities() {
        let cfg = MaskingConfig {
            p: 0.1,
            p_mask: 0.9,
            p_random: 0.1,
            p_same: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            apply_mlm_mask(&token_seq(2, 4), &cfg, 10, &mut rng),
            Err(Error::BadProbabilities(_))
        ));
    }

    #[test]
    fn same_seed_same_masks() {
        let cfg = MaskingConfig {
            p: 0.5,
            ..Default::default()
        };
        let a = apply_mlm_mask(
            &token_seq(8, 8),
            &cfg,
            20,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = apply_mlm_mask(
            &token_seq(8, 8),
            &cfg,
            20,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unmasked_positions_keep_inputs() {
        let cfg = MaskingConfig {
            p: 0.3,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let seq = token_seq(6, 8);
            let out = apply_mlm_mask(&seq, &cfg, 12, &mut rng).unwrap();
            for i in 0..8 {
                if !out.masked_positions[i] {
                    assert_eq!(out.input_ids[i], out.target_ids[i]);
                }
                if let Some(Corruption::Random) = out.corruption[i] {
                    assert!(out.input_ids[i] >= NUM_DOMAIN_SPECIALS);
                }
            }
        }
    }
}
