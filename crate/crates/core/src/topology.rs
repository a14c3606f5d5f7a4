//! Knowledge-based adjacency matrices gating the graph attention.
//!
//! Orientation is row-wise: `a[i][j] = 1` means token `i` may attend to token
//! `j`, matching the row normalization of the masked softmax.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    size: usize,
    cells: Vec<u8>,
}

impl AdjacencyMatrix {
    pub fn identity(size: usize) -> Self {
        let mut m = Self {
            size,
            cells: vec![0; size * size],
        };
        for i in 0..size {
            m.set(i, i, true);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Self {
        let size = rows.len();
        let cells = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| u8::from(v != 0)))
            .collect::<Vec<_>>();
        assert_eq!(cells.len(), size * size, "adjacency rows must be square");
        Self { size, cells }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.size + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.cells[i * self.size + j] = u8::from(v);
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells.chunks(self.size).map(<[u8]>::to_vec).collect()
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.cells[i * self.size..(i + 1) * self.size]
            .iter()
            .map(|&v| usize::from(v))
            .sum()
    }

    /// Row-major 0/1 values as f64 (the attention mask layout).
    pub fn as_mask(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.iter().map(|&v| f64::from(v))
    }

    /// `P A Pᵀ` where `P` moves position `i` to `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.size)?;
        let mut out = Self {
            size: self.size,
            cells: vec![0; self.cells.len()],
        };
        for i in 0..self.size {
            for j in 0..self.size {
                out.set(perm[i], perm[j], self.get(i, j));
            }
        }
        Ok(out)
    }
}

pub fn check_permutation(perm: &[usize], size: usize) -> Result<()> {
    let mut seen = vec![false; size];
    if perm.len() != size {
        return Err(Error::BadPermutation(size));
    }
    for &p in perm {
        if p >= size || std::mem::replace(&mut seen[p], true) {
            return Err(Error::BadPermutation(size));
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn check_len(len: usize, cap: usize) -> Result<()> {
    if len < 1 || len > cap {
        return Err(Error::BadLength { len, cap });
    }
    Ok(())
}

/// Real tokens are fully connected; PAD tokens keep only their self-loop.
pub fn pad_aware_full(len: usize, cap: usize) -> Result<AdjacencyMatrix> {
    custom_from_relation(len, cap, |_, _| true)
}

/// `a[i][j] = related(i, j)` among real tokens, with forced self-loops and the
/// PAD block of [`pad_aware_full`].
pub fn custom_from_relation<F>(len: usize, cap: usize, related: F) -> Result<AdjacencyMatrix>
where
    F: Fn(usize, usize) -> bool,
{
    check_len(len, cap)?;
    let mut m = AdjacencyMatrix::identity(cap);
    for i in 0..len {
        for j in 0..len {
            if i != j && related(i, j) {
                m.set(i, j, true);
            }
        }
    }
    Ok(m)
}

/// Registered domain suffix: the last two labels of the name.
pub fn registered_suffix(domain: &str) -> &str {
    let mut dots = domain.rmatch_indices('.');
    dots.next();
    match dots.next() {
        Some((i, _)) => &domain[i + 1..],
        None => domain,
    }
}

/// Named topologies that can be selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    /// Real tokens fully connected, PAD isolated.
    PadFull,
    /// Tokens connected when they share a registered domain suffix.
    SameSuffix,
    /// Path graph over the real tokens (each token sees its neighbors).
    Path,
    /// Self-loops only.
    SelfOnly,
}

impl std::str::FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pad_full" => Ok(Self::PadFull),
            "same_suffix" => Ok(Self::SameSuffix),
            "path" => Ok(Self::Path),
            "self_only" => Ok(Self::SelfOnly),
            other => Err(Error::UnknownTopology(other.to_string())),
        }
    }
}

impl TopologyKind {
    /// `domains` holds the real tokens in order; its length is the sequence length.
    pub fn build(&self, domains: &[&str], cap: usize) -> Result<AdjacencyMatrix> {
        let len = domains.len();
        match self {
            Self::PadFull => pad_aware_full(len, cap),
            Self::SameSuffix => custom_from_relation(len, cap, |i, j| {
                registered_suffix(domains[i]) == registered_suffix(domains[j])
            }),
            Self::Path => custom_from_relation(len, cap, |i, j| i.abs_diff(j) == 1),
            Self::SelfOnly => custom_from_relation(len, cap, |_, _| false),
        }
    }
}

/// One or more adjacency matrices sharing a size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologySet {
    matrices: Vec<AdjacencyMatrix>,
}

impl TopologySet {
    pub fn new(matrices: Vec<AdjacencyMatrix>) -> Result<Self> {
        let Some(first) = matrices.first() else {
            return Err(Error::BadConfig("topology set must be non-empty".into()));
        };
        let size = first.size();
        if matrices.iter().any(|m| m.size() != size) {
            return Err(Error::ShapeMismatch {
                op: "topology_set",
                detail: "matrices differ in size".into(),
            });
        }
        Ok(Self { matrices })
    }

    pub fn single(m: AdjacencyMatrix) -> Self {
        Self { matrices: vec![m] }
    }

    pub fn matrices(&self) -> &[AdjacencyMatrix] {
        &self.matrices
    }

    pub fn size(&self) -> usize {
        self.matrices[0].size()
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self {
            matrices: self
                .matrices
                .iter()
                .map(|m| m.permute(perm))
                .collect::<Result<_>>()?,
        })
    }

    pub fn build(kinds: &[TopologyKind], domains: &[&str], cap: usize) -> Result<Self> {
        Self::new(
            kinds
                .iter()
                .map(|k| k.build(domains, cap))
                .collect::<Result<_>>()?,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pad_full_block_structure() {
        let m = pad_aware_full(2, 4).unwrap();
        assert_eq!(
            m.rows(),
            vec![
                vec![1, 1, 0, 0],
                vec![1, 1, 0, 0],
                vec![0, 0, 1, 0],
                vec![0, 0, 0, 1]
            ]
        );
        assert!(pad_aware_full(3, 3)
            .unwrap()
            .rows()
            .iter()
            .flatten()
            .all(|&v| v == 1));
        assert_eq!(
            pad_aware_full(1, 2).unwrap().rows(),
            vec![vec![1, 0], vec![0, 1]]
        );
        assert!(matches!(pad_aware_full(0, 2), Err(Error::BadLength { .. })));
        assert!(matches!(pad_aware_full(3, 2), Err(Error::BadLength { .. })));
    }

    #[test]
    fn row_sums() {
        let m = pad_aware_full(5, 8).unwrap();
        for i in 0..8 {
            assert_eq!(m.row_sum(i), if i < 5 { 5 } else { 1 });
        }
    }

    #[test]
    fn permute_fixtures() {
        let a = AdjacencyMatrix::from_rows(&[vec![1, 1], vec![0, 1]]);
        assert_eq!(a.permute(&[0, 1]).unwrap(), a);
        assert_eq!(
            a.permute(&[1, 0]).unwrap().rows(),
            vec![vec![1, 0], vec![1, 1]]
        );
        assert!(matches!(a.permute(&[0, 0]), Err(Error::BadPermutation(2))));
        assert!(matches!(a.permute(&[0]), Err(Error::BadPermutation(2))));
    }

    #[test]
    fn custom_relations() {
        let doms = ["a.x.com", "b.x.com", "c.y.com"];
        let m = TopologyKind::SameSuffix.build(&doms, 4).unwrap();
        assert_eq!(
            m.rows(),
            vec![
                vec![1, 1, 0, 0],
                vec![1, 1, 0, 0],
                vec![0, 0, 1, 0],
                vec![0, 0, 0, 1]
            ]
        );
        assert_eq!(
            custom_from_relation(3, 4, |_, _| false).unwrap(),
            AdjacencyMatrix::identity(4)
        );
        assert_eq!(
            custom_from_relation(3, 4, |_, _| true).unwrap(),
            pad_aware_full(3, 4).unwrap()
        );
    }

    #[test]
    fn suffixes() {
        assert_eq!(registered_suffix("a.b.example.com"), "example.com");
        assert_eq!(registered_suffix("example.com"), "example.com");
        assert_eq!(registered_suffix("localhost"), "localhost");
    }

    #[test]
    fn topology_set_preserves_pad_self_loops() {
        let doms = ["a.x.com", "b.y.com"];
        let set = TopologySet::build(
            &[
                TopologyKind::PadFull,
                TopologyKind::SameSuffix,
                TopologyKind::Path,
            ],
            &doms,
            5,
        )
        .unwrap();
        for m in set.matrices() {
            for i in 2..5 {
                assert_eq!(m.row_sum(i), 1);
                assert!(m.get(i, i));
            }
        }
        assert!(TopologySet::new(vec![]).is_err());
    }

    fn perm_strategy() -> impl Strategy<Value = (usize, Vec<usize>, Vec<u8>)> {
        (1usize..=8).prop_flat_map(|n| {
            (
                Just(n),
                Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
                proptest::collection::vec(0u8..2, n * n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn permute_then_inverse_is_identity((n, perm, cells) in perm_strategy()) {
            let rows: Vec<Vec<u8>> = cells.chunks(n).map(<[u8]>::to_vec).collect();
            let a = AdjacencyMatrix::from_rows(&rows);
            let back = a.permute(&perm).unwrap().permute(&invert_permutation(&perm)).unwrap();
            prop_assert_eq!(back, a);
        }
    }
}
