//! Bipartite soft-matching token merge.
//!
//! Tokens at even positions (set A) each propose one edge to their most
//! similar token at an odd position (set B). The `floor(r * n)` best edges
//! are kept and every B token is merged with the A tokens pointing at it by a
//! size-weighted mean. The same routine serves offline compression (Hamming
//! distance on bit vectors) and runtime compression (cosine similarity on
//! continuous states).
//!
//! Output order is B tokens (merged or not) in original order, followed by
//! the unmerged A tokens in original order.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::bitvec::{self, BitVector};
use crate::error::{Error, Result};

/// Similarity used to rank candidate edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    /// Smaller Hamming distance is more similar. Bit vectors only.
    Hamming,
    /// Larger cosine similarity is more similar. Continuous vectors only.
    Cosine,
}

/// Borrowed input tokens.
#[derive(Clone, Copy, Debug)]
pub enum Tokens<'a> {
    Binary(&'a [BitVector]),
    /// One token per row.
    Dense(ArrayView2<'a, f64>),
}

impl Tokens<'_> {
    pub fn len(&self) -> usize {
        match self {
            Tokens::Binary(b) => b.len(),
            Tokens::Dense(x) => x.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MergedTokens {
    Binary(Vec<BitVector>),
    Dense(Array2<f64>),
}

impl MergedTokens {
    pub fn len(&self) -> usize {
        match self {
            MergedTokens::Binary(b) => b.len(),
            MergedTokens::Dense(x) => x.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeResult {
    pub merged_tokens: MergedTokens,
    /// Input indices absorbed by each output token, ascending.
    pub merge_map: Vec<Vec<usize>>,
    /// Total absorbed size per output token.
    pub sizes: Vec<usize>,
}

/// A candidate edge from an A token to a B token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// Higher is more similar.
    pub score: f64,
}

/// Number of edges accepted for ratio `r` over `n` tokens: `floor(r * n)`.
///
/// A tiny slack absorbs representation error in ratios such as 1/3.
pub fn edge_budget(r: f64, n: usize) -> usize {
    (r * n as f64 + 1e-9).floor() as usize
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&r) {
        return Err(Error::invalid(format!("merge ratio {r} outside [0, 0.5]")));
    }
    Ok(())
}

/// Cosine similarity; a zero vector has similarity 0 to everything.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Ranks edges by score, breaking ties toward lower source then lower target.
pub fn rank_edges(edges: &mut [Edge]) {
    edges.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then(x.src.cmp(&y.src))
            .then(x.dst.cmp(&y.dst))
    });
}

/// Turns accepted edges into output groups in gather order.
fn groups_from_edges(n: usize, accepted: &[Edge]) -> Vec<Vec<usize>> {
    let mut target_of = vec![None; n];
    for e in accepted {
        target_of[e.src] = Some(e.dst);
    }
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(n - accepted.len());
    let mut slot = vec![usize::MAX; n];
    for b in (1..n).step_by(2) {
        slot[b] = out.len();
        out.push(vec![b]);
    }
    for (a, t) in target_of.iter().enumerate().step_by(2) {
        if let Some(b) = t {
            out[slot[*b]].push(a);
        }
    }
    for (a, t) in target_of.iter().enumerate().step_by(2) {
        if t.is_none() {
            out.push(vec![a]);
        }
    }
    for g in &mut out {
        g.sort_unstable();
    }
    out
}

fn proposers(n: usize, protected: &[bool]) -> Vec<usize> {
    (0..n).step_by(2).filter(|&a| !protected[a]).collect()
}

fn protected_mask(n: usize, protected: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; n];
    for &p in protected {
        if p >= n {
            return Err(Error::invalid(format!(
                "protected index {p} out of range for {n} tokens"
            )));
        }
        mask[p] = true;
    }
    Ok(mask)
}

fn binary_proposals(tokens: &[BitVector], protected: &[bool]) -> Vec<Edge> {
    let n = tokens.len();
    if n < 2 {
        return Vec::new();
    }
    proposers(n, protected)
        .into_par_iter()
        .map(|a| {
            let mut best = (usize::MAX, 1usize);
            for b in (1..n).step_by(2) {
                let d = tokens[a].hamming_unchecked(&tokens[b]);
                if d < best.0 {
                    best = (d, b);
                }
            }
            Edge {
                src: a,
                dst: best.1,
                score: -(best.0 as f64),
            }
        })
        .collect()
}

fn dense_proposals(x: ArrayView2<f64>, protected: &[bool]) -> Vec<Edge> {
    let n = x.nrows();
    if n < 2 {
        return Vec::new();
    }
    let srcs = proposers(n, protected);
    if srcs.is_empty() {
        return Vec::new();
    }
    let dsts: Vec<usize> = (1..n).step_by(2).collect();
    let unit = |rows: &[usize]| {
        let mut m = x.select(Axis(0), rows);
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        m
    };
    let a = unit(&srcs);
    let b = unit(&dsts);
    let sims = a.dot(&b.t());
    srcs.iter()
        .zip(sims.rows())
        .map(|(&src, row)| {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for (j, &s) in row.iter().enumerate() {
                if s.total_cmp(&best.0) == Ordering::Greater {
                    best = (s, j);
                }
            }
            Edge {
                src,
                dst: dsts[best.1],
                score: best.0,
            }
        })
        .collect()
}

/// Plans a merge from proposals: ranks them and keeps the top `floor(r * n)`.
fn plan(n: usize, mut proposals: Vec<Edge>, r: f64) -> Vec<Vec<usize>> {
    rank_edges(&mut proposals);
    let keep = edge_budget(r, n).min(proposals.len());
    groups_from_edges(n, &proposals[..keep])
}

fn check_sizes(n: usize, sizes: &[usize]) -> Result<()> {
    if sizes.len() != n {
        return Err(Error::invalid(format!(
            "{} sizes supplied for {n} tokens",
            sizes.len()
        )));
    }
    Ok(())
}

/// Merge with every input token of size 1.
pub fn bipartite_merge(
    tokens: Tokens,
    r: f64,
    metric: Metric,
    protected: &[usize],
) -> Result<MergeResult> {
    let sizes = vec![1; tokens.len()];
    bipartite_merge_sized(tokens, &sizes, r, metric, protected)
}

/// Merge where each input token already stands for `sizes[i]` original tokens.
pub fn bipartite_merge_sized(
    tokens: Tokens,
    sizes: &[usize],
    r: f64,
    metric: Metric,
    protected: &[usize],
) -> Result<MergeResult> {
    check_ratio(r)?;
    let n = tokens.len();
    if n == 0 {
        return Err(Error::invalid("bipartite_merge on an empty token set"));
    }
    check_sizes(n, sizes)?;
    let mask = protected_mask(n, protected)?;
    match (tokens, metric) {
        (Tokens::Binary(bits), Metric::Hamming) => {
            let dim = bits[0].dim();
            if bits.iter().any(|b| b.dim() != dim) {
                return Err(Error::invalid("bit vectors of mixed dimension"));
            }
            let groups = plan(n, binary_proposals(bits, &mask), r);
            let merged = groups
                .iter()
                .map(|g| bitvec::weighted_sign_mean(g.iter().map(|&i| (&bits[i], sizes[i] as f64))))
                .collect::<Result<Vec<_>>>()?;
            let out_sizes = group_sizes(&groups, sizes);
            Ok(MergeResult {
                merged_tokens: MergedTokens::Binary(merged),
                merge_map: groups,
                sizes: out_sizes,
            })
        }
        (Tokens::Dense(x), Metric::Cosine) => {
            let groups = plan(n, dense_proposals(x, &mask), r);
            let merged = weighted_rows(x, &groups, sizes);
            let out_sizes = group_sizes(&groups, sizes);
            Ok(MergeResult {
                merged_tokens: MergedTokens::Dense(merged),
                merge_map: groups,
                sizes: out_sizes,
            })
        }
        (Tokens::Binary(_), Metric::Cosine) => Err(Error::invalid(
            "cosine similarity is not defined for bit vectors; use Hamming",
        )),
        (Tokens::Dense(_), Metric::Hamming) => Err(Error::invalid(
            "Hamming distance is not defined for continuous vectors; use cosine",
        )),
    }
}

fn group_sizes(groups: &[Vec<usize>], sizes: &[usize]) -> Vec<usize> {
    groups
        .iter()
        .map(|g| g.iter().map(|&i| sizes[i]).sum())
        .collect()
}

fn weighted_rows(x: ArrayView2<f64>, groups: &[Vec<usize>], sizes: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((groups.len(), x.ncols()));
    for (mut row, g) in out.rows_mut().into_iter().zip(groups) {
        if let [single] = g.as_slice() {
            row.assign(&x.row(*single));
            continue;
        }
        let total: f64 = g.iter().map(|&i| sizes[i] as f64).sum();
        for &i in g {
            row.scaled_add(sizes[i] as f64 / total, &x.row(i));
        }
    }
    out
}

/// Runtime merge state for one sequence of continuous token states.
#[derive(Clone, Debug)]
pub struct DenseMerge {
    pub states: Array2<f64>,
    pub sizes: Vec<usize>,
    pub protected: Vec<bool>,
}

impl DenseMerge {
    pub fn new(states: Array2<f64>, protected: Vec<bool>) -> Self {
        let n = states.nrows();
        assert_eq!(protected.len(), n);
        Self {
            states,
            sizes: vec![1; n],
            protected,
        }
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One cosine merge step at ratio `r`, carrying sizes and protection along.
    pub fn merge(&mut self, r: f64) {
        let n = self.len();
        if n < 2 || edge_budget(r, n) == 0 {
            return;
        }
        let groups = plan(n, dense_proposals(self.states.view(), &self.protected), r);
        self.states = weighted_rows(self.states.view(), &groups, &self.sizes);
        self.protected = groups
            .iter()
            .map(|g| g.iter().any(|&i| self.protected[i]))
            .collect();
        self.sizes = group_sizes(&groups, &self.sizes);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_ratio_is_identity() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let res = bipartite_merge(Tokens::Dense(x.view()), 0.0, Metric::Cosine, &[]).unwrap();
        assert_eq!(res.merge_map.len(), 3);
        assert!(res.merge_map.iter().all(|g| g.len() == 1));
        // B first, then A.
        assert_eq!(res.merge_map, vec![vec![1], vec![0], vec![2]]);
        let MergedTokens::Dense(m) = res.merged_tokens else { panic!() };
        assert_eq!(m.row(0), x.row(1));
    }

    #[test]
    fn identical_tokens_pair_up() {
        let t = vec![BitVector::from_signs([true, false]); 4];
        let res = bipartite_merge(Tokens::Binary(&t), 0.5, Metric::Hamming, &[]).unwrap();
        assert_eq!(res.merged_tokens.len(), 2);
        // Both A tokens tie at distance 0 to B[1]; ties go to the lower B index.
        assert_eq!(res.merge_map, vec![vec![0, 1, 2], vec![3]]);
        assert_eq!(res.sizes, vec![3, 1]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let t = vec![BitVector::zeros(4); 3];
        assert!(bipartite_merge(Tokens::Binary(&t), 0.6, Metric::Hamming, &[]).is_err());
        assert!(bipartite_merge(Tokens::Binary(&t), -0.1, Metric::Hamming, &[]).is_err());
        assert!(bipartite_merge(Tokens::Binary(&t), 0.2, Metric::Cosine, &[]).is_err());
        let x = Array2::<f64>::zeros((3, 2));
        assert!(bipartite_merge(Tokens::Dense(x.view()), 0.2, Metric::Hamming, &[]).is_err());
        assert!(bipartite_merge(Tokens::Binary(&t), 0.2, Metric::Hamming, &[5]).is_err());
        assert!(bipartite_merge(Tokens::Binary(&[]), 0.2, Metric::Hamming, &[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let v = array![0.3, -1.2, 2.0];
        assert!((cosine_similarity(v.view(), v.view()) - 1.0).abs() < 1e-12);
        let (a, b) = (array![1.0, 0.0], array![0.0, 1.0]);
        assert_eq!(cosine_similarity(a.view(), b.view()), 0.0);
        let z = array![0.0, 0.0];
        assert_eq!(cosine_similarity(z.view(), a.view()), 0.0);
    }

    #[test]
    fn protected_never_merged_away() {
        let x = array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let res = bipartite_merge(Tokens::Dense(x.view()), 0.5, Metric::Cosine, &[0]).unwrap();
        assert_eq!(res.merge_map.len(), 3);
        assert!(res.merge_map.contains(&vec![0]));
    }

    #[test]
    fn dense_merge_tracks_sizes() {
        let x = array![[1.0, 0.0], [1.0, 0.1], [0.0, 1.0], [0.1, 1.0], [1.0, 1.0]];
        let mut m = DenseMerge::new(x, vec![false; 5]);
        m.merge(0.5);
        assert_eq!(m.len(), 3);
        assert_eq!(m.sizes.iter().sum::<usize>(), 5);
        m.merge(0.5);
        assert_eq!(m.len(), 2);
        assert_eq!(m.sizes.iter().sum::<usize>(), 5);
    }
}
