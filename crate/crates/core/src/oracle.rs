//! Deliberately naive reference implementations. They share no code with the
//! optimized paths and exist only to be compared against them.

use crate::error::{Error, Result};
use crate::merge::{cosine_similarity, Metric, MergeResult, MergedTokens, Tokens};
use crate::bitvec::BitVector;
use ndarray::Array2;

/// Bit `i` is set iff `values[i] > 0`.
pub fn sign_bits(values: &[f64]) -> Vec<bool> {
    values.iter().map(|&v| v > 0.0).collect()
}

/// LSB-first packing, one bit at a time.
pub fn pack_words(bits: &[bool]) -> Vec<u64> {
    let mut words = vec![0u64; bits.len().div_ceil(64)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    words
}

/// Number of positions whose signs differ.
pub fn hamming(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| (**x > 0.0) != (**y > 0.0)).count()
}

/// Scale and bits of the RMS-normalized vector `h / rms(h) * w`.
pub fn binarize(h: &[f64], w: &[f64], eps: f64) -> (Vec<bool>, f64) {
    let mut sq = 0.0;
    for v in h {
        sq += v * v;
    }
    let scale = (sq / h.len() as f64 + eps).sqrt();
    let bits = h.iter().zip(w).map(|(v, wi)| v / scale * wi > 0.0).collect();
    (bits, scale)
}

fn score(tokens: &Tokens, metric: Metric, a: usize, b: usize) -> Result<f64> {
    match (tokens, metric) {
        (Tokens::Binary(t), Metric::Hamming) => {
            let (x, y) = (&t[a], &t[b]);
            let d = (0..x.dim()).filter(|&i| x.get(i) != y.get(i)).count();
            Ok(-(d as f64))
        }
        (Tokens::Dense(x), Metric::Cosine) => Ok(cosine_similarity(x.row(a), x.row(b))),
        _ => Err(Error::invalid("metric does not match token kind")),
    }
}

/// Enumerates every A-to-B edge, lets each unprotected even-position token
/// keep its best one, accepts the best `floor(r n)` of those and averages
/// each group weighted by `sizes`.
pub fn merge(tokens: Tokens, sizes: &[usize], r: f64, metric: Metric, protected: &[usize]) -> Result<MergeResult> {
    let n = tokens.len();
    let mut edges = Vec::new();
    for a in (0..n).step_by(2) {
        if protected.contains(&a) {
            continue;
        }
        for b in (1..n).step_by(2) {
            edges.push((score(&tokens, metric, a, b)?, a, b));
        }
    }
    edges.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut proposals = Vec::new();
    for e in &edges {
        if !proposals.iter().any(|p: &(f64, usize, usize)| p.1 == e.1) {
            proposals.push(*e);
        }
    }
    let budget = ((r * n as f64) + 1e-9).floor() as usize;
    let accepted = &proposals[..budget.min(proposals.len())];

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for b in (1..n).step_by(2) {
        let mut g = vec![b];
        g.extend(accepted.iter().filter(|e| e.2 == b).map(|e| e.1));
        g.sort();
        groups.push(g);
    }
    for a in (0..n).step_by(2) {
        if !accepted.iter().any(|e| e.1 == a) {
            groups.push(vec![a]);
        }
    }
    let out_sizes: Vec<usize> = groups.iter().map(|g| g.iter().map(|&i| sizes[i]).sum()).collect();
    let merged = match tokens {
        Tokens::Binary(t) => {
            let dim = t[0].dim();
            MergedTokens::Binary(
                groups
                    .iter()
                    .map(|g| {
                        BitVector::from_signs((0..dim).map(|i| {
                            let s: f64 = g.iter().map(|&j| sizes[j] as f64 * t[j].sign(i)).sum();
                            s > 0.0
                        }))
                    })
                    .collect(),
            )
        }
        Tokens::Dense(x) => {
            let mut out = Array2::zeros((groups.len(), x.ncols()));
            for (gi, g) in groups.iter().enumerate() {
                let total: f64 = g.iter().map(|&j| sizes[j] as f64).sum();
                for c in 0..x.ncols() {
                    let mut acc = 0.0;
                    for &j in g {
                        acc += sizes[j] as f64 * x[[j, c]];
                    }
                    out[[gi, c]] = acc / total;
                }
            }
            MergedTokens::Dense(out)
        }
    };
    Ok(MergeResult { merged_tokens: merged, merge_map: groups, sizes: out_sizes })
}
