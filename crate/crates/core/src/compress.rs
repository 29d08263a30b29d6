//! Offline compression of a binarized corpus.
//!
//! Representations are grouped by vocabulary id. Stopword groups collapse to
//! the sign of their mean; every other group is shrunk by one Hamming
//! bipartite merge at ratio `r_o`. Occurrences keep their positions and are
//! re-pointed at the representative that absorbed them.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::binarizer::BinaryTokenRep;
use crate::bitvec::{self, BitVector};
use crate::error::{Error, Result};
use crate::merge::{bipartite_merge_sized, Metric, MergedTokens, Tokens};
use crate::store::{Entry, PassageRecord, TokenStore, INDEX_ENTRY_LEN};

pub const DEFAULT_OFFLINE_RATIO: f64 = 0.2;

/// Compressed representatives of one token and where each old one went.
struct GroupOutcome {
    reps: Vec<BinaryTokenRep>,
    remap: Vec<u32>,
}

fn weighted_scale<'a>(members: impl Iterator<Item = (&'a BinaryTokenRep, usize)>) -> f32 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (rep, w) in members {
        num += rep.scale as f64 * w as f64;
        den += w as f64;
    }
    (num / den) as f32
}

fn collapse(reps: &[BinaryTokenRep], weights: &[usize]) -> Result<GroupOutcome> {
    let bits = bitvec::weighted_sign_mean(
        reps.iter().zip(weights).map(|(r, &w)| (&r.bits, w as f64)),
    )?;
    let scale = weighted_scale(reps.iter().zip(weights.iter().copied()));
    Ok(GroupOutcome {
        reps: vec![BinaryTokenRep::new(bits, scale)?],
        remap: vec![0; reps.len()],
    })
}

fn merge_group(reps: &[BinaryTokenRep], weights: &[usize], r_o: f64) -> Result<GroupOutcome> {
    let bits: Vec<BitVector> = reps.iter().map(|r| r.bits.clone()).collect();
    let res = bipartite_merge_sized(Tokens::Binary(&bits), weights, r_o, Metric::Hamming, &[])?;
    let MergedTokens::Binary(merged) = res.merged_tokens else {
        unreachable!("binary merge yields bit vectors")
    };
    let mut remap = vec![0u32; reps.len()];
    let mut out = Vec::with_capacity(merged.len());
    for (slot, (group, bits)) in res.merge_map.iter().zip(merged).enumerate() {
        for &i in group {
            remap[i] = slot as u32;
        }
        let scale = weighted_scale(group.iter().map(|&i| (&reps[i], weights[i])));
        out.push(BinaryTokenRep::new(bits, scale)?);
    }
    Ok(GroupOutcome { reps: out, remap })
}

/// Compresses a store: stopwords collapse to one representative, other
/// tokens lose `floor(r_o * n)` representatives to bipartite merging.
pub fn compress_corpus(
    store: &TokenStore,
    stopwords: &BTreeSet<u32>,
    r_o: f64,
) -> Result<TokenStore> {
    if !(0.0..=0.5).contains(&r_o) {
        return Err(Error::invalid(format!("offline ratio {r_o} outside [0, 0.5]")));
    }
    if let Some(&bad) = stopwords.iter().find(|&&t| t as usize >= store.vocab_size()) {
        return Err(Error::invalid(format!(
            "stopword id {bad} outside vocabulary of {}",
            store.vocab_size()
        )));
    }

    // Reference counts weight the averages when the input is already compressed.
    let mut refs: Vec<Vec<usize>> = store.vocab_table().iter().map(|r| vec![0; r.len()]).collect();
    for p in store.passages() {
        for e in &p.entries {
            refs[e.token_id as usize][e.rep_index as usize] += 1;
        }
    }
    for counts in &mut refs {
        for c in counts.iter_mut() {
            *c = (*c).max(1);
        }
    }

    let outcomes: Vec<GroupOutcome> = store
        .vocab_table()
        .par_iter()
        .zip(refs.par_iter())
        .enumerate()
        .map(|(t, (reps, weights))| {
            if reps.is_empty() {
                Ok(GroupOutcome { reps: Vec::new(), remap: Vec::new() })
            } else if stopwords.contains(&(t as u32)) {
                collapse(reps, weights)
            } else {
                merge_group(reps, weights, r_o)
            }
        })
        .collect::<Result<_>>()?;

    let passages = store
        .passages()
        .iter()
        .map(|p| PassageRecord {
            passage_id: p.passage_id,
            entries: p
                .entries
                .iter()
                .map(|e| Entry {
                    token_id: e.token_id,
                    rep_index: outcomes[e.token_id as usize].remap[e.rep_index as usize],
                })
                .collect(),
        })
        .collect();
    let vocab = outcomes.into_iter().map(|o| o.reps).collect();
    TokenStore::from_parts(store.d(), true, vocab, passages)
}

/// Storage accounting for a store.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StorageStats {
    pub d: usize,
    pub occurrences: usize,
    pub vectors_stored: usize,
    pub bytes_bits: usize,
    pub bytes_scales: usize,
    pub bytes_index: usize,
    pub total: usize,
    /// Bytes of a float32 copy of every occurrence over `total`.
    pub ratio_vs_float32: f64,
}

pub fn storage_stats(store: &TokenStore) -> StorageStats {
    stats_for(store.d(), store.vectors_stored(), store.occurrences())
}

/// Accounting from counts alone.
pub fn stats_for(d: usize, vectors_stored: usize, occurrences: usize) -> StorageStats {
    let bytes_bits = vectors_stored * d.div_ceil(8);
    let bytes_scales = vectors_stored * 4;
    let bytes_index = occurrences * INDEX_ENTRY_LEN;
    let total = bytes_bits + bytes_scales + bytes_index;
    let ratio_vs_float32 = if total == 0 {
        0.0
    } else {
        (occurrences * d * 4) as f64 / total as f64
    };
    StorageStats {
        d,
        occurrences,
        vectors_stored,
        bytes_bits,
        bytes_scales,
        bytes_index,
        total,
        ratio_vs_float32,
    }
}

impl StorageStats {
    pub const CSV_HEADER: &'static str =
        "d,occurrences,vectors_stored,bytes_bits,bytes_scales,bytes_index,total,ratio_vs_float32";

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "d={}", self.d);
        let _ = writeln!(s, "occurrences={}", self.occurrences);
        let _ = writeln!(s, "vectors_stored={}", self.vectors_stored);
        let _ = writeln!(s, "bytes_bits={}", self.bytes_bits);
        let _ = writeln!(s, "bytes_scales={}", self.bytes_scales);
        let _ = writeln!(s, "bytes_index={}", self.bytes_index);
        let _ = writeln!(s, "total={}", self.total);
        let _ = writeln!(s, "ratio_vs_float32={:.4}", self.ratio_vs_float32);
        s
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.4}",
            self.d,
            self.occurrences,
            self.vectors_stored,
            self.bytes_bits,
            self.bytes_scales,
            self.bytes_index,
            self.total,
            self.ratio_vs_float32
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::StoreBuilder;

    fn rep(bits: u64, d: usize, scale: f32) -> BinaryTokenRep {
        BinaryTokenRep::new(BitVector::from_signs((0..d).map(|i| bits >> i & 1 == 1)), scale)
            .unwrap()
    }

    #[test]
    fn stopword_collapses_to_one() {
        let mut b = StoreBuilder::new(4, 10);
        for p in 0..100u64 {
            b.add_passage(p, &[7], vec![rep(p % 16, 4, 1.0 + (p % 3) as f32)]).unwrap();
        }
        let store = b.build().unwrap();
        let stop = BTreeSet::from([7u32]);
        let c = compress_corpus(&store, &stop, 0.2).unwrap();
        assert_eq!(c.representatives(7).len(), 1);
        assert_eq!(c.occurrences(), 100);
        assert!(c.is_compressed());
        let mean_scale = (0..100).map(|p| 1.0 + (p % 3) as f64).sum::<f64>() / 100.0;
        assert!((c.representatives(7)[0].scale as f64 - mean_scale).abs() < 1e-5);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let mut b = StoreBuilder::new(8, 4);
        b.add_passage(1, &[1, 2, 1], vec![rep(3, 8, 1.0), rep(5, 8, 2.0), rep(3, 8, 1.0)])
            .unwrap();
        let store = b.build().unwrap();
        let c = compress_corpus(&store, &BTreeSet::new(), 0.0).unwrap();
        assert_eq!(c.vectors_stored(), store.vectors_stored());
        assert_eq!(c.lookup(1).unwrap(), store.lookup(1).unwrap());
    }

    #[test]
    fn argument_errors() {
        let store = StoreBuilder::new(8, 4).build().unwrap();
        assert!(compress_corpus(&store, &BTreeSet::from([4]), 0.2).is_err());
        assert!(compress_corpus(&store, &BTreeSet::new(), 0.7).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = stats_for(768, 1, 1);
        assert_eq!(s.bytes_bits, 96);
        assert_eq!(s.bytes_scales, 4);
        assert_eq!(s.bytes_index, 8);
        assert_eq!(stats_for(768, 0, 0), StorageStats { d: 768, ..Default::default() });
        let kv = s.to_kv();
        assert!(kv.contains("bytes_bits=96\n"));
        assert_eq!(StorageStats::CSV_HEADER.split(',').count(), s.to_csv_row().split(',').count());
    }
}
