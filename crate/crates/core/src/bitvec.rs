//! Bit-packed ±1 vectors.
//!
//! A [`BitVector`] stores `dim` signs in 64-bit words, least-significant bit
//! first. Bit 1 encodes +1 and bit 0 encodes −1. Padding bits past `dim` in
//! the final word are always zero, so two vectors with the same signs have
//! identical words and equality is a plain word comparison.

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

/// Packed ±1 vector of logical length `dim`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitVector {
    dim: usize,
    words: Vec<u64>,
}

/// Number of 64-bit words needed for `dim` bits.
pub fn words_for(dim: usize) -> usize {
    dim.div_ceil(WORD_BITS)
}

fn tail_mask(dim: usize) -> u64 {
    match dim % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BitVector {
    /// All bits clear (every element −1).
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            words: vec![0; words_for(dim)],
        }
    }

    /// Build from raw words; rejects a wrong word count or set padding bits.
    pub fn from_words(dim: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(dim) {
            return Err(Error::invalid(format!(
                "{} words cannot hold exactly {dim} bits",
                words.len()
            )));
        }
        if let Some(last) = words.last() {
            if last & !tail_mask(dim) != 0 {
                return Err(Error::invalid("padding bits must be zero"));
            }
        }
        Ok(Self { dim, words })
    }

    /// Build from per-element signs (`true` is +1).
    pub fn from_signs(signs: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut dim = 0;
        for s in signs {
            if dim % WORD_BITS == 0 {
                words.push(0);
            }
            if s {
                *words.last_mut().unwrap() |= 1u64 << (dim % WORD_BITS);
            }
            dim += 1;
        }
        Self { dim, words }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `true` when element `i` is +1.
    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.dim, "bit index {i} out of range for dim {}", self.dim);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Element `i` as ±1.
    #[inline]
    pub fn sign(&self, i: usize) -> f64 {
        if self.get(i) {
            1.0
        } else {
            -1.0
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Expands to ±1.0 values.
    pub fn unpack(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.sign(i)).collect()
    }

    /// Number of differing positions. Errors when dimensions differ.
    pub fn hamming(&self, other: &BitVector) -> Result<usize> {
        if self.dim != other.dim {
            return Err(Error::invalid(format!(
                "hamming on dims {} and {}",
                self.dim, other.dim
            )));
        }
        Ok(self.hamming_unchecked(other))
    }

    #[inline]
    pub(crate) fn hamming_unchecked(&self, other: &BitVector) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }
}

/// Packs reals by the strict sign rule: bit `i` is set iff `values[i] > 0`.
pub fn pack(values: &[f64], dim: usize) -> Result<BitVector> {
    if values.len() != dim {
        return Err(Error::invalid(format!(
            "pack expected {dim} values, got {}",
            values.len()
        )));
    }
    let mut words = vec![0u64; words_for(dim)];
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 {
            words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
        }
    }
    Ok(BitVector { dim, words })
}

/// Inverse of [`pack`] on ±1 inputs.
pub fn unpack(v: &BitVector) -> Vec<f64> {
    v.unpack()
}

pub fn hamming(a: &BitVector, b: &BitVector) -> Result<usize> {
    a.hamming(b)
}

/// Sign of the elementwise mean of a nonempty set of vectors; ties go to −1.
pub fn sign_mean<'a, I>(reps: I) -> Result<BitVector>
where
    I: IntoIterator<Item = &'a BitVector>,
{
    weighted_sign_mean(reps.into_iter().map(|r| (r, 1.0)))
}

/// Sign of the weighted elementwise mean; ties go to −1.
pub fn weighted_sign_mean<'a, I>(reps: I) -> Result<BitVector>
where
    I: IntoIterator<Item = (&'a BitVector, f64)>,
{
    let mut iter = reps.into_iter().peekable();
    let dim = match iter.peek() {
        Some((first, _)) => first.dim,
        None => return Err(Error::invalid("sign_mean of an empty set")),
    };
    // Running weight of +1 minus weight of −1 per position.
    let mut balance = vec![0.0f64; dim];
    for (rep, weight) in iter {
        if rep.dim != dim {
            return Err(Error::invalid(format!(
                "sign_mean over mixed dims {dim} and {}",
                rep.dim
            )));
        }
        for (i, b) in balance.iter_mut().enumerate() {
            if rep.get(i) {
                *b += weight;
            } else {
                *b -= weight;
            }
        }
    }
    pack(&balance, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> BitVector {
        BitVector::from_signs(s.chars().map(|c| c == '1'))
    }

    #[test]
    fn pack_sign_rule() {
        let v = pack(&[1.0, -2.0, 0.5], 3).unwrap();
        assert_eq!(v, bits("101"));
        assert_eq!(pack(&[0.0, 0.0], 2).unwrap(), bits("00"));
        assert!(matches!(pack(&[1.0], 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unpack_definition() {
        assert_eq!(unpack(&bits("101")), vec![1.0, -1.0, 1.0]);
        assert_eq!(unpack(&BitVector::zeros(4)), vec![-1.0; 4]);
    }

    #[test]
    fn hamming_small() {
        assert_eq!(hamming(&bits("101"), &bits("101")).unwrap(), 0);
        assert_eq!(hamming(&bits("101"), &bits("010")).unwrap(), 3);
        assert!(hamming(&bits("1"), &bits("10")).is_err());
    }

    #[test]
    fn sign_mean_cases() {
        assert_eq!(sign_mean([&bits("101")]).unwrap(), bits("101"));
        let set = [bits("11"), bits("11"), bits("00")];
        assert_eq!(sign_mean(set.iter()).unwrap(), bits("11"));
        let ties = [bits("10"), bits("01")];
        assert_eq!(sign_mean(ties.iter()).unwrap(), bits("00"));
        assert!(sign_mean(std::iter::empty()).is_err());
        assert!(sign_mean([&bits("1"), &bits("11")]).is_err());
    }

    #[test]
    fn from_words_rejects_padding() {
        assert!(BitVector::from_words(3, vec![0b1000]).is_err());
        assert!(BitVector::from_words(3, vec![0b101]).is_ok());
        assert!(BitVector::from_words(65, vec![0]).is_err());
        assert!(BitVector::from_words(64, vec![u64::MAX]).is_ok());
    }

    #[test]
    fn packing_crosses_word_boundary() {
        let vals: Vec<f64> = (0..130).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let v = pack(&vals, 130).unwrap();
        assert_eq!(v.words().len(), 3);
        assert_eq!(v.unpack(), vals);
        assert_eq!(v.words()[2] >> 2, 0);
    }
}
