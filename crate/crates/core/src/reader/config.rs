use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and knobs of the decomposed reader.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReaderConfig {
    /// Hidden size.
    pub d: usize,
    pub heads: usize,
    /// Feed-forward inner size.
    pub d_ff: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Layers `1..=k` of the encoder see a passage alone; `k+1..=n_enc` see
    /// query and passage together.
    pub k: usize,
    pub vocab_size: usize,
    pub max_query_len: usize,
    pub max_passage_len: usize,
    pub max_answer_len: usize,
    /// Runtime merge ratio.
    pub r_p: f64,
    /// Decoder merge period.
    pub g: usize,
    pub seed: u64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            d_ff: 128,
            n_enc: 2,
            n_dec: 2,
            k: 1,
            vocab_size: 64,
            max_query_len: 8,
            max_passage_len: 16,
            max_answer_len: 4,
            r_p: 0.2,
            g: 3,
            seed: 0,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.k == 0 || self.k >= self.n_enc {
            return fail(format!("need 1 <= k < n_enc, got k={} n_enc={}", self.k, self.n_enc));
        }
        if self.n_dec == 0 || self.d_ff == 0 {
            return fail("n_dec and d_ff must be positive".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} leaves no room for special tokens", self.vocab_size));
        }
        if !(0.0..=0.5).contains(&self.r_p) {
            return fail(format!("r_p={} outside [0, 0.5]", self.r_p));
        }
        if self.g == 0 {
            return fail("g must be >= 1".into());
        }
        if self.max_query_len == 0 || self.max_passage_len == 0 || self.max_answer_len == 0 {
            return fail("length limits must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Encoder position of query token `i`.
    pub fn query_position(&self, i: usize) -> usize {
        i
    }

    /// Encoder position of passage token `i`; independent of the query length
    /// so cached passage states never depend on the query.
    pub fn passage_position(&self, i: usize) -> usize {
        self.max_query_len + i
    }

    pub fn encoder_positions(&self) -> usize {
        self.max_query_len + self.max_passage_len
    }
}
