//! Single-file store of binary token representations.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header      magic "BTR1" | version u16 | d u32 | vocab_size u32
//!             | passage_count u64 | flags u32                       (26 bytes)
//! vocabulary  per token id 0..vocab_size:
//!               rep_count u32, then rep_count x (ceil(d/64) x u64 bits, f32 scale)
//! index       per passage: passage_id u64 | token_count u32
//!               | token_count x (token_id u32, rep_index u32)
//! footer      vocab_offset u64 | index_offset u64 | checksum u64
//! ```
//!
//! Bits are packed 64 per word, least-significant bit first. The checksum is
//! 64-bit FNV-1a over every byte before it. Flags bit 0 marks a compressed
//! store; the other bits are reserved and must be zero.

use std::collections::HashMap;
use std::path::Path;

use crate::binarizer::BinaryTokenRep;
use crate::bitvec::{words_for, BitVector};
use crate::checksum::fnv1a64;
use crate::codec::{write_atomic, Cursor, Truncated};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"BTR1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;
pub const FOOTER_LEN: usize = 24;
/// Bytes per passage index entry: token id plus representative index.
pub const INDEX_ENTRY_LEN: usize = 8;
pub const FLAG_COMPRESSED: u32 = 1;

/// One token position of a passage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Entry {
    pub token_id: u32,
    pub rep_index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PassageRecord {
    pub passage_id: u64,
    pub entries: Vec<Entry>,
}

impl PassageRecord {
    pub fn token_count(&self) -> usize {
        self.entries.len()
    }
}

/// In-memory view of a store file.
#[derive(Clone, Debug)]
pub struct TokenStore {
    d: usize,
    vocab_size: usize,
    compressed: bool,
    vocab: Vec<Vec<BinaryTokenRep>>,
    passages: Vec<PassageRecord>,
    by_id: HashMap<u64, usize>,
}

impl PartialEq for TokenStore {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.vocab_size == other.vocab_size
            && self.compressed == other.compressed
            && self.vocab == other.vocab
            && self.passages == other.passages
    }
}

impl TokenStore {
    /// Assembles a store, checking every invariant the file format relies on.
    pub fn from_parts(
        d: usize,
        compressed: bool,
        vocab: Vec<Vec<BinaryTokenRep>>,
        passages: Vec<PassageRecord>,
    ) -> Result<Self> {
        if d == 0 || d > u32::MAX as usize {
            return Err(Error::invalid(format!("unsupported dimension {d}")));
        }
        for (t, reps) in vocab.iter().enumerate() {
            if let Some(bad) = reps.iter().find(|r| r.dim() != d) {
                return Err(Error::invalid(format!(
                    "token {t} has a representative of dim {} in a d={d} store",
                    bad.dim()
                )));
            }
        }
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.passage_id, i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate passage id {}",
                    p.passage_id
                )));
            }
            for e in &p.entries {
                let reps = vocab.get(e.token_id as usize).ok_or_else(|| {
                    Error::invalid(format!(
                        "passage {} references token {} outside vocabulary of {}",
                        p.passage_id,
                        e.token_id,
                        vocab.len()
                    ))
                })?;
                if e.rep_index as usize >= reps.len() {
                    return Err(Error::invalid(format!(
                        "passage {} references representative {} of token {} which has {}",
                        p.passage_id,
                        e.rep_index,
                        e.token_id,
                        reps.len()
                    )));
                }
            }
        }
        Ok(Self {
            d,
            vocab_size: vocab.len(),
            compressed,
            vocab,
            passages,
            by_id,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_compressed(&self) -> bool {
        self.compressed
    }

    pub fn passage_count(&self) -> usize {
        self.passages.len()
    }

    pub fn passages(&self) -> &[PassageRecord] {
        &self.passages
    }

    /// Representatives of one vocabulary token.
    pub fn representatives(&self, token_id: u32) -> &[BinaryTokenRep] {
        self.vocab
            .get(token_id as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn vocab_table(&self) -> &[Vec<BinaryTokenRep>] {
        &self.vocab
    }

    pub fn vectors_stored(&self) -> usize {
        self.vocab.iter().map(Vec::len).sum()
    }

    pub fn occurrences(&self) -> usize {
        self.passages.iter().map(PassageRecord::token_count).sum()
    }

    pub fn record(&self, passage_id: u64) -> Result<&PassageRecord> {
        self.by_id
            .get(&passage_id)
            .map(|&i| &self.passages[i])
            .ok_or_else(|| Error::NotFound(format!("passage {passage_id}")))
    }

    /// Representations of a passage, one per original token, in order.
    pub fn lookup(&self, passage_id: u64) -> Result<Vec<BinaryTokenRep>> {
        let rec = self.record(passage_id)?;
        Ok(rec
            .entries
            .iter()
            .map(|e| self.vocab[e.token_id as usize][e.rep_index as usize].clone())
            .collect())
    }

    /// Serializes to the on-disk layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let words = words_for(self.d);
        let rep_len = words * 8 + 4;
        let cap = HEADER_LEN
            + self.vocab_size * 4
            + self.vectors_stored() * rep_len
            + self.passages.len() * 12
            + self.occurrences() * INDEX_ENTRY_LEN
            + FOOTER_LEN;
        let mut out = Vec::with_capacity(cap);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        out.extend_from_slice(&(self.passages.len() as u64).to_le_bytes());
        let flags = if self.compressed { FLAG_COMPRESSED } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());

        let vocab_offset = out.len() as u64;
        for reps in &self.vocab {
            out.extend_from_slice(&(reps.len() as u32).to_le_bytes());
            for rep in reps {
                for w in rep.bits.words() {
                    out.extend_from_slice(&w.to_le_bytes());
                }
                out.extend_from_slice(&rep.scale.to_le_bytes());
            }
        }

        let index_offset = out.len() as u64;
        for p in &self.passages {
            out.extend_from_slice(&p.passage_id.to_le_bytes());
            out.extend_from_slice(&(p.entries.len() as u32).to_le_bytes());
            for e in &p.entries {
                out.extend_from_slice(&e.token_id.to_le_bytes());
                out.extend_from_slice(&e.rep_index.to_le_bytes());
            }
        }

        out.extend_from_slice(&vocab_offset.to_le_bytes());
        out.extend_from_slice(&index_offset.to_le_bytes());
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        debug_assert_eq!(out.len(), cap);
        out
    }

    /// Parses and validates a store image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStore(msg.into())
}

fn truncated(_: Truncated) -> Error {
    corrupt("unexpected end of data")
}

fn parse(bytes: &[u8]) -> Result<TokenStore> {
    if bytes.len() < HEADER_LEN + FOOTER_LEN {
        return Err(corrupt(format!("file of {} bytes is too short", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut cur = Cursor::new(&bytes[4..]);
    let version = cur.u16().map_err(truncated)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let body_len = bytes.len() - 8;
    let stored_sum = u64::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if fnv1a64(&bytes[..body_len]) != stored_sum {
        return Err(corrupt("checksum mismatch"));
    }

    let d = cur.u32().map_err(truncated)? as usize;
    let vocab_size = cur.u32().map_err(truncated)? as usize;
    let passage_count = cur.u64().map_err(truncated)?;
    let flags = cur.u32().map_err(truncated)?;
    if flags & !FLAG_COMPRESSED != 0 {
        return Err(corrupt(format!("unknown flags {flags:#x}")));
    }
    if d == 0 {
        return Err(corrupt("zero dimension"));
    }

    let footer = &bytes[bytes.len() - FOOTER_LEN..];
    let vocab_offset = u64::from_le_bytes(footer[..8].try_into().unwrap());
    let index_offset = u64::from_le_bytes(footer[8..16].try_into().unwrap());
    let body = &bytes[..bytes.len() - FOOTER_LEN];
    if vocab_offset != HEADER_LEN as u64 {
        return Err(corrupt("vocabulary offset does not follow header"));
    }
    if index_offset < vocab_offset || index_offset > body.len() as u64 {
        return Err(corrupt("index offset out of range"));
    }

    let words = words_for(d);
    let rep_len = words * 8 + 4;
    let mut cur = Cursor::new(&body[HEADER_LEN..index_offset as usize]);
    // Every token needs at least its 4-byte count.
    if cur.remaining() < vocab_size.saturating_mul(4) {
        return Err(corrupt("vocabulary section shorter than its token count"));
    }
    let mut vocab = Vec::with_capacity(vocab_size);
    for t in 0..vocab_size {
        let n = cur.u32().map_err(truncated)? as usize;
        if cur.remaining() < n.saturating_mul(rep_len) {
            return Err(corrupt(format!("token {t} representatives overrun section")));
        }
        let mut reps = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ws = Vec::with_capacity(words);
            for _ in 0..words {
                ws.push(cur.u64().map_err(truncated)?);
            }
            let bits = BitVector::from_words(d, ws)
                .map_err(|e| corrupt(format!("token {t}: {e}")))?;
            let scale = cur.f32().map_err(truncated)?;
            let rep = BinaryTokenRep::new(bits, scale)
                .map_err(|e| corrupt(format!("token {t}: {e}")))?;
            reps.push(rep);
        }
        vocab.push(reps);
    }
    if cur.remaining() != 0 {
        return Err(corrupt("trailing bytes in vocabulary section"));
    }

    let mut cur = Cursor::new(&body[index_offset as usize..]);
    if (cur.remaining() as u64) < passage_count.saturating_mul(12) {
        return Err(corrupt("index section shorter than its passage count"));
    }
    let mut passages = Vec::with_capacity(passage_count as usize);
    for _ in 0..passage_count {
        let passage_id = cur.u64().map_err(truncated)?;
        let n = cur.u32().map_err(truncated)? as usize;
        if cur.remaining() < n.saturating_mul(INDEX_ENTRY_LEN) {
            return Err(corrupt(format!("passage {passage_id} entries overrun section")));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            entries.push(Entry {
                token_id: cur.u32().map_err(truncated)?,
                rep_index: cur.u32().map_err(truncated)?,
            });
        }
        passages.push(PassageRecord {
            passage_id,
            entries,
        });
    }
    if cur.remaining() != 0 {
        return Err(corrupt("trailing bytes in index section"));
    }
    TokenStore::from_parts(d, flags & FLAG_COMPRESSED != 0, vocab, passages)
        .map_err(|e| corrupt(e.to_string()))
}

/// Writes a store file atomically. Refuses to replace an existing file unless
/// `overwrite` is set.
pub fn write_store(store: &TokenStore, path: &Path, overwrite: bool) -> Result<()> {
    write_atomic(path, &store.to_bytes(), overwrite)
}

pub fn read_store(path: &Path) -> Result<TokenStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

/// Accumulates passages into an uncompressed store: every occurrence gets
/// its own representative.
#[derive(Debug)]
pub struct StoreBuilder {
    d: usize,
    vocab: Vec<Vec<BinaryTokenRep>>,
    passages: Vec<PassageRecord>,
}

impl StoreBuilder {
    pub fn new(d: usize, vocab_size: usize) -> Self {
        Self {
            d,
            vocab: vec![Vec::new(); vocab_size],
            passages: Vec::new(),
        }
    }

    pub fn add_passage(
        &mut self,
        passage_id: u64,
        tokens: &[u32],
        reps: Vec<BinaryTokenRep>,
    ) -> Result<()> {
        if tokens.len() != reps.len() {
            return Err(Error::invalid(format!(
                "passage {passage_id}: {} tokens but {} representations",
                tokens.len(),
                reps.len()
            )));
        }
        let mut entries = Vec::with_capacity(tokens.len());
        for (&t, rep) in tokens.iter().zip(reps) {
            if rep.dim() != self.d {
                return Err(Error::invalid(format!(
                    "passage {passage_id}: representation dim {} in a d={} store",
                    rep.dim(),
                    self.d
                )));
            }
            let slot = self.vocab.get_mut(t as usize).ok_or_else(|| {
                Error::invalid(format!("token {t} outside vocabulary"))
            })?;
            entries.push(Entry {
                token_id: t,
                rep_index: slot.len() as u32,
            });
            slot.push(rep);
        }
        self.passages.push(PassageRecord {
            passage_id,
            entries,
        });
        Ok(())
    }

    pub fn build(self) -> Result<TokenStore> {
        TokenStore::from_parts(self.d, false, self.vocab, self.passages)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(signs: &[bool], scale: f32) -> BinaryTokenRep {
        BinaryTokenRep::new(BitVector::from_signs(signs.iter().copied()), scale).unwrap()
    }

    fn small_store() -> TokenStore {
        let mut b = StoreBuilder::new(3, 4);
        b.add_passage(10, &[1, 2, 1], vec![
            rep(&[true, false, true], 1.5),
            rep(&[false, false, true], 0.5),
            rep(&[true, true, true], 2.0),
        ])
        .unwrap();
        b.add_passage(7, &[3], vec![rep(&[false, true, false], 3.0)]).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn magic_and_roundtrip() {
        let s = small_store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], &[0x42, 0x54, 0x52, 0x31]);
        let back = TokenStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn single_token_layout() {
        let mut b = StoreBuilder::new(64, 1);
        b.add_passage(1, &[0], vec![rep(&[true; 64], 1.0)]).unwrap();
        let bytes = b.build().unwrap().to_bytes();
        // count u32 + 8 bytes of bits + 4 bytes of scale
        let vocab_section = 4 + 8 + 4;
        let index_section = 8 + 4 + INDEX_ENTRY_LEN;
        assert_eq!(bytes.len(), HEADER_LEN + vocab_section + index_section + FOOTER_LEN);
    }

    #[test]
    fn lookup_and_not_found() {
        let s = small_store();
        let reps = s.lookup(10).unwrap();
        assert_eq!(reps.len(), 3);
        assert_eq!(reps[2].scale, 2.0);
        assert!(matches!(s.lookup(99), Err(Error::NotFound(_))));
    }

    #[test]
    fn corruption_detected() {
        let bytes = small_store().to_bytes();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(
                matches!(TokenStore::from_bytes(&bad), Err(Error::CorruptStore(_))),
                "flip at {i} not detected"
            );
        }
        for len in 0..bytes.len() {
            assert!(matches!(
                TokenStore::from_bytes(&bytes[..len]),
                Err(Error::CorruptStore(_))
            ));
        }
    }

    #[test]
    fn invariants_enforced() {
        let vocab = vec![vec![rep(&[true], 1.0)]];
        let bad_ref = vec![PassageRecord {
            passage_id: 1,
            entries: vec![Entry { token_id: 0, rep_index: 1 }],
        }];
        assert!(TokenStore::from_parts(1, false, vocab.clone(), bad_ref).is_err());
        let dup = vec![
            PassageRecord { passage_id: 1, entries: vec![] },
            PassageRecord { passage_id: 1, entries: vec![] },
        ];
        assert!(TokenStore::from_parts(1, false, vocab, dup).is_err());
    }

    #[test]
    fn write_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.btr");
        let s = small_store();
        write_store(&s, &path, false).unwrap();
        assert!(matches!(write_store(&s, &path, false), Err(Error::AlreadyExists(_))));
        write_store(&s, &path, true).unwrap();
        assert_eq!(read_store(&path).unwrap(), s);
        let missing = read_store(&dir.path().join("nope"));
        assert!(matches!(missing, Err(Error::Io { .. })));
    }
}
