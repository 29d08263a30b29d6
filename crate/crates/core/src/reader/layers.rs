//! Encoder and decoder blocks with caches for the backward pass.

use ndarray::{Array2, Axis};

use super::ops::{self, AttnCache, FfnCache, NormCache};
use super::params::{DecoderLayer, EncoderLayer};

pub struct EncCache {
    n1: NormCache,
    pub attn: AttnCache,
    n2: NormCache,
    ffn: FfnCache,
}

pub fn encoder_layer(p: &EncoderLayer, x: &Array2<f64>, heads: usize) -> (Array2<f64>, EncCache) {
    let (h1, n1) = ops::rms_norm(x, &p.norm1);
    let (a, attn) = ops::attention(&p.attn, &h1, None, heads, false);
    let x1 = x + &a;
    let (h2, n2) = ops::rms_norm(&x1, &p.norm2);
    let (f, ffn) = ops::ffn(&p.ffn, &h2);
    (x1 + f, EncCache { n1, attn, n2, ffn })
}

/// Forward without keeping caches.
pub fn encoder_layer_infer(p: &EncoderLayer, x: &Array2<f64>, heads: usize) -> Array2<f64> {
    encoder_layer_segments(p, x, &[x.nrows()], heads)
}

/// Forward over several independent sequences stacked row-wise, `lens` long
/// each. Attention stays within a sequence; everything else is per token, so
/// it runs as one batch.
pub fn encoder_layer_segments(p: &EncoderLayer, x: &Array2<f64>, lens: &[usize], heads: usize) -> Array2<f64> {
    let (h1, _) = ops::rms_norm(x, &p.norm1);
    let x1 = x + &ops::segmented_self_attention(&p.attn, &h1, lens, heads);
    let (h2, _) = ops::rms_norm(&x1, &p.norm2);
    &x1 + &ops::ffn_infer(&p.ffn, &h2)
}

pub fn encoder_layer_back(
    p: &EncoderLayer,
    c: &EncCache,
    dy: &Array2<f64>,
    heads: usize,
    g: &mut EncoderLayer,
) -> Array2<f64> {
    let dh2 = ops::ffn_back(&p.ffn, &c.ffn, dy, &mut g.ffn);
    let dx1 = dy + &ops::rms_norm_back(&c.n2, &p.norm2, &dh2, &mut g.norm2);
    let (dh1, _) = ops::attention_back(&p.attn, &c.attn, &dx1, heads, &mut g.attn);
    &dx1 + &ops::rms_norm_back(&c.n1, &p.norm1, &dh1, &mut g.norm1)
}

pub struct DecCache {
    n1: NormCache,
    self_attn: AttnCache,
    n2: NormCache,
    pub cross_attn: AttnCache,
    n3: NormCache,
    ffn: FfnCache,
}

pub fn decoder_layer(
    p: &DecoderLayer,
    x: &Array2<f64>,
    mem: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, DecCache) {
    let (h1, n1) = ops::rms_norm(x, &p.norm1);
    let (a, self_attn) = ops::attention(&p.self_attn, &h1, None, heads, true);
    let x1 = x + &a;
    let (h2, n2) = ops::rms_norm(&x1, &p.norm2);
    let (c, cross_attn) = ops::attention(&p.cross_attn, &h2, Some(mem), heads, false);
    let x2 = x1 + c;
    let (h3, n3) = ops::rms_norm(&x2, &p.norm3);
    let (f, ffn) = ops::ffn(&p.ffn, &h3);
    let cache = DecCache { n1, self_attn, n2, cross_attn, n3, ffn };
    (x2 + f, cache)
}

/// Returns `(dx, dmem)`.
pub fn decoder_layer_back(
    p: &DecoderLayer,
    c: &DecCache,
    dy: &Array2<f64>,
    heads: usize,
    g: &mut DecoderLayer,
) -> (Array2<f64>, Array2<f64>) {
    let dh3 = ops::ffn_back(&p.ffn, &c.ffn, dy, &mut g.ffn);
    let dx2 = dy + &ops::rms_norm_back(&c.n3, &p.norm3, &dh3, &mut g.norm3);
    let (dh2, dmem) = ops::attention_back(&p.cross_attn, &c.cross_attn, &dx2, heads, &mut g.cross_attn);
    let dx1 = &dx2 + &ops::rms_norm_back(&c.n2, &p.norm2, &dh2, &mut g.norm2);
    let (dh1, _) = ops::attention_back(&p.self_attn, &c.self_attn, &dx1, heads, &mut g.self_attn);
    let dx = &dx1 + &ops::rms_norm_back(&c.n1, &p.norm1, &dh1, &mut g.norm1);
    (dx, dmem.expect("cross-attention returns a memory gradient"))
}

/// Decoder block at inference time with cross-attention keys and values
/// projected once per memory.
pub struct CrossKv {
    pub k: Array2<f64>,
    pub v: Array2<f64>,
}

impl CrossKv {
    pub fn new(p: &DecoderLayer, mem: &Array2<f64>) -> Self {
        Self {
            k: mem.dot(&p.cross_attn.wk),
            v: mem.dot(&p.cross_attn.wv),
        }
    }
}

pub fn decoder_layer_infer(p: &DecoderLayer, x: &Array2<f64>, kv: &CrossKv, heads: usize) -> Array2<f64> {
    let (h1, _) = ops::rms_norm(x, &p.norm1);
    let x1 = x + &ops::attention(&p.self_attn, &h1, None, heads, true).0;
    let (h2, _) = ops::rms_norm(&x1, &p.norm2);
    let x2 = &x1 + &ops::attention_cached_kv(&p.cross_attn, &h2, &kv.k, &kv.v, heads);
    let (h3, _) = ops::rms_norm(&x2, &p.norm3);
    &x2 + &ops::ffn_infer(&p.ffn, &h3)
}

/// Stack rows of several matrices with the same column count.
pub fn vstack(parts: &[Array2<f64>], d: usize) -> Array2<f64> {
    if parts.is_empty() {
        return Array2::zeros((0, d));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("matching widths")
}

pub fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
