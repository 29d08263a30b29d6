//! Reader parameters and a flat view over them.
//!
//! Gradients use the same types as parameters, so optimizers, finite
//! differences and serialization all walk the same ordered tensor list.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ReaderConfig;

/// A named tensor in the flat view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

pub(crate) trait Visit {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(TensorInfo, &'a [f64])>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);
}

impl Visit for Array1<f64> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(TensorInfo, &'a [f64])>) {
        let info = TensorInfo { name: prefix.to_string(), shape: vec![self.len()] };
        out.push((info, self.as_slice().expect("contiguous")));
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.as_slice_mut().expect("contiguous"));
    }
}

impl Visit for Array2<f64> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(TensorInfo, &'a [f64])>) {
        let info = TensorInfo { name: prefix.to_string(), shape: self.shape().to_vec() };
        out.push((info, self.as_slice().expect("contiguous")));
    }
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.as_slice_mut().expect("contiguous"));
    }
}

macro_rules! visit_fields {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl Visit for $ty {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(TensorInfo, &'a [f64])>) {
                $( self.$field.visit(&format!("{prefix}.{}", stringify!($field)), out); )*
            }
            fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
                $( self.$field.visit_mut(out); )*
            }
        }
    };
}

/// Multi-head attention projections (no biases). All `d × d`, row-vector convention.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}
visit_fields!(Attention { wq, wk, wv, wo });

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}
visit_fields!(FeedForward { w1, b1, w2, b2 });

/// Pre-norm encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm1: Array1<f64>,
    pub attn: Attention,
    pub norm2: Array1<f64>,
    pub ffn: FeedForward,
}
visit_fields!(EncoderLayer { norm1, attn, norm2, ffn });

/// Pre-norm decoder block with causal self-attention and cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm1: Array1<f64>,
    pub self_attn: Attention,
    pub norm2: Array1<f64>,
    pub cross_attn: Attention,
    pub norm3: Array1<f64>,
    pub ffn: FeedForward,
}
visit_fields!(DecoderLayer { norm1, self_attn, norm2, cross_attn, norm3, ffn });

#[derive(Clone, Debug, PartialEq)]
pub struct ReaderParams {
    pub tok_emb: Array2<f64>,
    pub enc_pos: Array2<f64>,
    pub dec_pos: Array2<f64>,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: Array1<f64>,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: Array1<f64>,
    pub lm_head: Array2<f64>,
    /// Training-only head that projects binary passage tokens back to their
    /// continuous states.
    pub recovery_w: Array2<f64>,
    pub recovery_b: Array1<f64>,
}

impl Visit for ReaderParams {
    fn visit<'a>(&'a self, _prefix: &str, out: &mut Vec<(TensorInfo, &'a [f64])>) {
        self.tok_emb.visit("tok_emb", out);
        self.enc_pos.visit("enc_pos", out);
        self.dec_pos.visit("dec_pos", out);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), out);
        }
        self.enc_norm.visit("enc_norm", out);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), out);
        }
        self.dec_norm.visit("dec_norm", out);
        self.lm_head.visit("lm_head", out);
        self.recovery_w.visit("recovery.w", out);
        self.recovery_b.visit("recovery.b", out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.tok_emb.visit_mut(out);
        self.enc_pos.visit_mut(out);
        self.dec_pos.visit_mut(out);
        for l in &mut self.encoder {
            l.visit_mut(out);
        }
        self.enc_norm.visit_mut(out);
        for l in &mut self.decoder {
            l.visit_mut(out);
        }
        self.dec_norm.visit_mut(out);
        self.lm_head.visit_mut(out);
        self.recovery_w.visit_mut(out);
        self.recovery_b.visit_mut(out);
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: (usize, usize), bound: f64) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| self.rng.gen_range(-bound..bound))
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Array2<f64> {
        self.uniform((fan_in, fan_out), 1.0 / (fan_in as f64).sqrt())
    }

    fn attention(&mut self, d: usize) -> Attention {
        Attention {
            wq: self.linear(d, d),
            wk: self.linear(d, d),
            wv: self.linear(d, d),
            wo: self.linear(d, d),
        }
    }

    fn ffn(&mut self, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            w1: self.linear(d, d_ff),
            b1: Array1::zeros(d_ff),
            w2: self.linear(d_ff, d),
            b2: Array1::zeros(d),
        }
    }
}

impl ReaderParams {
    /// Fixed-seed initialization.
    pub fn init(cfg: &ReaderConfig) -> Self {
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(cfg.seed) };
        let d = cfg.d;
        let ones = || Array1::from_elem(d, 1.0);
        let tok_emb = init.uniform((cfg.vocab_size, d), 1.0);
        let enc_pos = init.uniform((cfg.encoder_positions(), d), 0.5);
        let dec_pos = init.uniform((cfg.max_answer_len + 1, d), 0.5);
        let encoder = (0..cfg.n_enc)
            .map(|_| EncoderLayer {
                norm1: ones(),
                attn: init.attention(d),
                norm2: ones(),
                ffn: init.ffn(d, cfg.d_ff),
            })
            .collect();
        let decoder = (0..cfg.n_dec)
            .map(|_| DecoderLayer {
                norm1: ones(),
                self_attn: init.attention(d),
                norm2: ones(),
                cross_attn: init.attention(d),
                norm3: ones(),
                ffn: init.ffn(d, cfg.d_ff),
            })
            .collect();
        let lm_head = init.linear(d, cfg.vocab_size);
        let recovery_w = init.linear(d, d);
        Self {
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm: ones(),
            decoder,
            dec_norm: ones(),
            lm_head,
            recovery_w,
            recovery_b: Array1::zeros(d),
        }
    }

    pub fn tensors(&self) -> Vec<(TensorInfo, &[f64])> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.fill(v);
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ReaderParams) {
        let src = other.tensors();
        for (dst, (_, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += alpha * v;
            }
        }
    }

    pub fn dot(&self, other: &ReaderParams) -> f64 {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|((_, a), (_, b))| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    /// Every parameter in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    /// Overwrite every parameter from `flat`, in tensor order.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat length");
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
    }

    /// Flat parameter at `index` across the ordered tensor list.
    pub fn get_flat(&self, mut index: usize) -> f64 {
        for (_, t) in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn set_flat(&mut self, mut index: usize, value: f64) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("flat index out of range")
    }

    /// Offset of the named tensor in the flat view.
    pub fn offset_of(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for (info, t) in self.tensors() {
            if info.name == name {
                return Some((off, t.len()));
            }
            off += t.len();
        }
        None
    }

    /// All RMS-norm gain vectors.
    pub fn norm_gains_mut(&mut self) -> Vec<&mut Array1<f64>> {
        let mut out: Vec<&mut Array1<f64>> = Vec::new();
        for l in &mut self.encoder {
            out.push(&mut l.norm1);
            out.push(&mut l.norm2);
        }
        out.push(&mut self.enc_norm);
        for l in &mut self.decoder {
            out.push(&mut l.norm1);
            out.push(&mut l.norm2);
            out.push(&mut l.norm3);
        }
        out.push(&mut self.dec_norm);
        out
    }

    /// 64-bit FNV-1a over every parameter's bytes; used to prove a teacher stays frozen.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = crate::checksum::Fnv64::default();
        for (_, t) in self.tensors() {
            for v in t {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}
