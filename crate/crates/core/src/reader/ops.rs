//! Forward and backward passes of the reader's building blocks.
//!
//! Activations are row-major `tokens × features`. Every forward returns the
//! values its backward needs; every backward accumulates parameter gradients
//! into the matching gradient struct and returns the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{Attention, FeedForward};

pub const NORM_EPS: f64 = crate::binarizer::DEFAULT_EPS;

/// `acc += a^T · b`
fn add_at_b(acc: &mut Array2<f64>, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

pub struct NormCache {
    /// `x / rms(x)` per row.
    pub xhat: Array2<f64>,
    pub inv_rms: Array1<f64>,
}

pub fn rms_norm(x: &Array2<f64>, w: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let inv_rms: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / d + NORM_EPS).sqrt())
        .collect();
    let xhat = x * &inv_rms.view().insert_axis(Axis(1));
    let y = &xhat * w;
    (y, NormCache { xhat, inv_rms })
}

pub fn rms_norm_back(
    c: &NormCache,
    w: &Array1<f64>,
    dy: &Array2<f64>,
    dw: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &(dy * &c.xhat).sum_axis(Axis(0));
    let g = dy * w;
    let d = g.ncols() as f64;
    let mut dx = g;
    for ((mut row, xh), inv) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(&c.inv_rms) {
        let m = row.dot(&xh) / d;
        Zip::from(&mut row).and(&xh).for_each(|g, &xv| *g = (*g - xv * m) * inv);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub fn ffn(p: &FeedForward, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
    let pre = x.dot(&p.w1) + &p.b1;
    let act = pre.mapv(gelu);
    let y = act.dot(&p.w2) + &p.b2;
    (y, FfnCache { x: x.clone(), pre, act })
}

pub fn ffn_back(p: &FeedForward, c: &FfnCache, dy: &Array2<f64>, g: &mut FeedForward) -> Array2<f64> {
    add_at_b(&mut g.w2, &c.act.view(), &dy.view());
    g.b2 += &dy.sum_axis(Axis(0));
    let mut dpre = dy.dot(&p.w2.t());
    Zip::from(&mut dpre).and(&c.pre).for_each(|d, &z| *d *= gelu_grad(z));
    add_at_b(&mut g.w1, &c.x.view(), &dpre.view());
    g.b1 += &dpre.sum_axis(Axis(0));
    dpre.dot(&p.w1.t())
}

/// Row-wise softmax in place.
pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub struct AttnCache {
    xq: Array2<f64>,
    /// `None` for self-attention (keys and values come from `xq`).
    xkv: Option<Array2<f64>>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities per head, `queries × keys`.
    pub probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
}

/// Per-head scaled dot-product attention. Returns probabilities and the
/// concatenated head contexts, before the output projection.
fn head_contexts(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    causal: bool,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let (nq, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((nq, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        if causal {
            for i in 0..nq {
                scores.slice_mut(s![i, i + 1..]).fill(f64::NEG_INFINITY);
            }
        }
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (probs, ctx)
}

/// Attention over precomputed keys and values. Returns output, probabilities and context.
fn attend(
    p: &Attention,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    causal: bool,
) -> (Array2<f64>, Vec<Array2<f64>>, Array2<f64>) {
    let (probs, ctx) = head_contexts(q.view(), k.view(), v.view(), heads, causal);
    let out = ctx.dot(&p.wo);
    (out, probs, ctx)
}

/// Self-attention within consecutive row segments of `x`, which never attend
/// to each other. Projections run once over all rows. No caches are kept.
pub fn segmented_self_attention(p: &Attention, x: &Array2<f64>, lens: &[usize], heads: usize) -> Array2<f64> {
    debug_assert_eq!(lens.iter().sum::<usize>(), x.nrows());
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let mut ctx = Array2::zeros(x.dim());
    let mut start = 0;
    for &n in lens {
        let rows = s![start..start + n, ..];
        let (_, c) = head_contexts(q.slice(rows), k.slice(rows), v.slice(rows), heads, false);
        ctx.slice_mut(rows).assign(&c);
        start += n;
    }
    ctx.dot(&p.wo)
}

/// Feed-forward without a backward cache.
pub fn ffn_infer(p: &FeedForward, x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.dot(&p.w1) + &p.b1;
    h.mapv_inplace(gelu);
    h.dot(&p.w2) + &p.b2
}

/// Multi-head attention. `xkv = None` means self-attention.
pub fn attention(
    p: &Attention,
    xq: &Array2<f64>,
    xkv: Option<&Array2<f64>>,
    heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let src = xkv.unwrap_or(xq);
    let q = xq.dot(&p.wq);
    let k = src.dot(&p.wk);
    let v = src.dot(&p.wv);
    let (out, probs, ctx) = attend(p, &q, &k, &v, heads, causal);
    let cache = AttnCache {
        xq: xq.clone(),
        xkv: xkv.cloned(),
        q,
        k,
        v,
        probs,
        ctx,
    };
    (out, cache)
}

/// Cross-attention against memory keys and values projected once up front.
pub fn attention_cached_kv(
    p: &Attention,
    xq: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let q = xq.dot(&p.wq);
    attend(p, &q, k, v, heads, false).0
}

/// Returns `(d_xq, d_xkv)`; for self-attention `d_xkv` is already folded
/// into `d_xq` and returned as `None`.
pub fn attention_back(
    p: &Attention,
    c: &AttnCache,
    dout: &Array2<f64>,
    heads: usize,
    g: &mut Attention,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let d = c.q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    add_at_b(&mut g.wo, &c.ctx.view(), &dout.view());
    let dctx = dout.dot(&p.wo.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let mut ds = probs * &dp;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
            let dot = row.sum();
            Zip::from(&mut row).and(&prow).for_each(|v, &pv| *v -= pv * dot);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    add_at_b(&mut g.wq, &c.xq.view(), &dq.view());
    let dxq = dq.dot(&p.wq.t());
    let src = c.xkv.as_ref().unwrap_or(&c.xq);
    add_at_b(&mut g.wk, &src.view(), &dk.view());
    add_at_b(&mut g.wv, &src.view(), &dv.view());
    let dsrc = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    match c.xkv {
        None => (dxq + dsrc, None),
        Some(_) => (dxq, Some(dsrc)),
    }
}

/// Mean cross-entropy of `logits` rows against `labels`, and its gradient.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[u32]) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), labels.len());
    let n = labels.len().max(1) as f64;
    let mut probs = logits.clone();
    softmax_rows(&mut probs);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
        loss += lse - row[y as usize];
        probs[[i, y as usize]] -= 1.0;
    }
    probs /= n;
    (loss / n, probs)
}
