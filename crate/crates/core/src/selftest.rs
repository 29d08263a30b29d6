//! Oracle suites run by `btr selftest`.
//!
//! Each suite compares an implementation against the naive versions in
//! [`crate::oracle`]. Implementations are passed in as function pointers so
//! a deliberately broken one can be checked to fail.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarizer::{self, NormWeights};
use crate::bitvec::{self, BitVector};
use crate::error::Result;
use crate::gradcheck::{central_difference, rel_error};
use crate::merge::{self, Metric, MergeResult, MergedTokens, Tokens};
use crate::oracle;
use crate::reader::{Binarization, EncoderPath, Example, LossSpec, Reader, ReaderConfig};
use crate::tokenizer::EOS;
use crate::training::losses;

pub type PackFn = fn(&[f64], usize) -> Result<BitVector>;
pub type UnpackFn = fn(&BitVector) -> Vec<f64>;
pub type HammingFn = fn(&BitVector, &BitVector) -> Result<usize>;
pub type MergeFn = fn(Tokens, f64, Metric, &[usize]) -> Result<MergeResult>;

/// The implementations under test.
#[derive(Clone, Copy)]
pub struct Implementations {
    pub pack: PackFn,
    pub unpack: UnpackFn,
    pub hamming: HammingFn,
    pub merge: MergeFn,
}

impl Default for Implementations {
    fn default() -> Self {
        Self {
            pack: bitvec::pack,
            unpack: bitvec::unpack,
            hamming: bitvec::hamming,
            merge: merge::bipartite_merge,
        }
    }
}

/// Packs most-significant bit first. Only useful to prove the suites catch it.
pub fn msb_first_pack(values: &[f64], dim: usize) -> Result<BitVector> {
    let good = bitvec::pack(values, dim)?;
    let words = good
        .words()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let bits_here = (dim - i * 64).min(64) as u32;
            w.reverse_bits() >> (64 - bits_here)
        })
        .collect();
    BitVector::from_words(dim, words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub elapsed: Duration,
    /// First few failure descriptions.
    pub failures: Vec<String>,
}

impl SuiteResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    failures: Vec<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self { name, passed: 0, total: 0, failures: Vec::new(), start: Instant::now() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.failures.len() < 5 {
            self.failures.push(what());
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            passed: self.passed,
            total: self.total,
            elapsed: self.start.elapsed(),
            failures: self.failures,
        }
    }
}

fn random_values(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|_| match rng.gen_range(0..10) {
            0 => 0.0,
            _ => rng.gen_range(-1.0..1.0),
        })
        .collect()
}

/// Pack then unpack, checked bit by bit and word by word.
pub fn pack_round_trip(imp: &Implementations, trials: usize, seed: u64) -> SuiteResult {
    let mut t = Tally::new("pack round-trip");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..trials {
        let d = [16, 64, 768][i % 3];
        let v = random_values(&mut rng, d);
        let bits = oracle::sign_bits(&v);
        match (imp.pack)(&v, d) {
            Ok(packed) => {
                let words_ok = packed.words() == oracle::pack_words(&bits).as_slice();
                let back = (imp.unpack)(&packed);
                let expect: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
                t.check(words_ok && back == expect, || format!("trial {i} (d={d}) mismatched"));
            }
            Err(e) => t.check(false, || format!("trial {i}: {e}")),
        }
    }
    t.finish()
}

/// Hamming distance against a per-element sign comparison.
pub fn hamming_oracle(imp: &Implementations, trials: usize, seed: u64) -> SuiteResult {
    let mut t = Tally::new("hamming oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..trials {
        let d = [16, 64, 768][i % 3];
        let a = random_values(&mut rng, d);
        let b = random_values(&mut rng, d);
        let want = oracle::hamming(&a, &b);
        let got = (imp.pack)(&a, d).and_then(|pa| (imp.pack)(&b, d).and_then(|pb| (imp.hamming)(&pa, &pb)));
        t.check(got.as_ref().ok() == Some(&want), || format!("trial {i}: got {got:?}, want {want}"));
    }
    t.finish()
}

fn same_result(a: &MergeResult, b: &MergeResult) -> bool {
    if a.merge_map != b.merge_map || a.sizes != b.sizes {
        return false;
    }
    match (&a.merged_tokens, &b.merged_tokens) {
        (MergedTokens::Binary(x), MergedTokens::Binary(y)) => x == y,
        (MergedTokens::Dense(x), MergedTokens::Dense(y)) => {
            x.dim() == y.dim() && x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1e-12)
        }
        _ => false,
    }
}

/// Random merge instances with `n <= 8`, both metrics and several ratios,
/// compared with brute-force edge enumeration.
pub fn merge_oracle(imp: &Implementations, instances: usize, seed: u64) -> SuiteResult {
    let mut t = Tally::new("merge oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratios = [0.0, 0.25, 0.5];
    for i in 0..instances {
        let n = rng.gen_range(1..=8);
        let r = ratios[i % 3];
        let metric = if i % 2 == 0 { Metric::Hamming } else { Metric::Cosine };
        let protected: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.2)).collect();
        let (got, want) = match metric {
            Metric::Hamming => {
                // Small dimension so distance ties are common.
                let d = rng.gen_range(1..=6);
                let bits: Vec<BitVector> = (0..n)
                    .map(|_| BitVector::from_signs((0..d).map(|_| rng.gen_bool(0.5))))
                    .collect();
                let got = (imp.merge)(Tokens::Binary(&bits), r, metric, &protected);
                let want = oracle::merge(Tokens::Binary(&bits), &vec![1; n], r, metric, &protected);
                (got, want)
            }
            Metric::Cosine => {
                let d = rng.gen_range(2..=5);
                let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
                let got = (imp.merge)(Tokens::Dense(x.view()), r, metric, &protected);
                let want = oracle::merge(Tokens::Dense(x.view()), &vec![1; n], r, metric, &protected);
                (got, want)
            }
        };
        let ok = matches!((&got, &want), (Ok(a), Ok(b)) if same_result(a, b));
        t.check(ok, || format!("instance {i}: n={n} r={r} {metric:?} protected={protected:?}"));
    }
    t.finish()
}

/// Finite-difference checks of every loss and of a tiny full reader.
pub fn gradient_checks(seed: u64) -> SuiteResult {
    let mut t = Tally::new("gradient checks");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Tanh surrogate of the sign step.
    let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let up: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let analytic = binarizer::ste_binarize_backward(&x, &up).unwrap_or_default();
    let numeric: Vec<f64> = central_difference(
        |v| v.iter().zip(&up).map(|(a, u)| a.tanh() * u).sum(),
        &x,
        1e-6,
    );
    let e = rel_error(&analytic, &numeric);
    t.check(e <= 1e-4, || format!("ste surrogate rel error {e:.2e}"));

    // Recovery loss with respect to the head and its input.
    let d = 8;
    let b: Vec<f64> = (0..d).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.5..0.5));
    let bias = ndarray::Array1::from_shape_fn(d, |_| rng.gen_range(-0.1..0.1));
    let bv = ndarray::Array1::from(b.clone());
    let hv = ndarray::Array1::from(h.clone());
    match binarizer::recovery_loss_grad(bv.view(), &w, &bias, hv.view()) {
        Ok((_, g)) => {
            let f = |flat: &[f64]| {
                let wm = Array2::from_shape_vec((d, d), flat.to_vec()).expect("shape");
                let p = binarizer::recovery_head(bv.view(), &wm, &bias).expect("dims");
                binarizer::recovery_loss(p.view(), hv.view()).expect("dims")
            };
            let num = central_difference(f, w.as_slice().expect("contiguous"), 1e-6);
            let e = rel_error(&g.weights.iter().copied().collect::<Vec<_>>(), &num);
            t.check(e <= 1e-4, || format!("recovery loss rel error {e:.2e}"));
        }
        Err(err) => t.check(false, || format!("recovery loss: {err}")),
    }

    // Distillation loss.
    let teacher = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
    let student = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
    let sel = [0, 2];
    if let Ok((_, g)) = losses::distill_loss(teacher.view(), student.view(), &sel) {
        let f = |v: &[f64]| {
            let s = Array2::from_shape_vec((4, 3), v.to_vec()).expect("shape");
            losses::distill_loss(teacher.view(), s.view(), &sel).map(|r| r.0).unwrap_or(f64::NAN)
        };
        let num = central_difference(f, student.as_slice().expect("contiguous"), 1e-6);
        let e = rel_error(&g.iter().copied().collect::<Vec<_>>(), &num);
        t.check(e <= 1e-4, || format!("distill loss rel error {e:.2e}"));
    } else {
        t.check(false, || "distill loss failed".into());
    }

    // Task loss on a 3-token toy.
    let logits = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-2.0..2.0));
    let labels = [4, 0, 2];
    if let Ok((_, g)) = losses::task_loss(logits.view(), &labels, None) {
        let f = |v: &[f64]| {
            let m = Array2::from_shape_vec((3, 5), v.to_vec()).expect("shape");
            losses::task_loss(m.view(), &labels, None).map(|r| r.0).unwrap_or(f64::NAN)
        };
        let num = central_difference(f, logits.as_slice().expect("contiguous"), 1e-6);
        let e = rel_error(&g.iter().copied().collect::<Vec<_>>(), &num);
        t.check(e <= 1e-4, || format!("task loss rel error {e:.2e}"));
    } else {
        t.check(false, || "task loss failed".into());
    }

    // Whole reader, joint and decomposed with every loss term.
    for (label, e) in full_model_errors(seed) {
        t.check(e <= 1e-3, || format!("{label} rel error {e:.2e}"));
    }
    t.finish()
}

/// Relative errors of analytic against numeric gradients for a `d = 16`,
/// two-layer reader.
pub fn full_model_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let cfg = ReaderConfig {
        d: 16,
        heads: 2,
        d_ff: 16,
        n_enc: 2,
        n_dec: 2,
        k: 1,
        vocab_size: 10,
        max_query_len: 3,
        max_passage_len: 4,
        max_answer_len: 2,
        seed,
        ..Default::default()
    };
    let Ok(reader) = Reader::new(cfg) else {
        return vec![("model construction", f64::INFINITY)];
    };
    let ex = Example {
        query: vec![4, 5],
        passages: vec![vec![6, 7, 8], vec![9, 4]],
        answer: vec![7, EOS],
    };
    let Ok(teacher) = reader.teacher_signals(&ex, 0.5) else {
        return vec![("teacher signals", f64::INFINITY)];
    };
    let specs = [
        ("full reader (joint)", LossSpec::joint()),
        (
            "full reader (decomposed, distill)",
            LossSpec { path: EncoderPath::Decomposed(Binarization::Off), distill: 1.0, recovery: 0.0 },
        ),
        (
            "full reader (tanh surrogate, recovery)",
            LossSpec { path: EncoderPath::Decomposed(Binarization::Surrogate), distill: 0.0, recovery: 1.0 },
        ),
    ];
    let point = reader.params.to_flat();
    specs
        .iter()
        .map(|(label, spec)| {
            let mut g = reader.params.zeros_like();
            if reader.loss_and_grad(&ex, spec, Some(&teacher), Some(&mut g)).is_err() {
                return (*label, f64::INFINITY);
            }
            let analytic = g.to_flat();
            let mut probe = reader.clone();
            let numeric = central_difference(
                |v| {
                    probe.params.assign_flat(v);
                    probe.loss_and_grad(&ex, spec, Some(&teacher), None).map(|p| p.total).unwrap_or(f64::NAN)
                },
                &point,
                1e-5,
            );
            (*label, rel_error(&analytic, &numeric))
        })
        .collect()
}

/// Calibration properties: re-binarizing a recovered vector gives the same
/// bits, and positive rescaling of the input leaves the bits unchanged.
pub fn binarizer_calibration(trials: usize, seed: u64) -> SuiteResult {
    let mut t = Tally::new("binarizer calibration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..trials {
        let d = [16, 64, 768][i % 3];
        let h: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w = NormWeights::new((0..d).map(|_| rng.gen_range(0.1..2.0)).collect()).expect("positive");
        let c = rng.gen_range(0.01..100.0);
        let scaled: Vec<f64> = h.iter().map(|v| v * c).collect();
        let ok = (|| -> Result<bool> {
            let rep = binarizer::binarize(&h, &w)?;
            let again = binarizer::binarize(&binarizer::recover(&rep, &w)?, &w)?;
            let rescaled = binarizer::binarize(&scaled, &w)?;
            let (naive_bits, _) = oracle::binarize(&h, w.as_slice(), binarizer::DEFAULT_EPS);
            Ok(again.bits == rep.bits
                && rescaled.bits == rep.bits
                && rep.bits == BitVector::from_signs(naive_bits))
        })();
        t.check(matches!(ok, Ok(true)), || format!("trial {i} (d={d}): {ok:?}"));
    }
    t.finish()
}

/// Every suite `btr selftest` runs.
pub fn run_all(imp: &Implementations, seed: u64) -> Vec<SuiteResult> {
    vec![
        pack_round_trip(imp, 3000, seed),
        hamming_oracle(imp, 3000, seed.wrapping_add(1)),
        merge_oracle(imp, 500, seed.wrapping_add(2)),
        binarizer_calibration(1000, seed.wrapping_add(3)),
        gradient_checks(seed.wrapping_add(4)),
    ]
}
