//! Throughput measurement of cached versus uncached inference.

use std::collections::HashMap;
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binarizer::BinaryTokenRep;
use crate::error::{Error, Result};
use crate::reader::{CachedPassage, MergeRule, MergeSchedule, Reader, ReaderConfig, StageTimings};
use crate::store::{StoreBuilder, TokenStore};

/// One benchmark query: tokens and the ids of its retrieved passages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchQuery {
    pub query: Vec<u32>,
    pub passage_ids: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub repeats: usize,
    pub warmup: usize,
    pub runtime_ratios: Vec<f64>,
    pub g: usize,
    pub rule: MergeRule,
    pub protect_query: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            warmup: 1,
            runtime_ratios: vec![0.0, 0.1, 0.2],
            g: 3,
            rule: MergeRule::SkipMultiplesOfG,
            protect_query: false,
        }
    }
}

/// One line of the report. Stage times are milliseconds per query, median over repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// `reference` (uncached) or `cached`.
    pub path: &'static str,
    pub r_p: f64,
    pub queries: usize,
    pub repeats: usize,
    pub qps_median: f64,
    pub qps_min: f64,
    pub qps_max: f64,
    /// Passage tokens consumed per second at the median.
    pub tokens_per_sec: f64,
    pub lookup_ms: f64,
    pub lower_ms: f64,
    pub encoder_ms: f64,
    pub decode_ms: f64,
    pub peak_rss_kb: u64,
}

pub const BENCH_HEADER: &str =
    "path,r_p,queries,repeats,qps_median,qps_min,qps_max,tokens_per_sec,lookup_ms,lower_ms,encoder_ms,decode_ms,peak_rss_kb";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3},{:.3},{:.1},{:.4},{:.4},{:.4},{:.4},{}",
            self.path,
            self.r_p,
            self.queries,
            self.repeats,
            self.qps_median,
            self.qps_min,
            self.qps_max,
            self.tokens_per_sec,
            self.lookup_ms,
            self.lower_ms,
            self.encoder_ms,
            self.decode_ms,
            self.peak_rss_kb
        )
    }
}

pub fn write_report<W: Write>(mut w: W, rows: &[BenchRow]) -> std::io::Result<()> {
    writeln!(w, "{BENCH_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    Ok(())
}

/// Peak resident set size of this process in KiB, or 0 where unavailable.
pub fn peak_rss_kb() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

#[derive(Default, Clone, Copy)]
struct RunTimes {
    total: Duration,
    lookup: Duration,
    stages: StageTimings,
}

impl RunTimes {
    fn add(&mut self, s: StageTimings) {
        self.stages.lower += s.lower;
        self.stages.encoder += s.encoder;
        self.stages.decode += s.decode;
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Reference,
    Cached(f64),
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every query once per repeat on each path, interleaving paths within a
/// repeat so slow drift affects all of them alike. `corpus` supplies raw
/// passage tokens for the reference path; when it is `None` only cached rows
/// are produced.
pub fn run_bench(
    reader: &Reader,
    store: &TokenStore,
    corpus: Option<&HashMap<u64, Vec<u32>>>,
    queries: &[BenchQuery],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if queries.is_empty() {
        return Err(Error::invalid("bench needs at least one query"));
    }
    if cfg.repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    if store.d() != reader.config.d {
        return Err(Error::invalid(format!(
            "store d={} does not match model d={}",
            store.d(),
            reader.config.d
        )));
    }
    let mut modes = Vec::new();
    if corpus.is_some() {
        modes.push(Mode::Reference);
    }
    for &r in &cfg.runtime_ratios {
        let s = MergeSchedule { r_p: r, g: cfg.g, rule: cfg.rule, protect_query: cfg.protect_query, ..Default::default() };
        s.validate()?;
        modes.push(Mode::Cached(r));
    }
    let passage_tokens: usize = queries
        .iter()
        .map(|q| {
            q.passage_ids
                .iter()
                .map(|id| store.record(*id).map_or(0, |r| r.entries.len()))
                .sum::<usize>()
        })
        .sum();

    let run_once = |mode: Mode| -> Result<RunTimes> {
        let mut t = RunTimes::default();
        let start = Instant::now();
        for q in queries {
            match mode {
                Mode::Reference => {
                    let corpus = corpus.expect("reference mode needs a corpus");
                    let passages: Vec<&[u32]> = q
                        .passage_ids
                        .iter()
                        .map(|id| {
                            corpus
                                .get(id)
                                .map(|p| p.as_slice())
                                .ok_or_else(|| Error::NotFound(format!("passage {id} not in corpus")))
                        })
                        .collect::<Result<_>>()?;
                    t.add(reader.reference_traced(&q.query, &passages)?.timings);
                }
                Mode::Cached(r) => {
                    let l = Instant::now();
                    let reps: Vec<Vec<BinaryTokenRep>> =
                        q.passage_ids.iter().map(|id| store.lookup(*id)).collect::<Result<_>>()?;
                    t.lookup += l.elapsed();
                    let cached: Vec<CachedPassage> = reps.iter().map(|r| CachedPassage::Binary(r)).collect();
                    let schedule = MergeSchedule {
                        r_p: r,
                        g: cfg.g,
                        rule: cfg.rule,
                        protect_query: cfg.protect_query,
                        ..Default::default()
                    };
                    t.add(reader.infer_traced(&q.query, &cached, &schedule)?.timings);
                }
            }
        }
        t.total = start.elapsed();
        Ok(t)
    };

    for _ in 0..cfg.warmup {
        for &m in &modes {
            run_once(m)?;
        }
    }
    let mut samples: Vec<Vec<RunTimes>> = vec![Vec::new(); modes.len()];
    for _ in 0..cfg.repeats {
        for (i, &m) in modes.iter().enumerate() {
            samples[i].push(run_once(m)?);
        }
    }

    let nq = queries.len() as f64;
    let per_query_ms = |d: Duration| d.as_secs_f64() * 1e3 / nq;
    let rss = peak_rss_kb();
    Ok(modes
        .iter()
        .zip(samples)
        .map(|(&mode, runs)| {
            let qps: Vec<f64> = runs.iter().map(|r| nq / r.total.as_secs_f64().max(1e-12)).collect();
            let qps_median = median(qps.clone());
            let (path, r_p) = match mode {
                Mode::Reference => ("reference", 0.0),
                Mode::Cached(r) => ("cached", r),
            };
            BenchRow {
                path,
                r_p,
                queries: queries.len(),
                repeats: runs.len(),
                qps_median,
                qps_min: qps.iter().copied().fold(f64::INFINITY, f64::min),
                qps_max: qps.iter().copied().fold(0.0, f64::max),
                tokens_per_sec: qps_median * passage_tokens as f64 / nq,
                lookup_ms: median(runs.iter().map(|r| per_query_ms(r.lookup)).collect()),
                lower_ms: median(runs.iter().map(|r| per_query_ms(r.stages.lower)).collect()),
                encoder_ms: median(runs.iter().map(|r| per_query_ms(r.stages.encoder)).collect()),
                decode_ms: median(runs.iter().map(|r| per_query_ms(r.stages.decode)).collect()),
                peak_rss_kb: rss,
            }
        })
        .collect())
}

/// Shape of a generated benchmark workload.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadSpec {
    pub model: ReaderConfig,
    pub corpus_passages: usize,
    pub passages_per_query: usize,
    pub passage_len: usize,
    pub query_len: usize,
    pub queries: usize,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    // Encoder-heavy with d_ff = 4d. Merging the whole decoder memory costs
    // O(n^2 d), so at small d it eats what a low runtime ratio saves.
    fn default() -> Self {
        Self {
            model: ReaderConfig {
                d: 256,
                heads: 4,
                d_ff: 1024,
                n_enc: 6,
                n_dec: 2,
                k: 3,
                vocab_size: 256,
                max_query_len: 8,
                max_passage_len: 64,
                max_answer_len: 4,
                ..Default::default()
            },
            corpus_passages: 40,
            passages_per_query: 20,
            passage_len: 64,
            query_len: 8,
            queries: 4,
            seed: 0,
        }
    }
}

/// A random model, a precomputed store over random passages and random queries.
pub struct Workload {
    pub reader: Reader,
    pub store: TokenStore,
    pub corpus: HashMap<u64, Vec<u32>>,
    pub queries: Vec<BenchQuery>,
}

pub fn synthetic_workload(spec: &WorkloadSpec) -> Result<Workload> {
    let reader = Reader::new(ReaderConfig { seed: spec.seed, ..spec.model.clone() })?;
    if spec.passages_per_query > spec.corpus_passages {
        return Err(Error::invalid("more passages per query than in the corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xbe_7c4);
    let vocab = spec.model.vocab_size as u32;
    let mut builder = StoreBuilder::new(spec.model.d, spec.model.vocab_size);
    let mut corpus = HashMap::new();
    for id in 0..spec.corpus_passages as u64 {
        let tokens: Vec<u32> = (0..spec.passage_len).map(|_| rng.gen_range(4..vocab)).collect();
        let reps = reader.precompute_passage(&tokens)?;
        builder.add_passage(id, &tokens, reps)?;
        corpus.insert(id, tokens);
    }
    let store = builder.build()?;
    let queries = (0..spec.queries)
        .map(|_| {
            let mut ids: Vec<u64> = (0..spec.corpus_passages as u64).collect();
            for i in 0..spec.passages_per_query {
                let j = rng.gen_range(i..ids.len());
                ids.swap(i, j);
            }
            ids.truncate(spec.passages_per_query);
            BenchQuery {
                query: (0..spec.query_len).map(|_| rng.gen_range(4..vocab)).collect(),
                passage_ids: ids,
            }
        })
        .collect();
    Ok(Workload { reader, store, corpus, queries })
}
