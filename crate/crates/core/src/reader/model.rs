//! The reader: a pre-norm encoder-decoder whose encoder is split at layer `k`.
//!
//! Layers `0..k` run on the query and on each passage separately, so passage
//! states can be computed once and stored as bits. Layers `k..n_enc` run on
//! each query-passage pair, and the decoder cross-attends to all pair outputs
//! at once.

use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::config::ReaderConfig;
use super::layers::{self, CrossKv, DecCache, EncCache};
use super::ops;
use super::params::ReaderParams;
use super::schedule::MergeSchedule;
use crate::binarizer::{self, BinaryTokenRep, NormWeights};
use crate::error::{Error, Result};
use crate::merge::DenseMerge;
use crate::tokenizer::{BOS, EOS};

#[derive(Clone, Debug, PartialEq)]
pub struct Reader {
    pub config: ReaderConfig,
    pub params: ReaderParams,
}

/// One training or evaluation example. `answer` ends with the end token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub query: Vec<u32>,
    pub passages: Vec<Vec<u32>>,
    pub answer: Vec<u32>,
}

/// How the passage states between the lower and upper encoder are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarization {
    Off,
    /// Sign forward, tanh-derivative backward.
    Ste,
    /// Tanh forward and backward; a smooth stand-in for checking gradients.
    Surrogate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderPath {
    /// Query and passage encoded together from the first layer.
    Joint,
    /// Lower layers see the passage alone.
    Decomposed(Binarization),
}

/// What a training step optimizes. Loss weights of zero disable a term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub path: EncoderPath,
    pub distill: f64,
    pub recovery: f64,
}

impl LossSpec {
    pub fn joint() -> Self {
        Self { path: EncoderPath::Joint, distill: 0.0, recovery: 0.0 }
    }
}

/// Teacher targets for one passage: its layer-`k` states inside the joint
/// pair, and the passage positions chosen for distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSignal {
    pub states: Array2<f64>,
    pub selected: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub distill: f64,
    pub recovery: f64,
    /// Weighted sum of the active terms.
    pub total: f64,
}

/// Passage states handed to [`Reader::infer`].
#[derive(Clone, Copy, Debug)]
pub enum CachedPassage<'a> {
    Binary(&'a [BinaryTokenRep]),
    /// Layer-`k` states used as-is, without binarization.
    Continuous(ArrayView2<'a, f64>),
}

/// Sequence lengths seen during one inference call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InferTrace {
    /// Per pair: length entering the upper encoder, then after each upper layer.
    pub pair_lengths: Vec<Vec<usize>>,
    /// Per pair: sum of absorbed sizes at the same points.
    pub pair_size_sums: Vec<Vec<usize>>,
    /// Memory length before any decoder merge, then at each decoder layer.
    pub memory_lengths: Vec<usize>,
    pub answer: Vec<u32>,
    pub timings: StageTimings,
}

/// Wall-clock time per stage of one forward.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    /// Query lower layers plus restoring cached passages (cached path), or
    /// nothing (reference path).
    pub lower: Duration,
    /// Encoder layers run on query-passage pairs, including merging.
    pub encoder: Duration,
    pub decode: Duration,
}

struct BinCache {
    h: Array2<f64>,
    s: Array1<f64>,
    x: Array2<f64>,
    b: Array2<f64>,
    proj: Option<Array2<f64>>,
}

struct PairCache {
    passage_len: usize,
    upper: Vec<EncCache>,
    lower: Option<Vec<EncCache>>,
    /// Lower-encoder passage output on the decomposed path.
    lower_out: Option<Array2<f64>>,
    bin: Option<BinCache>,
}

impl Reader {
    pub fn new(config: ReaderConfig) -> Result<Self> {
        config.validate()?;
        let params = ReaderParams::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ReaderConfig, params: ReaderParams) -> Result<Self> {
        config.validate()?;
        let fresh = ReaderParams::init(&ReaderConfig { seed: 0, ..config.clone() });
        let want: Vec<_> = fresh.tensors().into_iter().map(|(i, _)| i).collect();
        let got: Vec<_> = params.tensors().into_iter().map(|(i, _)| i).collect();
        if want != got {
            return Err(Error::CorruptModel("tensor layout does not match config".into()));
        }
        Ok(Self { config, params })
    }

    fn heads(&self) -> usize {
        self.config.heads
    }

    fn d(&self) -> usize {
        self.config.d
    }

    /// Gains of the norm that opens the first joint layer; binarization
    /// normalizes with these.
    pub fn binarize_weights(&self) -> Result<NormWeights> {
        NormWeights::new(self.params.encoder[self.config.k].norm1.to_vec())
    }

    fn check_tokens(&self, what: &str, tokens: &[u32], max: usize) -> Result<()> {
        if tokens.len() > max {
            return Err(Error::invalid(format!("{what} has {} tokens, limit is {max}", tokens.len())));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("{what} token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn check_query(&self, query: &[u32]) -> Result<()> {
        self.check_tokens("query", query, self.config.max_query_len)
    }

    fn check_passage(&self, passage: &[u32]) -> Result<()> {
        self.check_tokens("passage", passage, self.config.max_passage_len)
    }

    pub fn check_example(&self, ex: &Example) -> Result<()> {
        self.check_query(&ex.query)?;
        for p in &ex.passages {
            self.check_passage(p)?;
        }
        if ex.answer.is_empty() {
            return Err(Error::invalid("answer must contain at least the end token"));
        }
        self.check_tokens("answer", &ex.answer, self.config.max_answer_len)
    }

    /// Token plus position embeddings for `query ⊕ passage` in encoder coordinates.
    fn embed(&self, query: &[u32], passage: &[u32]) -> Array2<f64> {
        let p = &self.params;
        let mut x = Array2::zeros((query.len() + passage.len(), self.d()));
        let positions = (0..query.len())
            .map(|i| self.config.query_position(i))
            .chain((0..passage.len()).map(|j| self.config.passage_position(j)));
        for ((mut row, &t), pos) in x.rows_mut().into_iter().zip(query.iter().chain(passage)).zip(positions) {
            row.assign(&(&p.tok_emb.row(t as usize) + &p.enc_pos.row(pos)));
        }
        x
    }

    fn embed_back(&self, query: &[u32], passage: &[u32], dx: &Array2<f64>, g: &mut ReaderParams) {
        let positions = (0..query.len())
            .map(|i| self.config.query_position(i))
            .chain((0..passage.len()).map(|j| self.config.passage_position(j)));
        for ((row, &t), pos) in dx.rows().into_iter().zip(query.iter().chain(passage)).zip(positions) {
            let mut e = g.tok_emb.row_mut(t as usize);
            e += &row;
            let mut q = g.enc_pos.row_mut(pos);
            q += &row;
        }
    }

    fn encode_layers(&self, mut x: Array2<f64>, range: std::ops::Range<usize>) -> Array2<f64> {
        for l in range {
            x = layers::encoder_layer_infer(&self.params.encoder[l], &x, self.heads());
        }
        x
    }

    fn encode_layers_cached(
        &self,
        mut x: Array2<f64>,
        range: std::ops::Range<usize>,
    ) -> (Array2<f64>, Vec<EncCache>) {
        let mut caches = Vec::with_capacity(range.len());
        for l in range {
            let (y, c) = layers::encoder_layer(&self.params.encoder[l], &x, self.heads());
            caches.push(c);
            x = y;
        }
        (x, caches)
    }

    fn encode_layers_back(
        &self,
        caches: &[EncCache],
        start: usize,
        mut dy: Array2<f64>,
        g: &mut ReaderParams,
    ) -> Array2<f64> {
        for (i, c) in caches.iter().enumerate().rev() {
            let l = start + i;
            dy = layers::encoder_layer_back(&self.params.encoder[l], c, &dy, self.heads(), &mut g.encoder[l]);
        }
        dy
    }

    /// Query states after the lower encoder.
    pub fn query_states(&self, query: &[u32]) -> Result<Array2<f64>> {
        self.check_query(query)?;
        Ok(self.encode_layers(self.embed(query, &[]), 0..self.config.k))
    }

    /// Continuous passage states after the lower encoder, computed without the query.
    pub fn passage_states(&self, passage: &[u32]) -> Result<Array2<f64>> {
        self.check_passage(passage)?;
        Ok(self.encode_layers(self.embed(&[], passage), 0..self.config.k))
    }

    /// Binary representations of a passage, ready to be stored.
    pub fn precompute_passage(&self, passage: &[u32]) -> Result<Vec<BinaryTokenRep>> {
        let states = self.passage_states(passage)?;
        let w = self.binarize_weights()?;
        states
            .rows()
            .into_iter()
            .map(|r| binarizer::binarize(r.as_slice().expect("contiguous"), &w))
            .collect()
    }

    /// Full-depth encoder output of one joint pair, before the final encoder norm.
    pub fn reference_pair_states(&self, query: &[u32], passage: &[u32]) -> Result<Array2<f64>> {
        self.check_query(query)?;
        self.check_passage(passage)?;
        Ok(self.encode_layers(self.embed(query, passage), 0..self.config.n_enc))
    }

    /// Undecomposed reader: every pair runs through all encoder layers jointly,
    /// no binarization and no merging.
    pub fn reference_forward(&self, query: &[u32], passages: &[&[u32]]) -> Result<Vec<u32>> {
        Ok(self.reference_traced(query, passages)?.answer)
    }

    pub fn reference_traced(&self, query: &[u32], passages: &[&[u32]]) -> Result<InferTrace> {
        self.check_query(query)?;
        for p in passages {
            self.check_passage(p)?;
        }
        let start = Instant::now();
        let embedded: Vec<Array2<f64>> = if passages.is_empty() {
            vec![self.embed(query, &[])]
        } else {
            passages.iter().map(|p| self.embed(query, p)).collect()
        };
        let lens: Vec<usize> = embedded.iter().map(Array2::nrows).collect();
        let mut x = layers::vstack(&embedded, self.d());
        for layer in &self.params.encoder {
            x = layers::encoder_layer_segments(layer, &x, &lens, self.heads());
        }
        let pairs = [x];
        let mem = self.memory(&pairs);
        let mut trace = InferTrace::default();
        trace.timings.encoder = start.elapsed();
        let start = Instant::now();
        let n = mem.nrows();
        let mut state = DenseMerge::new(mem, vec![false; n]);
        trace.answer = self.decode(&mut state, &MergeSchedule::none(), &mut trace)?;
        trace.timings.decode = start.elapsed();
        Ok(trace)
    }

    fn memory(&self, pairs: &[Array2<f64>]) -> Array2<f64> {
        let flat = layers::vstack(pairs, self.d());
        ops::rms_norm(&flat, &self.params.enc_norm).0
    }

    /// Recover cached passage states to continuous vectors.
    fn restore(&self, passage: &CachedPassage, w: &NormWeights) -> Result<Array2<f64>> {
        let d = self.d();
        match passage {
            CachedPassage::Continuous(m) => {
                if m.ncols() != d {
                    return Err(Error::invalid(format!("cached states have d={}, model d={d}", m.ncols())));
                }
                if m.nrows() > self.config.max_passage_len {
                    return Err(Error::invalid("cached passage longer than max_passage_len"));
                }
                Ok(m.to_owned())
            }
            CachedPassage::Binary(reps) => {
                if reps.len() > self.config.max_passage_len {
                    return Err(Error::invalid("cached passage longer than max_passage_len"));
                }
                let mut out = Array2::zeros((reps.len(), d));
                for (mut row, rep) in out.rows_mut().into_iter().zip(reps.iter()) {
                    if rep.dim() != d {
                        return Err(Error::invalid(format!("cached rep has d={}, model d={d}", rep.dim())));
                    }
                    row.assign(&Array1::from(binarizer::recover(rep, w)?));
                }
                Ok(out)
            }
        }
    }

    /// Answer from cached passages with runtime merging.
    pub fn infer(&self, query: &[u32], passages: &[CachedPassage], schedule: &MergeSchedule) -> Result<Vec<u32>> {
        Ok(self.infer_traced(query, passages, schedule)?.answer)
    }

    pub fn infer_traced(
        &self,
        query: &[u32],
        passages: &[CachedPassage],
        schedule: &MergeSchedule,
    ) -> Result<InferTrace> {
        schedule.validate()?;
        let start = Instant::now();
        let hq = self.query_states(query)?;
        let w = self.binarize_weights()?;
        let restored: Vec<Array2<f64>> = passages.iter().map(|p| self.restore(p, &w)).collect::<Result<_>>()?;
        let q_len = hq.nrows();
        let lower = start.elapsed();
        let start = Instant::now();
        let inputs: Vec<Array2<f64>> = if restored.is_empty() {
            vec![hq.clone()]
        } else {
            restored.iter().map(|hp| layers::vstack(&[hq.clone(), hp.clone()], self.d())).collect()
        };
        let mut trace = InferTrace::default();
        let pairs = self.encode_upper(inputs, q_len, schedule, &mut trace);
        let mut outputs = Vec::with_capacity(pairs.len());
        let mut sizes = Vec::new();
        for state in pairs {
            sizes.extend_from_slice(&state.sizes);
            outputs.push(state.states);
        }
        let mem = self.memory(&outputs);
        trace.timings.lower = lower;
        trace.timings.encoder = start.elapsed();
        let start = Instant::now();
        let n = mem.nrows();
        let mut state = DenseMerge::new(mem, vec![false; n]);
        state.sizes = sizes;
        trace.answer = self.decode(&mut state, schedule, &mut trace)?;
        trace.timings.decode = start.elapsed();
        Ok(trace)
    }

    /// Upper encoder over all pairs, merging each pair after every layer.
    /// Pairs are stacked so the per-token work runs as one batch.
    fn encode_upper(
        &self,
        inputs: Vec<Array2<f64>>,
        q_len: usize,
        schedule: &MergeSchedule,
        trace: &mut InferTrace,
    ) -> Vec<DenseMerge> {
        let mut pairs: Vec<DenseMerge> = inputs
            .into_iter()
            .map(|x| {
                let protected = (0..x.nrows()).map(|i| schedule.protect_query && i < q_len).collect();
                DenseMerge::new(x, protected)
            })
            .collect();
        let record = |pairs: &[DenseMerge], trace: &mut InferTrace| {
            for (i, p) in pairs.iter().enumerate() {
                trace.pair_lengths[i].push(p.len());
                trace.pair_size_sums[i].push(p.sizes.iter().sum());
            }
        };
        trace.pair_lengths = vec![Vec::new(); pairs.len()];
        trace.pair_size_sums = vec![Vec::new(); pairs.len()];
        record(&pairs, trace);
        for l in self.config.k..self.config.n_enc {
            let lens: Vec<usize> = pairs.iter().map(DenseMerge::len).collect();
            let views: Vec<_> = pairs.iter().map(|p| p.states.view()).collect();
            let stacked = ndarray::concatenate(Axis(0), &views).expect("matching widths");
            let out = layers::encoder_layer_segments(&self.params.encoder[l], &stacked, &lens, self.heads());
            let mut start = 0;
            for (p, n) in pairs.iter_mut().zip(lens) {
                p.states = out.slice(s![start..start + n, ..]).to_owned();
                start += n;
            }
            if schedule.r_p > 0.0 {
                pairs.par_iter_mut().for_each(|p| p.merge(schedule.r_p));
            }
            record(&pairs, trace);
        }
        pairs
    }

    /// Greedy decoding against a memory that may shrink before some layers.
    fn decode(&self, mem: &mut DenseMerge, schedule: &MergeSchedule, trace: &mut InferTrace) -> Result<Vec<u32>> {
        if mem.is_empty() {
            return Err(Error::invalid("nothing to attend to: empty query and no passages"));
        }
        trace.memory_lengths.push(mem.len());
        let mut kv = Vec::with_capacity(self.config.n_dec);
        for (i, layer) in self.params.decoder.iter().enumerate() {
            if schedule.merges_before_decoder_layer(i + 1) {
                mem.merge(schedule.r_p);
            }
            trace.memory_lengths.push(mem.len());
            kv.push(CrossKv::new(layer, &mem.states));
        }
        let mut inputs = vec![BOS];
        let mut out = Vec::new();
        while out.len() < self.config.max_answer_len {
            let mut x = self.embed_decoder(&inputs);
            for (layer, kv) in self.params.decoder.iter().zip(&kv) {
                x = layers::decoder_layer_infer(layer, &x, kv, self.heads());
            }
            let last = x.slice(s![x.nrows() - 1..x.nrows(), ..]).to_owned();
            let logits = ops::rms_norm(&last, &self.params.dec_norm).0.dot(&self.params.lm_head);
            let next = layers::argmax(logits.row(0)) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            inputs.push(next);
        }
        Ok(out)
    }

    fn embed_decoder(&self, inputs: &[u32]) -> Array2<f64> {
        let p = &self.params;
        let mut x = Array2::zeros((inputs.len(), self.d()));
        for (i, (mut row, &t)) in x.rows_mut().into_iter().zip(inputs).enumerate() {
            row.assign(&(&p.tok_emb.row(t as usize) + &p.dec_pos.row(i)));
        }
        x
    }

    /// Decoder logits for teacher-forced `inputs` against a fixed memory.
    pub fn decoder_logits(&self, mem: &Array2<f64>, inputs: &[u32]) -> Result<Array2<f64>> {
        self.check_tokens("decoder input", inputs, self.config.max_answer_len + 1)?;
        if mem.ncols() != self.d() || mem.nrows() == 0 {
            return Err(Error::invalid("memory must be non-empty with model width"));
        }
        Ok(self.decoder_forward(mem, inputs).0)
    }

    /// Cross-attention probabilities per decoder layer and head for the
    /// joint (uncached) path; each matrix is `inputs × memory`.
    pub fn cross_attention_maps(
        &self,
        query: &[u32],
        passages: &[&[u32]],
        inputs: &[u32],
    ) -> Result<Vec<Vec<Array2<f64>>>> {
        let pairs = passages
            .iter()
            .map(|p| self.reference_pair_states(query, p))
            .collect::<Result<Vec<_>>>()?;
        let mem = self.memory(&pairs);
        self.check_tokens("decoder input", inputs, self.config.max_answer_len + 1)?;
        let (_, caches, _) = self.decoder_forward(&mem, inputs);
        Ok(caches.into_iter().map(|c| c.cross_attn.probs).collect())
    }

    fn decoder_forward(&self, mem: &Array2<f64>, inputs: &[u32]) -> (Array2<f64>, Vec<DecCache>, DecoderTail) {
        let mut x = self.embed_decoder(inputs);
        let mut caches = Vec::with_capacity(self.config.n_dec);
        for layer in &self.params.decoder {
            let (y, c) = layers::decoder_layer(layer, &x, mem, self.heads());
            caches.push(c);
            x = y;
        }
        let (normed, norm) = ops::rms_norm(&x, &self.params.dec_norm);
        let logits = normed.dot(&self.params.lm_head);
        (logits, caches, DecoderTail { normed, norm })
    }

    /// Teacher targets for every passage of `ex`, using this model as the
    /// joint teacher: layer-`k` passage states and the `ratio` most-attended
    /// passage positions in the first joint layer.
    pub fn teacher_signals(&self, ex: &Example, ratio: f64) -> Result<Vec<TeacherSignal>> {
        self.check_example(ex)?;
        let k = self.config.k;
        let q_len = ex.query.len();
        ex.passages
            .iter()
            .map(|p| {
                let hk = self.encode_layers(self.embed(&ex.query, p), 0..k);
                let (_, cache) = layers::encoder_layer(&self.params.encoder[k], &hk, self.heads());
                let selected = crate::training::losses::select_salient_tokens(&cache.attn.probs, q_len, ratio)?;
                Ok(TeacherSignal {
                    states: hk.slice(s![q_len.., ..]).to_owned(),
                    selected,
                })
            })
            .collect()
    }

    /// Loss of one example and, when `grads` is given, its gradient added into `grads`.
    pub fn loss_and_grad(
        &self,
        ex: &Example,
        spec: &LossSpec,
        teacher: Option<&[TeacherSignal]>,
        mut grads: Option<&mut ReaderParams>,
    ) -> Result<LossParts> {
        self.check_example(ex)?;
        let d = self.d();
        let k = self.config.k;
        let n_enc = self.config.n_enc;
        let q_len = ex.query.len();
        let binarization = match spec.path {
            EncoderPath::Joint => None,
            EncoderPath::Decomposed(b) => Some(b),
        };
        if spec.distill > 0.0 {
            if binarization.is_none() {
                return Err(Error::invalid("distillation needs the decomposed path"));
            }
            match teacher {
                Some(t) if t.len() == ex.passages.len() => {}
                _ => return Err(Error::invalid("distillation needs one teacher signal per passage")),
            }
        }
        let use_recovery = spec.recovery > 0.0 && matches!(binarization, Some(Binarization::Ste | Binarization::Surrogate));

        // Encoder.
        let mut query_lower: Option<(Array2<f64>, Vec<EncCache>)> = None;
        if binarization.is_some() {
            query_lower = Some(self.encode_layers_cached(self.embed(&ex.query, &[]), 0..k));
        }
        let empty: Vec<u32> = Vec::new();
        let passages: Vec<&Vec<u32>> = if ex.passages.is_empty() { vec![&empty] } else { ex.passages.iter().collect() };
        let mut pair_caches = Vec::with_capacity(passages.len());
        let mut pair_outputs = Vec::with_capacity(passages.len());
        let mut distill_sum = 0.0;
        let mut distill_count = 0usize;
        let mut recovery_sum = 0.0;
        let mut passage_tokens = 0usize;
        for (pi, p) in passages.iter().enumerate() {
            let (out, cache) = match binarization {
                None => {
                    let (out, upper) = self.encode_layers_cached(self.embed(&ex.query, p), 0..n_enc);
                    (out, PairCache { passage_len: p.len(), upper, lower: None, lower_out: None, bin: None })
                }
                Some(mode) => {
                    let (hp, lower) = self.encode_layers_cached(self.embed(&[], p), 0..k);
                    if spec.distill > 0.0 {
                        let t = &teacher.expect("checked")[pi];
                        if t.states.dim() != hp.dim() {
                            return Err(Error::invalid("teacher states do not match passage shape"));
                        }
                        for &j in &t.selected {
                            if j >= hp.nrows() {
                                return Err(Error::invalid(format!("selected index {j} out of range")));
                            }
                            let diff = &t.states.row(j) - &hp.row(j);
                            distill_sum += diff.dot(&diff);
                            distill_count += 1;
                        }
                    }
                    let (restored, bin) = self.binarize_forward(&hp, mode, use_recovery);
                    if let Some(proj) = bin.as_ref().and_then(|b| b.proj.as_ref()) {
                        let diff = proj - &hp;
                        recovery_sum += diff.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    }
                    passage_tokens += p.len();
                    let hq = &query_lower.as_ref().expect("set above").0;
                    let x = layers::vstack(&[hq.clone(), restored], d);
                    let (out, upper) = self.encode_layers_cached(x, k..n_enc);
                    let cache = PairCache { passage_len: p.len(), upper, lower: Some(lower), lower_out: Some(hp), bin };
                    (out, cache)
                }
            };
            pair_outputs.push(out);
            pair_caches.push(cache);
        }
        let flat = layers::vstack(&pair_outputs, d);
        let (mem, mem_norm) = ops::rms_norm(&flat, &self.params.enc_norm);

        // Decoder.
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(&ex.answer[..ex.answer.len() - 1]);
        let (logits, dec_caches, tail) = self.decoder_forward(&mem, &inputs);
        let (task, dlogits) = ops::cross_entropy(&logits, &ex.answer);

        let distill = if distill_count > 0 { distill_sum / (distill_count * d) as f64 } else { 0.0 };
        let recovery = if use_recovery && passage_tokens > 0 { recovery_sum / passage_tokens as f64 } else { 0.0 };
        let parts = LossParts {
            task,
            distill,
            recovery,
            total: task + spec.distill * distill + spec.recovery * recovery,
        };
        let Some(g) = grads.as_deref_mut() else {
            return Ok(parts);
        };

        // Decoder backward.
        let p = &self.params;
        g.lm_head += &tail.normed.t().dot(&dlogits);
        let dnormed = dlogits.dot(&p.lm_head.t());
        let mut dx = ops::rms_norm_back(&tail.norm, &p.dec_norm, &dnormed, &mut g.dec_norm);
        let mut dmem = Array2::zeros(mem.raw_dim());
        for (l, c) in dec_caches.iter().enumerate().rev() {
            let (dxl, dm) = layers::decoder_layer_back(&p.decoder[l], c, &dx, self.heads(), &mut g.decoder[l]);
            dx = dxl;
            dmem += &dm;
        }
        for (i, row) in dx.rows().into_iter().enumerate() {
            let mut e = g.tok_emb.row_mut(inputs[i] as usize);
            e += &row;
            let mut q = g.dec_pos.row_mut(i);
            q += &row;
        }

        // Encoder backward.
        let dflat = ops::rms_norm_back(&mem_norm, &p.enc_norm, &dmem, &mut g.enc_norm);
        let mut dquery = Array2::zeros((q_len, d));
        let mut offset = 0;
        let distill_coef = if distill_count > 0 { spec.distill * 2.0 / (distill_count * d) as f64 } else { 0.0 };
        let recovery_coef = if passage_tokens > 0 { spec.recovery / passage_tokens as f64 } else { 0.0 };
        for (pi, (cache, out)) in pair_caches.iter().zip(&pair_outputs).enumerate() {
            let rows = out.nrows();
            let dout = dflat.slice(s![offset..offset + rows, ..]).to_owned();
            offset += rows;
            let passage: &[u32] = passages[pi];
            match &cache.lower {
                None => {
                    let dx0 = self.encode_layers_back(&cache.upper, 0, dout, g);
                    self.embed_back(&ex.query, passage, &dx0, g);
                }
                Some(lower) => {
                    let dpair = self.encode_layers_back(&cache.upper, k, dout, g);
                    dquery += &dpair.slice(s![..q_len, ..]);
                    let drestored = dpair.slice(s![q_len.., ..]).to_owned();
                    let mut dhp = match &cache.bin {
                        Some(bin) => self.binarize_backward(bin, &drestored, recovery_coef, g),
                        None => drestored,
                    };
                    if spec.distill > 0.0 {
                        let t = &teacher.expect("checked")[pi];
                        let hp = cache.lower_out.as_ref().expect("decomposed path");
                        for &j in &t.selected {
                            let diff = &hp.row(j) - &t.states.row(j);
                            let mut row = dhp.row_mut(j);
                            row.scaled_add(distill_coef, &diff);
                        }
                    }
                    debug_assert_eq!(dhp.nrows(), cache.passage_len);
                    let dx0 = self.encode_layers_back(lower, 0, dhp, g);
                    self.embed_back(&[], passage, &dx0, g);
                }
            }
        }
        if let Some((_, lower)) = &query_lower {
            let dx0 = self.encode_layers_back(lower, 0, dquery, g);
            self.embed_back(&ex.query, &[], &dx0, g);
        }
        Ok(parts)
    }

    fn binarize_forward(&self, h: &Array2<f64>, mode: Binarization, recovery: bool) -> (Array2<f64>, Option<BinCache>) {
        if mode == Binarization::Off {
            return (h.clone(), None);
        }
        let w = &self.params.encoder[self.config.k].norm1;
        let d = h.ncols() as f64;
        let s: Array1<f64> = h
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r) / d + binarizer::DEFAULT_EPS).sqrt())
            .collect();
        let s_col = s.view().insert_axis(Axis(1));
        let x = h / &s_col * w;
        let b = match mode {
            Binarization::Ste => x.mapv(|v| if v > 0.0 { 1.0 } else { -1.0 }),
            _ => x.mapv(f64::tanh),
        };
        let restored = &b * &s_col / w;
        let proj = recovery.then(|| b.dot(&self.params.recovery_w) + &self.params.recovery_b);
        let cache = BinCache { h: h.clone(), s, x, b, proj };
        (restored, Some(cache))
    }

    /// Gradient through binarize-and-restore, plus the recovery term scaled by `rec_coef`.
    fn binarize_backward(&self, c: &BinCache, drestored: &Array2<f64>, rec_coef: f64, g: &mut ReaderParams) -> Array2<f64> {
        let k = self.config.k;
        let w = &self.params.encoder[k].norm1;
        let d = c.h.ncols();
        let df = d as f64;
        let mut dh = Array2::zeros(c.h.raw_dim());
        let mut dw = Array1::<f64>::zeros(d);
        for r in 0..c.h.nrows() {
            let s = c.s[r];
            let h = c.h.row(r);
            let x = c.x.row(r);
            let b = c.b.row(r);
            let up = drestored.row(r);
            let mut db = Array1::zeros(d);
            let mut ds = 0.0;
            for i in 0..d {
                db[i] = up[i] * s / w[i];
                ds += up[i] * b[i] / w[i];
                dw[i] -= up[i] * s * b[i] / (w[i] * w[i]);
            }
            let mut dh_direct = Array1::zeros(d);
            if let Some(proj) = &c.proj {
                let dproj = (&proj.row(r) - &h) * (rec_coef * 2.0 / df);
                for i in 0..d {
                    let mut row = g.recovery_w.row_mut(i);
                    row.scaled_add(b[i], &dproj);
                }
                g.recovery_b += &dproj;
                db += &self.params.recovery_w.dot(&dproj);
                dh_direct = -dproj;
            }
            let mut gx = Array1::zeros(d);
            for i in 0..d {
                let t = x[i].tanh();
                let dx = db[i] * (1.0 - t * t);
                dw[i] += dx * h[i] / s;
                gx[i] = dx * w[i];
            }
            let m: f64 = (0..d).map(|i| gx[i] * h[i] / s).sum::<f64>() / df;
            for i in 0..d {
                dh[[r, i]] = (gx[i] - h[i] / s * m) / s + ds * h[i] / (df * s) + dh_direct[i];
            }
        }
        g.encoder[k].norm1 += &dw;
        dh
    }
}

struct DecoderTail {
    normed: Array2<f64>,
    norm: ops::NormCache,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, rel_error};

    fn tiny() -> Reader {
        let cfg = ReaderConfig {
            d: 8,
            heads: 2,
            d_ff: 12,
            n_enc: 2,
            n_dec: 2,
            k: 1,
            vocab_size: 12,
            max_query_len: 4,
            max_passage_len: 6,
            max_answer_len: 3,
            seed: 5,
            ..Default::default()
        };
        let mut r = Reader::new(cfg).unwrap();
        // Move norm gains away from 1 so their gradients are exercised.
        for (i, gain) in r.params.norm_gains_mut().into_iter().enumerate() {
            gain.mapv_inplace(|v| v + 0.05 * (i as f64 + 1.0).sin());
        }
        r
    }

    fn example() -> Example {
        Example {
            query: vec![4, 5, 6],
            passages: vec![vec![7, 8, 9, 10], vec![11, 4, 5]],
            answer: vec![9, 10, EOS],
        }
    }

    fn check(reader: &Reader, spec: LossSpec, teacher: Option<&[TeacherSignal]>) {
        let ex = example();
        let mut g = reader.params.zeros_like();
        reader.loss_and_grad(&ex, &spec, teacher, Some(&mut g)).unwrap();
        let analytic = g.to_flat();
        let point = reader.params.to_flat();
        let mut probe = reader.clone();
        let f = |v: &[f64]| {
            probe.params.assign_flat(v);
            probe.loss_and_grad(&ex, &spec, teacher, None).unwrap().total
        };
        let numeric = central_difference(f, &point, 1e-5);
        let err = rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "{spec:?}: rel error {err}");
    }

    #[test]
    fn joint_gradient() {
        check(&tiny(), LossSpec::joint(), None);
    }

    #[test]
    fn decomposed_gradient_with_all_terms() {
        let r = tiny();
        let teacher = r.teacher_signals(&example(), 0.5).unwrap();
        let spec = LossSpec { path: EncoderPath::Decomposed(Binarization::Surrogate), distill: 1.0, recovery: 0.7 };
        check(&r, spec, Some(&teacher));
        let spec = LossSpec { path: EncoderPath::Decomposed(Binarization::Off), distill: 1.0, recovery: 0.0 };
        check(&r, spec, Some(&teacher));
    }

    #[test]
    fn infer_without_merging_matches_injected_states() {
        let r = tiny();
        let ex = example();
        let cached: Vec<Array2<f64>> = ex.passages.iter().map(|p| r.passage_states(p).unwrap()).collect();
        let views: Vec<CachedPassage> = cached.iter().map(|m| CachedPassage::Continuous(m.view())).collect();
        let a = r.infer(&ex.query, &views, &MergeSchedule::none()).unwrap();
        let b = r.infer(&ex.query, &views, &MergeSchedule::none()).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= r.config.max_answer_len);
    }

    #[test]
    fn rejects_bad_inputs() {
        let r = tiny();
        assert!(r.precompute_passage(&[1; 7]).is_err());
        assert!(r.precompute_passage(&[]).unwrap().is_empty());
        assert!(r.query_states(&[99]).is_err());
        let wrong = vec![BinaryTokenRep::new(crate::bitvec::BitVector::zeros(16), 1.0).unwrap()];
        let err = r.infer(&[4], &[CachedPassage::Binary(&wrong)], &MergeSchedule::none());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
        assert!(r.infer(&[], &[], &MergeSchedule::none()).is_err());
        assert!(r.infer(&[4], &[], &MergeSchedule::none()).is_ok());
    }
}
