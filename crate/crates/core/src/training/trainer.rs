//! Three-step training loop, evaluation and ablations.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{OptimConfig, Optimizer};
use super::task::{SyntheticTask, TaskConfig};
use crate::error::{Error, Result};
use crate::reader::{
    Binarization, CachedPassage, EncoderPath, Example, LossParts, LossSpec, MergeSchedule, Reader, ReaderConfig,
    ReaderParams, TeacherSignal,
};

/// Smallest gain allowed on the norm that binarization divides by.
pub const MIN_BINARIZE_GAIN: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepBudget {
    pub step1: usize,
    pub step2: usize,
    pub step3: usize,
}

impl Default for StepBudget {
    fn default() -> Self {
        Self { step1: 1500, step2: 500, step3: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Seeds model initialization, the task and example sampling.
    pub seed: u64,
    pub model: ReaderConfig,
    pub task: TaskConfig,
    pub optim: OptimConfig,
    pub steps: StepBudget,
    pub batch_size: usize,
    /// Dev evaluation period in optimizer steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub distill_weight: f64,
    pub recovery_weight: f64,
    /// Share of passage tokens used for distillation.
    pub saliency_ratio: f64,
    /// Runtime merge ratio when scoring the binarized reader.
    pub eval_runtime_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ReaderConfig::default(),
            task: TaskConfig::default(),
            optim: OptimConfig::default(),
            steps: StepBudget::default(),
            batch_size: 16,
            eval_every: 250,
            distill_weight: 1.0,
            recovery_weight: 1.0,
            saliency_ratio: 0.5,
            eval_runtime_ratio: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("training config: {e}")))
    }

    /// Same configuration with every seed replaced by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.model.seed = seed;
        c.task.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.saliency_ratio > 0.0 && self.saliency_ratio <= 1.0) {
            return Err(Error::invalid("saliency_ratio must be in (0, 1]"));
        }
        if self.distill_weight < 0.0 || self.recovery_weight < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        MergeSchedule::with_runtime_ratio(self.eval_runtime_ratio).validate()
    }

    /// Model shape fitted to `task`'s vocabulary and lengths.
    pub fn model_for(&self, task: &SyntheticTask) -> Result<ReaderConfig> {
        let mut m = self.model.clone();
        m.seed = self.seed;
        if task.vocab.len() > m.vocab_size {
            return Err(Error::invalid(format!(
                "task vocabulary has {} words, model vocab_size is {}",
                task.vocab.len(),
                m.vocab_size
            )));
        }
        if task.max_query_len() > m.max_query_len
            || task.max_passage_len() > m.max_passage_len
            || task.max_answer_len() > m.max_answer_len
        {
            return Err(Error::invalid("model length limits are below the task's"));
        }
        m.validate()?;
        Ok(m)
    }
}

/// Which training step is running.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stage {
    /// Undecomposed reader on the task loss.
    Full,
    /// Decomposed reader on task plus weighted distillation.
    Decomposed { distill: f64 },
    /// Binarized decomposed reader on task plus weighted recovery.
    Binarized { recovery: f64 },
}

impl Stage {
    fn spec(&self) -> LossSpec {
        match *self {
            Stage::Full => LossSpec::joint(),
            Stage::Decomposed { distill } => LossSpec {
                path: EncoderPath::Decomposed(Binarization::Off),
                distill,
                recovery: 0.0,
            },
            Stage::Binarized { recovery } => LossSpec {
                path: EncoderPath::Decomposed(Binarization::Ste),
                distill: 0.0,
                recovery,
            },
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Stage::Full => "step1",
            Stage::Decomposed { .. } => "step2",
            Stage::Binarized { .. } => "step3",
        }
    }
}

/// One row of the metric trace.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub recovery_loss: f64,
    pub dev_accuracy: f64,
}

pub const TRACE_HEADER: &str = "step,task_loss,distill_loss,recovery_loss,dev_accuracy";

pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.4}",
            r.step, r.task_loss, r.distill_loss, r.recovery_loss, r.dev_accuracy
        )?;
    }
    Ok(())
}

/// How a reader is scored.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalMode {
    /// Undecomposed forward.
    Reference,
    /// Decomposed with continuous cached states.
    Continuous(MergeSchedule),
    /// Decomposed with binary cached states.
    Binary(MergeSchedule),
}

impl EvalMode {
    fn for_stage(stage: Stage, cfg: &TrainConfig) -> Self {
        match stage {
            Stage::Full => EvalMode::Reference,
            Stage::Decomposed { .. } => EvalMode::Continuous(MergeSchedule::none()),
            Stage::Binarized { .. } => EvalMode::Binary(MergeSchedule {
                g: cfg.model.g,
                ..MergeSchedule::with_runtime_ratio(cfg.eval_runtime_ratio)
            }),
        }
    }
}

fn predict(reader: &Reader, ex: &Example, mode: &EvalMode) -> Result<Vec<u32>> {
    match mode {
        EvalMode::Reference => {
            let ps: Vec<&[u32]> = ex.passages.iter().map(|p| p.as_slice()).collect();
            reader.reference_forward(&ex.query, &ps)
        }
        EvalMode::Continuous(schedule) => {
            let states = ex.passages.iter().map(|p| reader.passage_states(p)).collect::<Result<Vec<_>>>()?;
            let cached: Vec<CachedPassage> = states.iter().map(|s| CachedPassage::Continuous(s.view())).collect();
            reader.infer(&ex.query, &cached, schedule)
        }
        EvalMode::Binary(schedule) => {
            let reps = ex.passages.iter().map(|p| reader.precompute_passage(p)).collect::<Result<Vec<_>>>()?;
            let cached: Vec<CachedPassage> = reps.iter().map(|r| CachedPassage::Binary(r)).collect();
            reader.infer(&ex.query, &cached, schedule)
        }
    }
}

/// Exact-match accuracy: the generated tokens equal the answer without its end token.
pub fn evaluate(reader: &Reader, examples: &[Example], mode: &EvalMode) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let hits = examples
        .par_iter()
        .map(|ex| {
            let out = predict(reader, ex, mode)?;
            Ok(usize::from(out.as_slice() == &ex.answer[..ex.answer.len() - 1]))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / examples.len() as f64)
}

fn clamp_binarize_gains(reader: &mut Reader) -> usize {
    let k = reader.config.k;
    let mut clamped = 0;
    for v in reader.params.encoder[k].norm1.iter_mut() {
        if *v < MIN_BINARIZE_GAIN {
            *v = MIN_BINARIZE_GAIN;
            clamped += 1;
        }
    }
    clamped
}

fn batch_gradient(
    reader: &Reader,
    batch: &[Example],
    spec: &LossSpec,
    teachers: &[Option<Vec<TeacherSignal>>],
) -> Result<(LossParts, ReaderParams)> {
    let per_example = batch
        .par_iter()
        .zip(teachers)
        .map(|(ex, t)| {
            let mut g = reader.params.zeros_like();
            let parts = reader.loss_and_grad(ex, spec, t.as_deref(), Some(&mut g))?;
            Ok((parts, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = batch.len() as f64;
    let mut sum = reader.params.zeros_like();
    let mut parts = LossParts::default();
    for (p, g) in &per_example {
        sum.add_scaled(1.0 / n, g);
        parts.task += p.task / n;
        parts.distill += p.distill / n;
        parts.recovery += p.recovery / n;
        parts.total += p.total / n;
    }
    Ok((parts, sum))
}

/// Train `reader` in place for one stage. `teacher` is read-only and only
/// used when the stage distills.
pub fn train_stage(
    reader: &mut Reader,
    teacher: Option<&Reader>,
    task: &SyntheticTask,
    cfg: &TrainConfig,
    stage: Stage,
    steps: usize,
) -> Result<Vec<TraceRow>> {
    let spec = stage.spec();
    if spec.distill > 0.0 && teacher.is_none() {
        return Err(Error::invalid("distillation stage needs a teacher"));
    }
    let stage_seed = match stage {
        Stage::Full => 1,
        Stage::Decomposed { .. } => 2,
        Stage::Binarized { .. } => 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stage_seed);
    let mut opt = Optimizer::new(cfg.optim.clone(), &reader.params).with_horizon(steps);
    let mode = EvalMode::for_stage(stage, cfg);
    let mut trace = Vec::new();
    let mut window = LossParts::default();
    let mut window_len = 0usize;
    for step in 1..=steps {
        let batch: Vec<Example> = (0..cfg.batch_size).map(|_| task.sample_train(&mut rng)).collect();
        let teachers: Vec<Option<Vec<TeacherSignal>>> = match teacher {
            Some(t) if spec.distill > 0.0 => batch
                .par_iter()
                .map(|ex| t.teacher_signals(ex, cfg.saliency_ratio).map(Some))
                .collect::<Result<_>>()?,
            _ => vec![None; batch.len()],
        };
        let (parts, mut grad) = batch_gradient(reader, &batch, &spec, &teachers)?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence(format!(
                "{} step {step}: task={} distill={} recovery={}",
                stage.name(),
                parts.task,
                parts.distill,
                parts.recovery
            )));
        }
        let norm = opt.step(&mut reader.params, &mut grad);
        if !norm.is_finite() {
            return Err(Error::Divergence(format!("{} step {step}: gradient norm {norm}", stage.name())));
        }
        let clamped = clamp_binarize_gains(reader);
        if clamped > 0 {
            log::warn!("{} step {step}: clamped {clamped} binarization gains to {MIN_BINARIZE_GAIN}", stage.name());
        }
        window.task += parts.task;
        window.distill += parts.distill;
        window.recovery += parts.recovery;
        window_len += 1;
        let last = step == steps;
        if last || (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
            let acc = evaluate(reader, &task.dev_examples, &mode)?;
            let n = window_len as f64;
            let row = TraceRow {
                step,
                task_loss: window.task / n,
                distill_loss: window.distill / n,
                recovery_loss: window.recovery / n,
                dev_accuracy: acc,
            };
            log::info!(
                "{} step {step}: task {:.4} distill {:.4} recovery {:.4} dev {:.3}",
                stage.name(),
                row.task_loss,
                row.distill_loss,
                row.recovery_loss,
                acc
            );
            trace.push(row);
            window = LossParts::default();
            window_len = 0;
        }
    }
    if steps == 0 {
        trace.push(TraceRow {
            step: 0,
            task_loss: f64::NAN,
            distill_loss: f64::NAN,
            recovery_loss: f64::NAN,
            dev_accuracy: evaluate(reader, &task.dev_examples, &mode)?,
        });
    }
    Ok(trace)
}

pub struct ThreeStepOutcome {
    pub step1: Reader,
    pub step2: Reader,
    pub step3: Reader,
    pub traces: [Vec<TraceRow>; 3],
    /// Final dev accuracy after each step.
    pub accuracy: [f64; 3],
    /// Teacher fingerprint before Step 2 and after Step 3.
    pub teacher_fingerprints: (u64, u64),
}

fn final_accuracy(trace: &[TraceRow]) -> f64 {
    trace.last().map_or(0.0, |r| r.dev_accuracy)
}

/// Step 1 trains the full reader, Step 2 the decomposed reader against the
/// frozen Step-1 teacher, Step 3 the binarized reader with recovery.
pub fn three_step_train(cfg: &TrainConfig, task: &SyntheticTask) -> Result<ThreeStepOutcome> {
    cfg.validate()?;
    let mut step1 = Reader::new(cfg.model_for(task)?)?;
    let t1 = train_stage(&mut step1, None, task, cfg, Stage::Full, cfg.steps.step1)?;
    let before = step1.params.fingerprint();
    let mut step2 = step1.clone();
    let t2 = train_stage(
        &mut step2,
        Some(&step1),
        task,
        cfg,
        Stage::Decomposed { distill: cfg.distill_weight },
        cfg.steps.step2,
    )?;
    let mut step3 = step2.clone();
    let t3 = train_stage(
        &mut step3,
        None,
        task,
        cfg,
        Stage::Binarized { recovery: cfg.recovery_weight },
        cfg.steps.step3,
    )?;
    let after = step1.params.fingerprint();
    let accuracy = [final_accuracy(&t1), final_accuracy(&t2), final_accuracy(&t3)];
    Ok(ThreeStepOutcome {
        step1,
        step2,
        step3,
        traces: [t1, t2, t3],
        accuracy,
        teacher_fingerprints: (before, after),
    })
}

/// Final dev accuracies of the full pipeline and of each ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub seed: u64,
    pub step1: f64,
    pub step2: f64,
    pub step3: f64,
    pub step3_without_recovery: f64,
    pub step3_without_distill: f64,
}

pub fn run_ablations(cfg: &TrainConfig, task: &SyntheticTask) -> Result<AblationReport> {
    let full = three_step_train(cfg, task)?;
    let mut no_rec = full.step2.clone();
    let t = train_stage(&mut no_rec, None, task, cfg, Stage::Binarized { recovery: 0.0 }, cfg.steps.step3)?;
    let step3_without_recovery = final_accuracy(&t);

    let mut no_distill = full.step1.clone();
    train_stage(&mut no_distill, None, task, cfg, Stage::Decomposed { distill: 0.0 }, cfg.steps.step2)?;
    let t = train_stage(
        &mut no_distill,
        None,
        task,
        cfg,
        Stage::Binarized { recovery: cfg.recovery_weight },
        cfg.steps.step3,
    )?;
    Ok(AblationReport {
        seed: cfg.seed,
        step1: full.accuracy[0],
        step2: full.accuracy[1],
        step3: full.accuracy[2],
        step3_without_recovery,
        step3_without_distill: final_accuracy(&t),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> (TrainConfig, SyntheticTask) {
        let cfg = TrainConfig {
            model: ReaderConfig { d: 16, heads: 2, d_ff: 32, ..Default::default() },
            task: TaskConfig { facts: 60, dev_examples: 10, test_examples: 10, ..Default::default() },
            steps: StepBudget { step1: 3, step2: 2, step3: 2 },
            batch_size: 2,
            eval_every: 0,
            ..Default::default()
        };
        let task = SyntheticTask::new(cfg.task.clone()).unwrap();
        (cfg, task)
    }

    #[test]
    fn pipeline_runs_and_freezes_teacher() {
        let (cfg, task) = quick();
        let out = three_step_train(&cfg, &task).unwrap();
        assert_eq!(out.teacher_fingerprints.0, out.teacher_fingerprints.1);
        assert!(out.traces.iter().all(|t| t.len() == 1));
        assert_ne!(out.step1.params, out.step2.params);
        let again = three_step_train(&cfg, &task).unwrap();
        assert_eq!(again.step3.params, out.step3.params);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace(&mut buf, &[TraceRow { step: 1, task_loss: 1.0, distill_loss: 0.0, recovery_loss: 0.5, dev_accuracy: 0.25 }]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "step,task_loss,distill_loss,recovery_loss,dev_accuracy");
        assert_eq!(text.lines().nth(1).unwrap(), "1,1.000000,0.000000,0.500000,0.2500");
    }

    #[test]
    fn divergence_is_reported() {
        let (mut cfg, task) = quick();
        cfg.optim.lr = f64::INFINITY;
        cfg.optim.clip_norm = 0.0;
        cfg.optim.warmup_steps = 0;
        let err = three_step_train(&cfg, &task);
        assert!(matches!(err, Err(Error::Divergence(_))), "{:?}", err.err());
    }
}
