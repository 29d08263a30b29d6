use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use btr::bench::{self, BenchConfig, BenchQuery, WorkloadSpec};
use btr::binarizer::BinaryTokenRep;
use btr::compress::{self, StorageStats};
use btr::corpus::{self, QueryLine};
use btr::reader::io::{read_model, write_model, ModelFile};
use btr::reader::{CachedPassage, MergeRule, MergeSchedule};
use btr::selftest::{self, Implementations};
use btr::store::{self, StoreBuilder, TokenStore};
use btr::tokenizer::{Vocab, DEFAULT_STOPWORDS, EOS};
use btr::training::{self, EvalMode, SyntheticTask, TrainConfig};

use crate::knobs::{check_ratio, read_text, RunConfig};
use crate::{BenchArgs, CliError, CompressArgs, PrecomputeArgs, QueryArgs, SelftestArgs, StatsArgs, TrainArgs};

type CliResult = Result<(), CliError>;

fn data(e: btr::Error) -> CliError {
    CliError::Data(e)
}

/// Library validation of user-supplied knobs counts as a usage error.
fn usage(e: btr::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(btr::Error::Io { path: path.to_path_buf(), source: e })
}

fn refuse_existing(path: &Path, overwrite: bool) -> CliResult {
    if path.exists() && !overwrite {
        return Err(CliError::Data(btr::Error::AlreadyExists(path.to_path_buf())));
    }
    Ok(())
}

pub fn precompute(a: PrecomputeArgs) -> CliResult {
    RunConfig {
        subcommand: "precompute",
        model: Some(a.model.clone()),
        corpus: Some(a.corpus.clone()),
        output: Some(a.out.clone()),
        ..Default::default()
    }
    .log();
    refuse_existing(&a.out, a.output.overwrite)?;
    let model = read_model(&a.model).map_err(data)?;
    let passages = corpus::parse_corpus(&read_text(&a.corpus)?).map_err(data)?;
    let start = Instant::now();
    let encoded: Vec<(u64, Vec<u32>, Vec<BinaryTokenRep>)> = passages
        .par_iter()
        .map(|(id, text)| {
            let tokens = model.vocab.encode(text);
            let reps = model
                .reader
                .precompute_passage(&tokens)
                .map_err(|e| btr::Error::InvalidArgument(format!("passage {id}: {e}")))?;
            Ok((*id, tokens, reps))
        })
        .collect::<btr::Result<_>>()
        .map_err(data)?;
    let mut builder = StoreBuilder::new(model.reader.config.d, model.reader.config.vocab_size);
    for (id, tokens, reps) in encoded {
        builder.add_passage(id, &tokens, reps).map_err(data)?;
    }
    let store = builder.build().map_err(data)?;
    store::write_store(&store, &a.out, a.output.overwrite).map_err(data)?;
    log::info!(
        "wrote {} passages, {} tokens to {} in {:.2?}",
        store.passage_count(),
        store.occurrences(),
        a.out.display(),
        start.elapsed()
    );
    Ok(())
}

/// Resolves a stopword list to ids. Words need a vocabulary; bare ids do not.
fn stopword_ids(list: &str, vocab: Option<&Vocab>) -> Result<BTreeSet<u32>, CliError> {
    if let Some(v) = vocab {
        return Ok(v.stopword_ids(list));
    }
    let mut ids = BTreeSet::new();
    for (i, line) in list.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let id = line.parse().map_err(|_| {
            CliError::Usage(format!(
                "stopword line {}: {line:?} is a word; pass --model so it can be mapped to an id",
                i + 1
            ))
        })?;
        ids.insert(id);
    }
    Ok(ids)
}

pub fn compress(a: CompressArgs) -> CliResult {
    let knobs = a.knobs.resolve()?;
    knobs.warn_unused("compress", &["ratio", "stopwords"]);
    let r_o = check_ratio("ratio", knobs.ratio.unwrap_or(compress::DEFAULT_OFFLINE_RATIO))?;
    RunConfig {
        subcommand: "compress",
        model: a.model.clone(),
        store: Some(a.input.clone()),
        stopwords: knobs.stopwords.clone(),
        output: Some(a.out.clone()),
        r_o: Some(r_o),
        ..Default::default()
    }
    .log();
    refuse_existing(&a.out, a.output.overwrite)?;
    let vocab = match &a.model {
        Some(p) => Some(read_model(p).map_err(data)?.vocab),
        None => None,
    };
    let stopwords = match (&knobs.stopwords, &vocab) {
        (Some(p), v) => stopword_ids(&read_text(p)?, v.as_ref())?,
        (None, Some(v)) => v.stopword_ids(DEFAULT_STOPWORDS),
        (None, None) => {
            log::warn!("no --stopwords and no --model: compressing without a stopword set");
            BTreeSet::new()
        }
    };
    let input = store::read_store(&a.input).map_err(data)?;
    let start = Instant::now();
    let out = compress::compress_corpus(&input, &stopwords, r_o).map_err(data)?;
    if out.occurrences() != input.occurrences() {
        return Err(CliError::Internal(format!(
            "compression changed the occurrence count from {} to {}",
            input.occurrences(),
            out.occurrences()
        )));
    }
    store::write_store(&out, &a.out, a.output.overwrite).map_err(data)?;
    log::info!(
        "{} stopword ids; {} -> {} stored vectors in {:.2?}",
        stopwords.len(),
        input.vectors_stored(),
        out.vectors_stored(),
        start.elapsed()
    );
    let stats = compress::storage_stats(&out);
    print!("{}", stats.to_kv());
    if let Some(csv) = &a.csv {
        let before = compress::storage_stats(&input);
        let text = format!(
            "stage,{}\ninput,{}\noutput,{}\n",
            StorageStats::CSV_HEADER,
            before.to_csv_row(),
            stats.to_csv_row()
        );
        fs::write(csv, text).map_err(|e| io_err(csv, e))?;
    }
    Ok(())
}

fn header_kv(s: &TokenStore) -> String {
    format!(
        "magic={}\nversion={}\nd={}\nvocab_size={}\ncompressed={}\npassage_count={}\n",
        String::from_utf8_lossy(&store::MAGIC),
        store::VERSION,
        s.d(),
        s.vocab_size(),
        s.is_compressed(),
        s.passage_count()
    )
}

pub fn stats(a: StatsArgs) -> CliResult {
    RunConfig { subcommand: "stats", store: Some(a.store.clone()), ..Default::default() }.log();
    let s = store::read_store(&a.store).map_err(data)?;
    let stats = compress::storage_stats(&s);
    if a.csv {
        println!("passage_count,compressed,{}", StorageStats::CSV_HEADER);
        println!("{},{},{}", s.passage_count(), s.is_compressed(), stats.to_csv_row());
    } else {
        print!("{}{}", header_kv(&s), stats.to_kv());
    }
    Ok(())
}

fn strip_eos(mut answer: Vec<u32>) -> Vec<u32> {
    if answer.last() == Some(&EOS) {
        answer.pop();
    }
    answer
}

pub fn query(a: QueryArgs) -> CliResult {
    let knobs = a.knobs.resolve()?;
    knobs.warn_unused("query", &["runtime-ratio", "g", "merge-rule", "protect-query"]);
    let ids = corpus::parse_id_list(&a.passages).map_err(|e| CliError::Usage(format!("--passages: {e}")))?;
    let model = read_model(&a.model).map_err(data)?;
    let schedule = MergeSchedule {
        r_p: knobs.runtime_ratio.unwrap_or(model.reader.config.r_p),
        g: knobs.g.unwrap_or(model.reader.config.g),
        rule: knobs.merge_rule.unwrap_or_default(),
        protect_query: knobs.protect_query.unwrap_or(false),
        ..Default::default()
    };
    schedule.validate().map_err(usage)?;
    RunConfig {
        subcommand: "query",
        model: Some(a.model.clone()),
        store: Some(a.store.clone()),
        r_p: Some(vec![schedule.r_p]),
        g: Some(schedule.g),
        merge_rule: Some(schedule.rule),
        protect_query: Some(schedule.protect_query),
        ..Default::default()
    }
    .log();
    let store = store::read_store(&a.store).map_err(data)?;
    if store.d() != model.reader.config.d {
        return Err(data(btr::Error::InvalidArgument(format!(
            "store d={} does not match model d={}",
            store.d(),
            model.reader.config.d
        ))));
    }
    let reps: Vec<Vec<BinaryTokenRep>> = ids.iter().map(|&id| store.lookup(id)).collect::<btr::Result<_>>().map_err(data)?;
    let cached: Vec<CachedPassage> = reps.iter().map(|r| CachedPassage::Binary(r)).collect();
    let q = model.vocab.encode(&a.query);
    let trace = model.reader.infer_traced(&q, &cached, &schedule).map_err(data)?;
    log::info!(
        "lower {:.2?}, encoder {:.2?}, decode {:.2?}; memory lengths {:?}",
        trace.timings.lower,
        trace.timings.encoder,
        trace.timings.decode,
        trace.memory_lengths
    );
    println!("{}", model.vocab.decode(&strip_eos(trace.answer)));
    Ok(())
}

/// Query lines for `examples`, naming passages by their corpus ids.
fn query_lines(task: &SyntheticTask, examples: &[btr::reader::Example]) -> Result<Vec<QueryLine>, CliError> {
    let ids: HashMap<String, u64> = task.corpus().into_iter().map(|(id, t)| (t, id)).collect();
    examples
        .iter()
        .map(|ex| {
            let passage_ids = ex
                .passages
                .iter()
                .map(|p| {
                    let text = task.vocab.decode(p);
                    ids.get(&text).copied().ok_or_else(|| {
                        CliError::Internal(format!("example passage {text:?} is not in the corpus"))
                    })
                })
                .collect::<Result<_, _>>()?;
            Ok(QueryLine { text: task.vocab.decode(&ex.query), passage_ids })
        })
        .collect()
}

pub fn train_toy(a: TrainArgs) -> CliResult {
    let mut cfg = TrainConfig::from_toml(&read_text(&a.config)?).map_err(usage)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(k) = a.k {
        cfg.model.k = k;
    }
    if let Some(r) = a.runtime_ratio {
        cfg.model.r_p = check_ratio("runtime-ratio", r)?;
        cfg.eval_runtime_ratio = r;
    }
    if let Some(g) = a.g {
        cfg.model.g = g;
    }
    cfg.validate().map_err(usage)?;
    let model_path = a.out.join("model.btrm");
    refuse_existing(&model_path, a.output.overwrite)?;
    match toml::to_string(&cfg) {
        Ok(s) => log::info!("resolved config: {}", s.trim_end().replace('\n', "; ")),
        Err(e) => log::warn!("could not serialize resolved config: {e}"),
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;

    let task = SyntheticTask::new(cfg.task.clone()).map_err(usage)?;
    let start = Instant::now();
    let outcome = training::three_step_train(&cfg, &task).map_err(data)?;
    if outcome.teacher_fingerprints.0 != outcome.teacher_fingerprints.1 {
        return Err(CliError::Internal("the Step-1 teacher changed during later steps".into()));
    }
    for (i, trace) in outcome.traces.iter().enumerate() {
        let path = a.out.join(format!("step{}.csv", i + 1));
        let mut buf = Vec::new();
        training::trainer::write_trace(&mut buf, trace).map_err(|e| io_err(&path, e))?;
        fs::write(&path, buf).map_err(|e| io_err(&path, e))?;
    }
    let schedule = MergeSchedule {
        g: cfg.model.g,
        ..MergeSchedule::with_runtime_ratio(cfg.eval_runtime_ratio)
    };
    let test_acc = training::evaluate(&outcome.step3, &task.test_examples, &EvalMode::Binary(schedule)).map_err(data)?;
    let file = ModelFile { reader: outcome.step3, vocab: task.vocab.clone() };
    write_model(&file, &model_path, a.output.overwrite).map_err(data)?;
    let corpus_path = a.out.join("corpus.tsv");
    fs::write(&corpus_path, corpus::format_corpus(&task.corpus())).map_err(|e| io_err(&corpus_path, e))?;
    let queries_path = a.out.join("queries.tsv");
    let lines = query_lines(&task, &task.test_examples)?;
    fs::write(&queries_path, corpus::format_queries(&lines)).map_err(|e| io_err(&queries_path, e))?;

    let [s1, s2, s3] = outcome.accuracy;
    log::info!("trained in {:.1?}", start.elapsed());
    println!("step1_dev_accuracy={s1:.4}");
    println!("step2_dev_accuracy={s2:.4}");
    println!("step3_dev_accuracy={s3:.4}");
    println!("step3_test_accuracy={test_acc:.4}");
    println!("retention={:.4}", if s1 > 0.0 { s3 / s1 } else { 0.0 });
    Ok(())
}

fn parse_ratios(s: &str) -> Result<Vec<f64>, CliError> {
    let rs = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let r: f64 = p.trim().parse().map_err(|_| CliError::Usage(format!("--ratios: {p:?} is not a number")))?;
            check_ratio("runtime ratio", r)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if rs.is_empty() {
        return Err(CliError::Usage("--ratios is empty".into()));
    }
    Ok(rs)
}

pub fn bench(a: BenchArgs) -> CliResult {
    let knobs = a.knobs.resolve()?;
    let mut used = vec!["g", "merge-rule", "protect-query", "repeats"];
    if a.model.is_none() {
        used.extend(["k", "seed"]);
    }
    knobs.warn_unused("bench", &used);
    let ratios = parse_ratios(&a.ratios)?;
    let repeats = knobs.repeats.unwrap_or(5);
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    let cfg = BenchConfig {
        repeats,
        runtime_ratios: ratios.clone(),
        g: knobs.g.unwrap_or(3),
        rule: knobs.merge_rule.unwrap_or(MergeRule::SkipMultiplesOfG),
        protect_query: knobs.protect_query.unwrap_or(false),
        ..Default::default()
    };
    MergeSchedule { g: cfg.g, ..Default::default() }.validate().map_err(usage)?;
    let mut spec = WorkloadSpec { seed: knobs.seed.unwrap_or(0), ..Default::default() };
    if let Some(k) = knobs.k {
        spec.model.k = k;
        spec.model.validate().map_err(usage)?;
    }
    RunConfig {
        subcommand: "bench",
        model: a.model.clone(),
        store: a.store.clone(),
        corpus: a.corpus.clone(),
        output: a.out.clone(),
        k: a.model.is_none().then_some(spec.model.k),
        r_p: Some(ratios),
        g: Some(cfg.g),
        seed: a.model.is_none().then_some(spec.seed),
        merge_rule: Some(cfg.rule),
        protect_query: Some(cfg.protect_query),
        repeats: Some(cfg.repeats),
        ..Default::default()
    }
    .log();

    let rows = match (&a.model, &a.store, &a.queries) {
        (Some(m), Some(s), Some(q)) => {
            let model = read_model(m).map_err(data)?;
            let store = store::read_store(s).map_err(data)?;
            let queries: Vec<BenchQuery> = corpus::parse_queries(&read_text(q)?)
                .map_err(data)?
                .into_iter()
                .map(|l| BenchQuery { query: model.vocab.encode(&l.text), passage_ids: l.passage_ids })
                .collect();
            let raw: Option<HashMap<u64, Vec<u32>>> = match &a.corpus {
                Some(c) => Some(
                    corpus::parse_corpus(&read_text(c)?)
                        .map_err(data)?
                        .into_iter()
                        .map(|(id, t)| (id, model.vocab.encode(&t)))
                        .collect(),
                ),
                None => None,
            };
            bench::run_bench(&model.reader, &store, raw.as_ref(), &queries, &cfg).map_err(data)?
        }
        _ => {
            log::info!("no model given: benchmarking a generated workload");
            let w = bench::synthetic_workload(&spec).map_err(data)?;
            bench::run_bench(&w.reader, &w.store, Some(&w.corpus), &w.queries, &cfg).map_err(data)?
        }
    };
    let reference = rows.iter().find(|r| r.path == "reference").map(|r| r.qps_median);
    for r in rows.iter().filter(|r| r.path != "reference") {
        match reference {
            Some(base) if base > 0.0 => {
                log::info!("cached r_p={}: {:.2} qps, {:.2}x reference", r.r_p, r.qps_median, r.qps_median / base)
            }
            _ => log::info!("cached r_p={}: {:.2} qps", r.r_p, r.qps_median),
        }
    }
    let mut buf = Vec::new();
    bench::write_report(&mut buf, &rows).expect("writing to memory");
    match &a.out {
        Some(p) => fs::write(p, buf).map_err(|e| io_err(p, e))?,
        None => std::io::stdout().write_all(&buf).map_err(|e| io_err(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

pub fn selftest(a: SelftestArgs) -> CliResult {
    RunConfig { subcommand: "selftest", seed: Some(a.seed), ..Default::default() }.log();
    #[allow(unused_mut)]
    let mut imp = Implementations::default();
    #[cfg(debug_assertions)]
    if a.inject_fault.as_deref() == Some("bit-order") {
        log::warn!("injecting a most-significant-bit-first packing bug");
        imp.pack = selftest::msb_first_pack;
    }
    let start = Instant::now();
    let results = selftest::run_all(&imp, a.seed);
    let mut failed = 0;
    for r in &results {
        let verdict = if r.ok() { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}/{} in {:.2?}", r.name, r.passed, r.total, r.elapsed);
        for f in &r.failures {
            println!("    {f}");
        }
        failed += usize::from(!r.ok());
    }
    println!("{} of {} suites passed in {:.2?}", results.len() - failed, results.len(), start.elapsed());
    if failed > 0 {
        return Err(CliError::Internal(format!("{failed} selftest suite(s) failed")));
    }
    Ok(())
}
