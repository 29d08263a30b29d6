use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use btr::reader::io::{write_model, ModelFile};
use btr::reader::{Reader, ReaderConfig};
use btr::tokenizer::Vocab;

fn btr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btr"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn btr")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    model: PathBuf,
    corpus: PathBuf,
}

const CORPUS: &str = "10\tthe cat sat on the mat\n20\ta dog ran in the park\n30\tthe bird sang\n";

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let words = "the cat sat on mat a dog ran in park bird sang".split(' ');
    let vocab = Vocab::new(words);
    let reader = Reader::new(ReaderConfig {
        d: 16,
        heads: 2,
        d_ff: 32,
        vocab_size: 32,
        max_passage_len: 8,
        ..Default::default()
    })
    .unwrap();
    let model = dir.path().join("model.btrm");
    write_model(&ModelFile { reader, vocab }, &model, false).unwrap();
    let corpus = dir.path().join("corpus.tsv");
    fs::write(&corpus, CORPUS).unwrap();
    Fixture { dir, model, corpus }
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn precompute(&self, out: &Path) -> Output {
        btr(&["precompute", "--corpus", s(&self.corpus), "--model", s(&self.model), "--out", s(out)])
    }
}

fn kv(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

#[test]
fn precompute_is_deterministic_and_logs_config() {
    let f = fixture();
    let a = f.path("a.btr");
    let out = f.precompute(&a);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("resolved config"));

    let st = btr(&["stats", s(&a)]);
    assert_eq!(code(&st), 0);
    assert_eq!(kv(&stdout(&st), "passage_count"), "3");
    assert_eq!(kv(&stdout(&st), "occurrences"), "15");
    assert_eq!(kv(&stdout(&st), "magic"), "BTR1");

    let b = f.path("b.btr");
    assert_eq!(code(&f.precompute(&b)), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    // Existing output is kept unless --overwrite is given.
    let again = f.precompute(&a);
    assert_eq!(code(&again), 2);
    let forced = btr(&[
        "precompute", "--corpus", s(&f.corpus), "--model", s(&f.model), "--out", s(&a), "--overwrite",
    ]);
    assert_eq!(code(&forced), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn empty_corpus_gives_an_empty_store() {
    let f = fixture();
    let empty = f.path("empty.tsv");
    fs::write(&empty, "").unwrap();
    let out = f.path("e.btr");
    let r = btr(&["precompute", "--corpus", s(&empty), "--model", s(&f.model), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let st = stdout(&btr(&["stats", s(&out)]));
    assert_eq!(kv(&st, "passage_count"), "0");
    assert_eq!(kv(&st, "total"), "0");
}

#[test]
fn malformed_corpus_reports_the_line_and_writes_nothing() {
    let f = fixture();
    let bad = f.path("bad.tsv");
    fs::write(&bad, "1\tthe cat\nnot a record\n").unwrap();
    let out = f.path("x.btr");
    let r = btr(&["precompute", "--corpus", s(&bad), "--model", s(&f.model), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("line 2"), "{}", stderr(&r));
    assert!(!out.exists());
    assert_eq!(fs::read_dir(f.dir.path()).unwrap().count(), 3);
}

#[test]
fn compress_conserves_occurrences_and_query_answers() {
    let f = fixture();
    let raw = f.path("raw.btr");
    assert_eq!(code(&f.precompute(&raw)), 0);
    let small = f.path("small.btr");
    let csv = f.path("stats.csv");
    let r = btr(&[
        "compress", "--in", s(&raw), "--out", s(&small), "--model", s(&f.model), "--ratio", "0.5", "--csv",
        s(&csv),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let report = stdout(&r);
    assert_eq!(kv(&report, "occurrences"), "15");
    // "the" occurs four times and collapses to one vector.
    assert!(kv(&report, "vectors_stored").parse::<usize>().unwrap() < 15);
    let csv_text = fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("stage,d,occurrences,vectors_stored,"));
    assert_eq!(kv(&stdout(&btr(&["stats", s(&small)])), "compressed"), "true");

    let q = btr(&[
        "query", "--store", s(&small), "--model", s(&f.model), "--query", "where is the cat", "--passages",
        "10,30", "--runtime-ratio", "0.2",
    ]);
    assert_eq!(code(&q), 0, "{}", stderr(&q));
    assert_eq!(stdout(&q).lines().count(), 1);

    let missing = btr(&[
        "query", "--store", s(&small), "--model", s(&f.model), "--query", "x", "--passages", "99",
    ]);
    assert_eq!(code(&missing), 2, "{}", stderr(&missing));
}

#[test]
fn knob_errors_are_usage_errors_and_flags_beat_the_config_file() {
    let f = fixture();
    let raw = f.path("raw.btr");
    assert_eq!(code(&f.precompute(&raw)), 0);
    let cfg = f.path("knobs.toml");
    fs::write(&cfg, "runtime_ratio = 0.7\n").unwrap();
    let base = ["query", "--store", s(&raw), "--model", s(&f.model), "--query", "the cat", "--passages", "10"];

    let mut from_file = base.to_vec();
    from_file.extend(["--config", s(&cfg)]);
    let r = btr(&from_file);
    assert_eq!(code(&r), 1, "{}", stderr(&r));
    assert!(stderr(&r).contains("r_p=0.7"));

    let mut overridden = from_file.clone();
    overridden.extend(["--runtime-ratio", "0.1"]);
    let r = btr(&overridden);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(stderr(&r).contains("r_p = [0.1]"), "{}", stderr(&r));

    fs::write(&cfg, "no_such_knob = 1\n").unwrap();
    assert_eq!(code(&btr(&from_file)), 1);

    let mut bad_rule = base.to_vec();
    bad_rule.extend(["--merge-rule", "sometimes"]);
    assert_eq!(code(&btr(&bad_rule)), 1);

    let out = f.path("c.btr");
    let r = btr(&["compress", "--in", s(&raw), "--out", s(&out), "--ratio", "0.9"]);
    assert_eq!(code(&r), 1);
    assert!(!out.exists());
}

#[test]
fn usage_help_and_thread_cap() {
    assert_eq!(code(&btr(&["no-such-command"])), 1);
    assert_eq!(code(&btr(&["stats"])), 1);
    assert_eq!(code(&btr(&["--help"])), 0);
    let r = Command::new(env!("CARGO_BIN_EXE_btr"))
        .args(["stats", "/nonexistent"])
        .env("BTR_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&r), 1);
    let r = Command::new(env!("CARGO_BIN_EXE_btr"))
        .args(["stats", "/nonexistent/store.btr"])
        .env("BTR_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&r), 2);
}

#[test]
fn corrupt_store_is_a_data_error() {
    let f = fixture();
    let raw = f.path("raw.btr");
    assert_eq!(code(&f.precompute(&raw)), 0);
    let mut bytes = fs::read(&raw).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&raw, bytes).unwrap();
    let r = btr(&["stats", s(&raw)]);
    assert_eq!(code(&r), 2);
    assert!(stderr(&r).contains("corrupt store"));
}

#[test]
fn bench_report_schema() {
    let f = fixture();
    let raw = f.path("raw.btr");
    assert_eq!(code(&f.precompute(&raw)), 0);
    let queries = f.path("q.tsv");
    fs::write(&queries, "where is the cat\t10,20,30\nwhat sang\t30\n").unwrap();
    let csv = f.path("bench.csv");
    let r = btr(&[
        "bench", "--model", s(&f.model), "--store", s(&raw), "--queries", s(&queries), "--corpus",
        s(&f.corpus), "--repeats", "1", "--out", s(&csv),
    ]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "path,r_p,queries,repeats,qps_median,qps_min,qps_max,tokens_per_sec,lookup_ms,lower_ms,encoder_ms,decode_ms,peak_rss_kb"
    );
    let paths: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(paths, ["reference", "cached", "cached", "cached"]);
}

#[test]
fn selftest_passes_and_catches_an_injected_bug() {
    let ok = btr(&["selftest", "--seed", "3"]);
    assert_eq!(code(&ok), 0, "{}{}", stdout(&ok), stderr(&ok));
    let report = stdout(&ok);
    for suite in ["pack", "hamming", "merge", "gradient"] {
        assert!(report.lines().any(|l| l.starts_with("PASS") && l.contains(suite)), "{report}");
    }
    if cfg!(debug_assertions) {
        let bad = btr(&["selftest", "--inject-fault", "bit-order"]);
        assert_eq!(code(&bad), 3);
        let report = stdout(&bad);
        assert!(report.lines().any(|l| l.starts_with("FAIL") && l.contains("pack")), "{report}");
    }
}

#[test]
fn train_toy_writes_traces_model_and_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("toy.toml");
    fs::write(
        &cfg,
        r#"
batch_size = 2
eval_every = 2
[model]
d = 16
heads = 2
d_ff = 16
vocab_size = 64
max_query_len = 8
max_passage_len = 8
max_answer_len = 4
[task]
facts = 40
distractors = 2
dev_examples = 4
test_examples = 4
[steps]
step1 = 3
step2 = 2
step3 = 2
"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let r = btr(&["train-toy", "--config", s(&cfg), "--out", s(&out), "--seed", "5"]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    for i in 1..=3 {
        let trace = fs::read_to_string(out.join(format!("step{i}.csv"))).unwrap();
        assert_eq!(trace.lines().next().unwrap(), "step,task_loss,distill_loss,recovery_loss,dev_accuracy");
    }
    assert!(stdout(&r).contains("step3_dev_accuracy="));

    // The artifacts feed straight into the other subcommands.
    let store = dir.path().join("toy.btr");
    let p = btr(&[
        "precompute", "--corpus", s(&out.join("corpus.tsv")), "--model", s(&out.join("model.btrm")), "--out",
        s(&store),
    ]);
    assert_eq!(code(&p), 0, "{}", stderr(&p));
    assert_eq!(kv(&stdout(&btr(&["stats", s(&store)])), "passage_count"), "40");
    let b = btr(&[
        "bench", "--model", s(&out.join("model.btrm")), "--store", s(&store), "--queries",
        s(&out.join("queries.tsv")), "--repeats", "1",
    ]);
    assert_eq!(code(&b), 0, "{}", stderr(&b));

    let again = btr(&["train-toy", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&again), 2);
}
