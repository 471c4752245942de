use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mape(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mape")).args(args).output().expect("run mape")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tsv_value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_toy(dir: &Path) {
    let o = mape(&[
        "make-toy",
        "--out",
        p(dir),
        "--parallel-train",
        "24",
        "--synthetic-train",
        "24",
        "--authentic-train",
        "16",
        "--authentic-test",
        "6",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn evaluate_prints_metric_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    fs::write(&hyp, "a b c d\nthe cat sat\n").unwrap();
    fs::write(&reference, "a b c d e\nthe cat sat\n").unwrap();
    let o = mape(&["evaluate", "--hyp", p(&hyp), "--ref", p(&reference), "--per-sentence"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("metric\tvalue\n"));
    // One deletion over eight reference tokens.
    assert_eq!(tsv_value(&out, "TER"), "12.50");
    assert_eq!(tsv_value(&out, "sentences"), "2");
    assert_eq!(tsv_value(&out, "TER[1]"), "20.0000");
    assert_eq!(tsv_value(&out, "TER[2]"), "0.0000");

    fs::write(&hyp, "a b c d\n").unwrap();
    fs::write(&reference, "a b c d e\n").unwrap();
    let o = mape(&["evaluate", "--hyp", p(&hyp), "--ref", p(&reference)]);
    assert_eq!(tsv_value(&stdout(&o), "BLEU"), "77.88");
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let hyp = dir.path().join("hyp.txt");
    let reference = dir.path().join("ref.txt");
    fs::write(&hyp, "a\nb\n").unwrap();
    fs::write(&reference, "a\n").unwrap();
    let o = mape(&["evaluate", "--hyp", p(&hyp), "--ref", p(&reference)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: "), "{}", stderr(&o));

    let o = mape(&["evaluate", "--hyp", p(&dir.path().join("missing")), "--ref", p(&reference)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing"));
}

#[test]
fn significance_of_identical_systems() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let reference = dir.path().join("ref.txt");
    fs::write(&a, "a b\nc d e\nf\n").unwrap();
    fs::write(&reference, "a b x\nd c e\nf g\n").unwrap();
    let o = mape(&["significance", "--a", p(&a), "--b", p(&a), "--ref", p(&reference), "--trials", "1000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(tsv_value(&out, "delta"), "0.0000");
    assert_eq!(tsv_value(&out, "p"), "1.0000");
    assert_eq!(tsv_value(&out, "trials"), "1000");
}

#[test]
fn toy_corpora_feed_the_corpus_tools() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    small_toy(&toy);
    for f in ["world.json", "en-hi/parallel/train.src", "en-mr/authentic/test/corpus.pe"] {
        assert!(toy.join(f).exists(), "{f}");
    }

    let synth = dir.path().join("synth");
    let o = mape(&[
        "build-synthetic",
        "--src",
        p(&toy.join("en-hi/parallel/train.src")),
        "--ref",
        p(&toy.join("en-hi/parallel/train.ref")),
        "--source-lang",
        "eng_Latn",
        "--target-lang",
        "hin_Deva",
        "--toy-world",
        p(&toy.join("world.json")),
        "--out",
        p(&synth),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(synth.join("corpus.src")).unwrap().lines().count(), 24);

    let merged = dir.path().join("merged");
    let o = mape(&[
        "merge",
        "--corpus",
        p(&toy.join("en-hi/authentic/train")),
        "--corpus",
        p(&toy.join("en-mr/authentic/train")),
        "--seed",
        "3",
        "--langid-mode",
        "all",
        "--out",
        p(&merged),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let src = fs::read_to_string(merged.join("corpus.src")).unwrap();
    assert_eq!(src.lines().count(), 32);
    assert!(src.lines().all(|l| l.starts_with("hin_Deva ") || l.starts_with("mar_Deva ")));

    let split = dir.path().join("split");
    let o = mape(&["split-domains", "--corpus", p(&merged), "--out", p(&split)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let total: usize = fs::read_dir(&split)
        .unwrap()
        .map(|e| fs::read_to_string(e.unwrap().path().join("corpus.src")).unwrap().lines().count())
        .sum();
    assert_eq!(total, 32);

    let aug = dir.path().join("aug");
    let o = mape(&[
        "augment",
        "--corpus",
        p(&toy.join("en-hi/synthetic/train")),
        "--corpus",
        p(&toy.join("en-mr/synthetic/train")),
        "--mode",
        "pairs",
        "--n",
        "10",
        "--seed",
        "5",
        "--toy-world",
        p(&toy.join("world.json")),
        "--out",
        p(&aug),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(aug.join("corpus.src")).unwrap().lines().count(), 10);
}

#[test]
fn train_then_decode() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    small_toy(&toy);
    let config = dir.path().join("tiny.toml");
    fs::write(
        &config,
        "batch_size = 8\nmax_epochs = 1\npatience = 1\nwarmup_steps = 5\nbpe_merges = 100\n\
         embed_dim = 16\nff_dim = 24\nencoder_layers = 1\ndecoder_layers = 1\nheads = 2\nmax_len = 16\nadapter_dim = 4\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = mape(&[
        "train",
        "--data",
        p(&toy),
        "--system",
        "baseline-ape",
        "--pair",
        "en-hi",
        "--config",
        p(&config),
        "--out",
        p(&run),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("finetune"));
    for f in ["finetune.ckpt", "train_log.jsonl", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let hyps = dir.path().join("hyps.txt");
    let test = toy.join("en-hi/authentic/test");
    let o = mape(&[
        "decode",
        "--ckpt",
        p(&run.join("finetune.ckpt")),
        "--corpus",
        p(&test),
        "--beam",
        "2",
        "--out",
        p(&hyps),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&hyps).unwrap().lines().count(), 6);
    let o = mape(&["evaluate", "--hyp", p(&hyps), "--ref", p(&test.join("corpus.pe"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tsv_value(&stdout(&o), "sentences"), "6");
}

#[test]
fn report_exits_two_when_a_row_fails() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    small_toy(&toy);
    let grid = dir.path().join("grid.toml");
    // An odd augmentation size cannot be split over two pairs.
    fs::write(
        &grid,
        "data = \"toy\"\nseed = 1\nsystems = [\"do-nothing\", \"w-langid+pairs\"]\naugmentation_size = 3\n",
    )
    .unwrap();
    let o = mape(&["report", "--grid", p(&grid)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("Do Nothing"), "{out}");
    let tsv = fs::read_to_string(dir.path().join("runs/report.tsv")).unwrap();
    assert!(tsv.lines().any(|l| l.starts_with("w-langid+pairs\t") && l.contains("failed")), "{tsv}");
}
