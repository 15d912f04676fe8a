use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn synth(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/synth")
        .join(name)
}

fn lexdmv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexdmv"))
        .args(args)
        .env_remove("LEXDMV_CONFIG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lexdmv(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn field<'a>(report: &'a str, key: &str) -> &'a str {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
        .unwrap_or_else(|| panic!("no {key} in {report}"))
}

/// A small training corpus: the first `n` sentences of the synthetic split.
fn head_conll(dir: &Path, name: &str, n: usize) -> PathBuf {
    let text = fs::read_to_string(synth(name)).unwrap();
    let blocks: Vec<&str> = text.split("\n\n").take(n).collect();
    let path = dir.join(name);
    fs::write(&path, blocks.join("\n\n") + "\n\n").unwrap();
    path
}

fn preprocess(dir: &TempDir, cutoff: &str) -> PathBuf {
    let out = dir.path().join("corpus.json");
    ok(&[
        "preprocess",
        "--input",
        s(&synth("train.conll")),
        "--output",
        s(&out),
        "--cutoff",
        cutoff,
    ]);
    out
}

#[test]
fn preprocess_reports_tag_vocabulary_at_top_cutoff() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c.json");
    let report = ok(&[
        "preprocess",
        "--input",
        s(&synth("train.conll")),
        "--output",
        s(&out),
        "--cutoff",
        "100000",
    ]);
    assert_eq!(field(&report, "tags"), "7");
    assert_eq!(field(&report, "vocab_size"), "7");

    let report = ok(&[
        "preprocess",
        "--input",
        s(&synth("train.conll")),
        "--output",
        s(&out),
        "--cutoff",
        "20",
        "--max-len",
        "4",
    ]);
    assert!(field(&report, "vocab_size").parse::<usize>().unwrap() > 7);
    let corpus = lexdmv::persist::load_corpus(&out).unwrap();
    assert!(!corpus.sentences.is_empty());
    assert!(corpus.sentences.iter().all(|s| s.len() <= 4));
}

#[test]
fn missing_input_is_a_data_error() {
    let out = lexdmv(&[
        "preprocess",
        "--input",
        "/nonexistent/x.conll",
        "--output",
        "/tmp/never.json",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/x.conll"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let corpus = preprocess(&dir, "100000");
    let model = dir.path().join("m.json");
    let out = lexdmv(&[
        "train",
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
        "--mode",
        "soft",
        "--lr",
        "0.1",
    ]);
    assert_eq!(code(&out), 1);
    assert!(!model.exists());
    assert_eq!(code(&lexdmv(&["train", "--bogus"])), 1);
    assert_eq!(code(&lexdmv(&["--help"])), 0);
}

#[test]
fn neural_defaults_are_recorded_in_the_model() {
    let dir = TempDir::new().unwrap();
    let corpus = preprocess(&dir, "100000");
    let model = dir.path().join("m.json");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
        "--mode",
        "neural",
        "--max-iters",
        "1",
        "--warm-start-epochs",
        "1",
    ]);
    let m = lexdmv::persist::load_model(&model).unwrap();
    let cfg = m.network.expect("network saved").config().clone();
    assert_eq!(cfg.lr, 0.03);
    assert_eq!(cfg.batch, 200);
    assert_eq!(cfg.momentum, 0.9);
}

#[test]
fn every_init_scheme_trains() {
    let dir = TempDir::new().unwrap();
    let train = head_conll(dir.path(), "train.conll", 200);
    let corpus = dir.path().join("c.json");
    ok(&["preprocess", "--input", s(&train), "--output", s(&corpus)]);
    for init in ["km", "uniform", "random", "trees"] {
        let model = dir.path().join(format!("{init}.json"));
        let mut args = vec![
            "train",
            "--corpus",
            s(&corpus),
            "--output",
            s(&model),
            "--max-iters",
            "2",
            "--init",
            init,
        ];
        if init == "trees" {
            args.extend(["--init-trees", s(&train)]);
        }
        ok(&args);
        assert!(model.exists(), "{init}");
    }
    let out = lexdmv(&[
        "train",
        "--corpus",
        s(&corpus),
        "--output",
        s(&dir.path().join("x.json")),
        "--init",
        "trees",
        "--init-trees",
        s(&synth("val.conll")),
    ]);
    assert_eq!(code(&out), 2, "trees for another corpus are rejected");
}

#[test]
fn parse_then_eval_matches_eval_with_model() {
    let dir = TempDir::new().unwrap();
    let corpus = preprocess(&dir, "20");
    let model = dir.path().join("m.json");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
        "--max-iters",
        "5",
    ]);
    let gold = synth("test.conll");
    let parsed = dir.path().join("parsed.conll");
    ok(&[
        "parse",
        "--model",
        s(&model),
        "--input",
        s(&gold),
        "--output",
        s(&parsed),
    ]);
    let direct = ok(&["eval", "--gold", s(&gold), "--model", s(&model)]);
    let via_pred = ok(&["eval", "--gold", s(&gold), "--pred", s(&parsed)]);
    assert_eq!(field(&direct, "dda"), field(&via_pred, "dda"));
    assert_eq!(field(&direct, "tokens"), field(&via_pred, "tokens"));

    let gold_text = fs::read_to_string(&gold).unwrap();
    let parsed_text = fs::read_to_string(&parsed).unwrap();
    assert_eq!(gold_text.lines().count(), parsed_text.lines().count());
    for (g, p) in gold_text.lines().zip(parsed_text.lines()) {
        let (g, p): (Vec<&str>, Vec<&str>) = (g.split('\t').collect(), p.split('\t').collect());
        assert_eq!(g.len(), p.len());
        for c in 0..g.len() {
            if c != 6 {
                assert_eq!(g[c], p[c]);
            }
        }
    }
}

#[test]
fn single_token_sentence_gets_root_head() {
    let dir = TempDir::new().unwrap();
    let corpus = preprocess(&dir, "100000");
    let model = dir.path().join("m.json");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
        "--max-iters",
        "1",
    ]);
    let input = dir.path().join("one.conll");
    fs::write(
        &input,
        "1\truns\t_\tVB\tVB\t_\t7\t_\t_\t_\n\n1\tit\t_\tPRP\tPRP\t_\t2\t_\t_\t_\n2\t.\t_\t.\t.\t_\t0\t_\t_\t_\n\n",
    )
    .unwrap();
    let out = ok(&["parse", "--model", s(&model), "--input", s(&input)]);
    let heads: Vec<&str> = out
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').nth(6).unwrap())
        .collect();
    assert_eq!(heads, ["0", "0", "1"]);
}

#[test]
fn parse_rejects_unknown_tags() {
    let dir = TempDir::new().unwrap();
    let corpus = preprocess(&dir, "100000");
    let model = dir.path().join("m.json");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
        "--max-iters",
        "1",
    ]);
    let input = dir.path().join("bad.conll");
    fs::write(&input, "1\tzz\t_\tZZ\tZZ\t_\t0\t_\t_\t_\n\n").unwrap();
    let out = lexdmv(&["parse", "--model", s(&model), "--input", s(&input)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ZZ"));
}

#[test]
fn old_model_version_is_named() {
    let dir = TempDir::new().unwrap();
    let corpus = preprocess(&dir, "100000");
    let model = dir.path().join("m.json");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
        "--max-iters",
        "1",
    ]);
    let text = fs::read_to_string(&model)
        .unwrap()
        .replacen("\"version\":1", "\"version\":0", 1);
    fs::write(&model, text).unwrap();
    let out = lexdmv(&[
        "eval",
        "--gold",
        s(&synth("test.conll")),
        "--model",
        s(&model),
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.contains('0') && err.contains('1'), "{err}");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let corpus = preprocess(&dir, "100000");
    let config = dir.path().join("run.cfg");
    fs::write(&config, "# experiment\nmax_iters=2\nll-tol=0\n").unwrap();
    let model = dir.path().join("m.json");
    let report = ok(&[
        "train",
        "--config",
        s(&config),
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
    ]);
    assert_eq!(field(&report, "iterations"), "2");
    let report = ok(&[
        "train",
        "--config",
        s(&config),
        "--corpus",
        s(&corpus),
        "--output",
        s(&model),
        "--max-iters",
        "3",
    ]);
    assert_eq!(field(&report, "iterations"), "3");

    let out = Command::new(env!("CARGO_BIN_EXE_lexdmv"))
        .args(["train", "--corpus", s(&corpus), "--output", s(&model)])
        .env("LEXDMV_CONFIG", &config)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        field(&String::from_utf8(out.stdout).unwrap(), "iterations"),
        "2"
    );
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let out = lexdmv(&["verify", "--cases", "20", "--grad-samples", "100"]);
    assert_eq!(code(&out), 0);
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("max inside rel err"));
    assert!(report.contains("max gradient rel err"));
    let out = lexdmv(&[
        "verify",
        "--cases",
        "5",
        "--grad-samples",
        "100",
        "--inject-fault",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn sweep_uses_chinese_cutoffs() {
    let dir = TempDir::new().unwrap();
    let train = head_conll(dir.path(), "train.conll", 120);
    let val = head_conll(dir.path(), "val.conll", 30);
    let test = head_conll(dir.path(), "test.conll", 30);
    let out = dir.path().join("sweep.csv");
    ok(&[
        "sweep",
        "--train",
        s(&train),
        "--val",
        s(&val),
        "--test",
        s(&test),
        "--output",
        s(&out),
        "--language",
        "chinese",
        "--sizes",
        "60",
        "--max-iters",
        "1",
        "--jobs",
        "2",
    ]);
    let mut rdr = csv::Reader::from_path(&out).unwrap();
    assert_eq!(
        rdr.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "cutoff",
            "vocab_size",
            "corpus_size",
            "seed",
            "init",
            "mode",
            "dda_val",
            "dda_test",
            "seconds",
            "status"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 9 * 3 + 9);
    let cutoffs: Vec<&str> = rows.iter().step_by(4).map(|r| r.get(0).unwrap()).collect();
    assert_eq!(
        cutoffs,
        ["100000", "100", "70", "50", "40", "30", "20", "12", "10"]
    );
    for r in &rows {
        assert_eq!(&r[8], "", "no wall times without --timing");
    }
}

#[test]
fn sweep_rejects_zero_cutoff() {
    let out = lexdmv(&[
        "sweep",
        "--train",
        s(&synth("train.conll")),
        "--val",
        s(&synth("val.conll")),
        "--test",
        s(&synth("test.conll")),
        "--output",
        "/tmp/never.csv",
        "--cutoffs",
        "0,5",
    ]);
    assert_eq!(code(&out), 1);
}
