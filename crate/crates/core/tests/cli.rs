use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sgseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgseq"))
        .args(args)
        .output()
        .expect("run sgseq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn golden(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data/golden")
        .join(name)
        .to_str()
        .unwrap()
        .to_string()
}

const VOCAB: &str = "[ENT]\n[REL]\n[UNK]\n[BOS]\n[EOS]\nand\n,\ngenerate\nthe\nscene\ngraph\nof\nman\nhorse\non\nnear\n";

fn write_vocab(dir: &Path) -> PathBuf {
    let p = dir.join("vocab.txt");
    fs::write(&p, VOCAB).unwrap();
    p
}

fn seq_json(tokens: &[u32], round: usize) -> String {
    let scores: Vec<String> = tokens.iter().map(|t| format!("[[{t},1.0]]")).collect();
    format!(
        r#"{{"tokens":{tokens:?},"sparse_scores":[{}],"round":{round},"seed":0}}"#,
        scores.join(",")
    )
}

#[test]
fn stats_on_hand_built_file() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path());
    // man [ENT] on [REL] horse [ENT] and man [ENT] on [REL] horse [ENT] [EOS]
    let a = [12, 0, 14, 1, 13, 0, 5, 12, 0, 14, 1, 13, 0, 4];
    // man [ENT] near [REL] horse [ENT] , [REL] horse [ENT] [EOS]
    let b = [12, 0, 15, 1, 13, 0, 6, 1, 13, 0, 4];
    // [REL] [EOS]
    let c = [1, 4];
    let text = format!(
        "{{\"format_version\":1,\"image_id\":\"x\",\"hidden_dim\":2,\"sequences\":[{},{}]}}\n\
         {{\"format_version\":1,\"image_id\":\"y\",\"hidden_dim\":2,\"sequences\":[{}]}}\n",
        seq_json(&a, 0),
        seq_json(&b, 1),
        seq_json(&c, 0)
    );
    let pred = dir.path().join("pred.jsonl");
    fs::write(&pred, text).unwrap();
    let o = sgseq(&["stats", "--vocab", vocab.to_str().unwrap(), "--predictions", pred.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(
        lines[0].split_whitespace().collect::<Vec<_>>(),
        ["#Trip", "#Uni.Trip", "#[REL]", "%Valid"]
    );
    // image x: 3 triplets, 2 unique, 4 [REL]; image y: 0, 0, 1
    assert_eq!(
        lines[1].split_whitespace().collect::<Vec<_>>(),
        ["1.50", "1.00", "2.50", "60.00"]
    );
    assert!(out.contains("valid_fraction 0.6\n"), "{out}");
}

#[test]
fn stats_rejects_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path());
    let pred = dir.path().join("empty.jsonl");
    fs::write(&pred, "").unwrap();
    let o = sgseq(&["stats", "--vocab", vocab.to_str().unwrap(), "--predictions", pred.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("empty.jsonl"), "{}", stderr(&o));
}

#[test]
fn eval_of_ground_truth_is_all_ones() {
    let gt = golden("gt.jsonl");
    let cats = golden("categories.json");
    let dir = tempfile::tempdir().unwrap();
    let kv = dir.path().join("sub/kv.txt");
    let o = sgseq(&[
        "eval", "--categories", &cats, "--pred", &gt, "--gt", &gt, "--out", kv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(kv).unwrap();
    for k in [20, 50, 100] {
        assert!(text.contains(&format!("R@{k} = 1\n")), "{text}");
        assert!(text.contains(&format!("mR@{k} = 1\n")), "{text}");
    }
}

#[test]
fn eval_rejects_mismatched_images() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    let first = fs::read_to_string(golden("pred.jsonl")).unwrap();
    fs::write(&pred, first.lines().next().unwrap()).unwrap();
    let o = sgseq(&[
        "eval",
        "--categories",
        &golden("categories.json"),
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        &golden("gt.jsonl"),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("b1"), "{}", stderr(&o));
}

#[test]
fn eval_reports_bad_row_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    let mut text = fs::read_to_string(golden("gt.jsonl")).unwrap();
    text.push_str("{\"format_version\":1,\"image_id\":\"z\",\"width\":10,\"height\":10,\"entities\":[{\"box\":[0,0,1,1],\"category\":\"man\"}],\"relations\":[{\"subject\":0,\"predicate\":\"on\",\"object\":5}]}\n");
    fs::write(&gt, text).unwrap();
    let o = sgseq(&[
        "eval",
        "--categories",
        &golden("categories.json"),
        "--pred",
        &golden("pred.jsonl"),
        "--gt",
        gt.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("gt.jsonl") && err.contains('6'), "{err}");
}

#[test]
fn parse_text() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write_vocab(dir.path());
    let o = sgseq(&[
        "parse",
        "--vocab",
        vocab.to_str().unwrap(),
        "--text",
        "man [ENT] on [REL] horse [ENT] and [REL] man",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let row: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(row["triplets"], serde_json::json!([["man", "on", "horse"]]));
    assert_eq!(row["n_rel_tokens"], 2);
}

#[test]
fn fixture_pipeline_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    let o = sgseq(&["make-fixture", "--out", fx.to_str().unwrap(), "--images", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = fx.join("run.config");
    let config = config.to_str().unwrap();

    let o = sgseq(&["serialize", "--config", config]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    assert!(stdout(&o).contains("[ENT]"));

    let o = sgseq(&["pipeline", "--config", config, "--rounds", "4", "--inline-hidden"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fx.join("out/graphs.jsonl").is_file());
    assert!(!fx.join("out/pred.hidden.bin").exists());
    let o = sgseq(&["eval", "--config", config, "--protocol", "pcls"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("PCls"));

    // re-ingesting the written sequences gives the same graphs
    let first = fs::read(fx.join("out/graphs.jsonl")).unwrap();
    let again = dir.path().join("again.jsonl");
    let o = sgseq(&[
        "pipeline",
        "--config",
        config,
        "--predictions-in",
        fx.join("out/pred.jsonl").to_str().unwrap(),
        "--graphs-out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&again).unwrap(), first);

    let o = sgseq(&["pipeline", "--config", config, "--weights", "missing-weights.json"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing-weights.json"), "{}", stderr(&o));
}

#[test]
fn gradcheck_verdicts() {
    assert!(sgseq(&["gradcheck", "--layers", "0"]).status.success());
    let bad = sgseq(&["gradcheck", "--corrupt-gradient"]);
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("FAIL"));
}
