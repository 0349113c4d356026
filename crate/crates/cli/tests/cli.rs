use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[encoder]
text_dim = 16
image_dim = 16
embed_dim = 8
heads = 2
num_patches = 4
mm_tokens = 2

[synth]
n_docs = 100
n_train = 120
n_test_seen = 20
n_test_unseen = 20

[train]
epochs = 1
learning_rate = 0.003
optimizer = "adam"

[index]
nbits = 8
"#;

fn mmlir(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mmlir"));
    cmd.args(args).env_remove("MMLIR_CONFIG");
    if let Some(c) = config {
        cmd.env("MMLIR_CONFIG", c);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exists_for_every_command() {
    ok(mmlir(&["--help"], None));
    for c in ["synth", "augment", "datagen", "train", "index", "search", "eval", "ablate", "probe"] {
        let text = ok(mmlir(&[c, "--help"], None));
        assert!(text.contains("Usage:"), "{c}");
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[train]\nbatchsize = 4\n");
    let out = mmlir(&["synth", "--out", s(&dir.path().join("o"))], Some(&cfg));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batchsize"));

    let out = mmlir(
        &["augment", "--kb", s(&dir.path().join("missing.jsonl")), "--out", s(&dir.path().join("d.jsonl"))],
        None,
    );
    assert_eq!(out.status.code(), Some(2));

    let out = mmlir(&["probe", "--mode", "sideways", "--report", "r.csv"], None);
    assert_eq!(out.status.code(), Some(2));
}

/// A one-document knowledge base always returns that document.
#[test]
fn single_document_search() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, &SMALL.replace("epochs = 1", "epochs = 0"));
    fs::write(
        d.join("kb.jsonl"),
        r#"{"doc_id":"only","title":"Lone Peak","body":"Lone Peak rises above the valley.","main_image_key":"entity:Lone Peak"}"#,
    )
    .unwrap();
    ok(mmlir(&["augment", "--kb", s(&d.join("kb.jsonl")), "--out", s(&d.join("docs.jsonl"))], Some(&cfg)));
    fs::write(
        d.join("samples.jsonl"),
        r#"{"sample_id":"q","question":"Which peak is this?","query_image_key":"entity:Lone Peak","answer":"x","gt_doc_id":"only","split":null,"query_entity":"Lone Peak","qualifying_entity":null,"shortcut":true}"#,
    )
    .unwrap();
    ok(mmlir(
        &["train", "--docs", s(&d.join("docs.jsonl")), "--samples", s(&d.join("samples.jsonl")), "--out", s(&d.join("p.bin"))],
        Some(&cfg),
    ));
    ok(mmlir(
        &["index", "--docs", s(&d.join("docs.jsonl")), "--params", s(&d.join("p.bin")), "--out", s(&d.join("i.bin"))],
        Some(&cfg),
    ));
    let out = ok(mmlir(
        &["search", "--index", s(&d.join("i.bin")), "--params", s(&d.join("p.bin")), "--image", "entity:Lone Peak", "--text", "Which peak?"],
        Some(&cfg),
    ));
    assert!(out.starts_with("1\tonly\t"), "{out}");
}

/// synth -> augment -> datagen -> train -> index -> eval on 100 documents.
#[test]
fn full_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, SMALL);
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let o = d.join(tag);
        let p = |f: &str| o.join(f);
        ok(mmlir(&["synth", "--out", s(&o)], Some(&cfg)));
        ok(mmlir(&["augment", "--kb", s(&p("kb.jsonl")), "--out", s(&p("docs2.jsonl"))], Some(&cfg)));
        ok(mmlir(
            &["datagen", "--docs", s(&p("docs2.jsonl")), "--typemap", s(&p("typemap.json")), "--out", s(&p("dg"))],
            Some(&cfg),
        ));
        ok(mmlir(
            &["train", "--docs", s(&p("docs2.jsonl")), "--samples", s(&p("train.jsonl")), "--out", s(&p("params.bin")), "--stats", s(&p("stats.json"))],
            Some(&cfg),
        ));
        ok(mmlir(
            &["index", "--docs", s(&p("docs2.jsonl")), "--params", s(&p("params.bin")), "--out", s(&p("index.bin"))],
            Some(&cfg),
        ));
        let table = ok(mmlir(
            &["eval", "--docs", s(&p("docs2.jsonl")), "--params", s(&p("params.bin")), "--samples", s(&p("test_unseen.jsonl")), "--index", s(&p("index.bin")), "--report", s(&p("report.csv"))],
            Some(&cfg),
        ));
        assert!(table.contains("recall"));
        let csv = fs::read_to_string(p("report.csv")).unwrap();
        assert!(csv.lines().count() > 1);
        assert_eq!(fs::read(p("docs.jsonl")).unwrap(), fs::read(p("docs2.jsonl")).unwrap());
        ["kb.jsonl", "train.jsonl", "test_seen.jsonl", "dg/kept.jsonl", "dg/rejected.jsonl", "params.bin", "stats.json", "index.bin", "report.csv"]
            .iter()
            .map(|f| fs::read(p(f)).unwrap())
            .collect()
    };
    assert_eq!(run("a"), run("b"));
}

/// An exhaustive lossless index ranks exactly like exact scoring.
#[test]
fn exhaustive_index_matches_exact_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, &SMALL.replace("n_docs = 100", "n_docs = 60").replace("n_train = 120", "n_train = 60"));
    let p = |f: &str| d.join(f);
    ok(mmlir(&["synth", "--out", s(d)], Some(&cfg)));
    ok(mmlir(&["train", "--docs", s(&p("docs.jsonl")), "--samples", s(&p("train.jsonl")), "--out", s(&p("params.bin"))], Some(&cfg)));
    ok(mmlir(
        &["index", "--exact", "--docs", s(&p("docs.jsonl")), "--params", s(&p("params.bin")), "--out", s(&p("index.bin"))],
        Some(&cfg),
    ));
    let (docs, params, samples) = (p("docs.jsonl"), p("params.bin"), p("test_seen.jsonl"));
    let (index, a, b) = (p("index.bin"), p("a.csv"), p("b.csv"));
    let common = ["eval", "--docs", s(&docs), "--params", s(&params), "--samples", s(&samples)];
    let mut with_index = common.to_vec();
    with_index.extend(["--index", s(&index), "--report", s(&a)]);
    let mut exact = common.to_vec();
    exact.extend(["--report", s(&b)]);
    ok(mmlir(&with_index, Some(&cfg)));
    ok(mmlir(&exact, Some(&cfg)));
    assert_eq!(fs::read_to_string(p("a.csv")).unwrap(), fs::read_to_string(p("b.csv")).unwrap());
}

#[test]
fn data_and_numeric_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, &SMALL.replace("epochs = 1", "epochs = 0"));
    let p = |f: &str| d.join(f);
    fs::write(p("kb.jsonl"), "{not json}\n").unwrap();
    let out = mmlir(&["augment", "--kb", s(&p("kb.jsonl")), "--out", s(&p("docs.jsonl"))], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));

    fs::write(p("index.bin"), b"MVLI garbage").unwrap();
    ok(mmlir(&["synth", "--out", s(d)], Some(&cfg)));
    ok(mmlir(&["train", "--docs", s(&p("docs.jsonl")), "--samples", s(&p("train.jsonl")), "--out", s(&p("params.bin"))], Some(&cfg)));
    let out = mmlir(&["search", "--index", s(&p("index.bin")), "--params", s(&p("params.bin")), "--image", "entity:x"], Some(&cfg));
    assert_eq!(out.status.code(), Some(3));

    let mut bytes = fs::read(p("params.bin")).unwrap();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    fs::write(p("nan.bin"), bytes).unwrap();
    let out = mmlir(
        &["index", "--docs", s(&p("docs.jsonl")), "--params", s(&p("nan.bin")), "--out", s(&p("i.bin"))],
        Some(&cfg),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn seed_flag_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, SMALL);
    ok(mmlir(&["synth", "--out", s(&d.join("a"))], Some(&cfg)));
    ok(mmlir(&["--seed", "4", "synth", "--out", s(&d.join("b"))], Some(&cfg)));
    assert_ne!(fs::read(d.join("a/kb.jsonl")).unwrap(), fs::read(d.join("b/kb.jsonl")).unwrap());
}
