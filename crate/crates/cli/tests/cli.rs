use std::path::Path;
use std::process::{Command, Output};

fn res(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_res"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = res(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = r#"
epochs = 1
batch_size = 4
num_candidates = 3
vocab_size = 300
valid_mentions = 10
eval_k = 4
[model]
hidden = 16
layers = 1
heads = 2
ffn = 32
segment_len = 32
max_positions = 80
"#;

fn pipeline(dir: &Path, system: &str) -> String {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(
        &["synth", "--out", "w", "--seed", "3", "--domains", "4", "--entities", "8", "--mentions", "12"],
        dir,
    );
    ok(&["retrieve", "--data", "w", "--k", "4"], dir);
    ok(
        &["train", "--config", "tiny.toml", "--data", "w", "--out", "run", "--system", system],
        dir,
    );
    ok(
        &[
            "predict", "--model", "run/model.ckpt", "--data", "w", "--k", "4", "--system", system, "--out",
            "pred.jsonl",
        ],
        dir,
    );
    ok(
        &[
            "eval", "--pred", "pred.jsonl", "--data", "w", "--k", "4", "--out", "report.json", "--model",
            "run/model.ckpt", "--scaling", "1,2,4", "--plot", "scaling.svg",
        ],
        dir,
    );
    std::fs::read_to_string(dir.join("report.json")).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let report = pipeline(dir.path(), "res");
    let json: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(json["k"], 4);
    assert_eq!(json["scaling"].as_array().unwrap().len(), 3);
    assert_eq!(json["scaling"][0]["normalized_accuracy"], 1.0);
    for f in [
        "w/entities.jsonl",
        "w/mentions.jsonl",
        "w/partition.toml",
        "w/candidates.jsonl",
        "run/model.ckpt",
        "run/model.ckpt.manifest.json",
        "run/loss.jsonl",
        "pred.jsonl",
        "scaling.svg",
    ] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let loss = std::fs::read_to_string(dir.path().join("run/loss.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(loss.lines().next().unwrap()).unwrap();
    assert!(first["step"].is_u64() && first["loss"].is_f64());
}

#[test]
fn same_seed_gives_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(pipeline(a.path(), "res"), pipeline(b.path(), "res"));
}

#[test]
fn baseline_systems_run_end_to_end() {
    for system in ["res-no-select", "cross-encoder"] {
        let dir = tempfile::tempdir().unwrap();
        pipeline(dir.path(), system);
    }
}

#[test]
fn diff_lists_disagreements() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), "res");
    let out = ok(
        &[
            "eval", "--pred", "pred.jsonl", "--data", "w", "--k", "4", "--out", "r2.json", "--diff", "pred.jsonl",
        ],
        dir.path(),
    );
    assert!(out.contains("0 disagreements"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = res(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = res(&["synth", "--out", "w", "--confusability", "medium"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = res(&["retrieve", "--data", "does-not-exist"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));
}

#[test]
fn unresolvable_gold_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::create_dir(p.join("docs")).unwrap();
    std::fs::write(
        p.join("docs/alpha.json"),
        "{\"document_id\": \"a1\", \"title\": \"Alpha\", \"text\": \"Alpha is a thing\"}\n",
    )
    .unwrap();
    std::fs::write(
        p.join("mentions.json"),
        "{\"mention_id\": \"m1\", \"surface\": \"Alpha\", \"left_context\": \"\", \"right_context\": \"\", \"gold_entity_id\": \"zz\", \"domain\": \"alpha\"}\n",
    )
    .unwrap();
    std::fs::write(p.join("part.toml"), "[partition]\ntrain = [\"alpha\"]\nvalid = []\ntest = []\n").unwrap();
    let out = res(
        &["ingest", "--documents", "docs", "--mentions", "mentions.json", "--partition", "part.toml", "--out", "d"],
        p,
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("m1"), "{err}");
}

#[test]
fn ingest_round_trips_a_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::create_dir(p.join("docs")).unwrap();
    for (domain, id, title) in [("alpha", "a1", "Alpha"), ("beta", "b1", "Beta")] {
        std::fs::write(
            p.join(format!("docs/{domain}.json")),
            format!("{{\"document_id\": \"{id}\", \"title\": \"{title}\", \"text\": \"{title} is a thing\"}}\n"),
        )
        .unwrap();
    }
    std::fs::write(
        p.join("mentions.json"),
        "{\"mention_id\": \"m1\", \"surface\": \"Alpha\", \"left_context\": \"see\", \"right_context\": \"now\", \"gold_entity_id\": \"a1\", \"domain\": \"alpha\"}\n\
         {\"mention_id\": \"m2\", \"surface\": \"Beta\", \"left_context\": \"\", \"right_context\": \"\", \"gold_entity_id\": \"b1\", \"domain\": \"beta\"}\n",
    )
    .unwrap();
    std::fs::write(p.join("part.toml"), "[partition]\ntrain = [\"alpha\"]\nvalid = []\ntest = [\"beta\"]\n").unwrap();
    ok(
        &["ingest", "--documents", "docs", "--mentions", "mentions.json", "--partition", "part.toml", "--out", "d"],
        p,
    );
    let out = ok(&["retrieve", "--data", "d", "--k", "1"], p);
    assert!(out.contains("recall@1 = 1.0000"), "{out}");
}
