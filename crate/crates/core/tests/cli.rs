use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lgcav::data::read_manifest;

const BIN: &str = env!("CARGO_BIN_EXE_lgcav");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "lgcav {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synthetic(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "--seed",
        &seed.to_string(),
        "make-synthetic",
        "--out",
        s(&out),
        "--n",
        &n.to_string(),
        "--size",
        "16",
        "--name",
        name,
    ]);
    out
}

fn tsv(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

fn column(table: &[Vec<String>], name: &str) -> String {
    let i = table[0].iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"));
    table[1][i].clone()
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_one() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["pretrain", "--help"]).status.code(), Some(0));
    let bad = run(&["pretrain", "--no-such-flag"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(!bad.stderr.is_empty());
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn missing_input_file_is_a_system_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["validate-manifest", s(&tmp.path().join("absent.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_triplets_keeps_top_thirty_percent() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = synthetic(tmp.path(), "ten", 10, 1);
    let out = tmp.path().join("top.jsonl");
    let text = ok(&[
        "generate-triplets",
        "--corpus",
        s(&syn.join("corpus.jsonl")),
        "--k-percent",
        "30",
        "--output",
        s(&out),
    ]);
    let table = tsv(&text);
    assert_eq!(column(&table, "videos_in"), "10");
    assert_eq!(column(&table, "records_out"), "3");
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.header.filter_k_percent, Some(30.0));
    assert_eq!(m.header.pre_filter_count, Some(10));
    assert_eq!(ok(&["validate-manifest", s(&out)]).trim_end().lines().count(), 2);
}

#[test]
fn generate_triplets_at_k_100_keeps_everything() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = synthetic(tmp.path(), "five", 5, 2);
    let out = tmp.path().join("all.jsonl");
    ok(&["generate-triplets", "--corpus", s(&syn.join("corpus.jsonl")), "--output", s(&out)]);
    assert_eq!(read_manifest(&out).unwrap().len(), 5);
}

#[test]
fn generate_triplets_rejects_out_of_range_k() {
    let tmp = tempfile::tempdir().unwrap();
    let syn = synthetic(tmp.path(), "few", 3, 2);
    let out = run(&[
        "generate-triplets",
        "--corpus",
        s(&syn.join("corpus.jsonl")),
        "--k-percent",
        "0",
        "--output",
        s(&tmp.path().join("x.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_concatenates_manifests_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthetic(tmp.path(), "a", 8, 1);
    let b = synthetic(tmp.path(), "b", 8, 2);
    let digest = |name: &str| {
        let ckpt = tmp.path().join(name);
        let text = ok(&[
            "pretrain",
            "--manifest",
            s(&a.join("manifest.jsonl")),
            "--manifest",
            s(&b.join("manifest.jsonl")),
            "--config",
            s(&a.join("config.toml")),
            "--steps",
            "3",
            "--batch-size",
            "4",
            "--checkpoint",
            s(&ckpt),
        ]);
        let table = tsv(&text);
        assert_eq!(column(&table, "samples"), "16");
        assert_eq!(column(&table, "steps"), "3");
        let log = std::fs::read_to_string(tmp.path().join(format!("{name}.log.jsonl"))).unwrap();
        assert_eq!(log.lines().count(), 3);
        column(&table, "checkpoint_sha256")
    };
    assert_eq!(digest("one.ckpt"), digest("two.ckpt"));
}

#[test]
fn cavmae_log_has_zero_language_terms() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthetic(tmp.path(), "a", 8, 3);
    let ckpt = tmp.path().join("base.ckpt");
    ok(&[
        "pretrain",
        "--manifest",
        s(&a.join("manifest.jsonl")),
        "--config",
        s(&a.join("config.toml")),
        "--mode",
        "pretrain_cavmae",
        "--steps",
        "2",
        "--batch-size",
        "4",
        "--text-encoder",
        "no-such-encoder",
        "--checkpoint",
        s(&ckpt),
    ]);
    let log = std::fs::read_to_string(tmp.path().join("base.ckpt.log.jsonl")).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["loss"]["a2t"], 0.0);
        assert_eq!(v["loss"]["v2t"], 0.0);
    }
}

#[test]
fn eval_retrieval_with_single_k_prints_one_recall_column() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthetic(tmp.path(), "a", 8, 4);
    let ckpt = tmp.path().join("m.ckpt");
    let manifest = a.join("manifest.jsonl");
    ok(&[
        "pretrain",
        "--manifest",
        s(&manifest),
        "--config",
        s(&a.join("config.toml")),
        "--steps",
        "1",
        "--batch-size",
        "4",
        "--checkpoint",
        s(&ckpt),
    ]);
    let table = tsv(&ok(&["eval-retrieval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--k", "1"]));
    assert_eq!(table[0], ["direction", "R@1"]);
    assert_eq!(table.len(), 3);
    assert!(table[1..].iter().all(|row| row.len() == 2));
    let bad = run(&["eval-retrieval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--k", "9"]);
    assert_eq!(bad.status.code(), Some(1));
    let sub = |size: &str| {
        run(&[
            "eval-retrieval",
            "--checkpoint",
            s(&ckpt),
            "--manifest",
            s(&manifest),
            "--k",
            "1",
            "--gallery-size",
            size,
        ])
    };
    let small = sub("4");
    assert!(small.status.success());
    assert_eq!(small.stdout, sub("4").stdout);
    assert_eq!(sub("9").status.code(), Some(1));
}

#[test]
fn finetune_reports_metric_and_rejects_mismatched_task() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synthetic(tmp.path(), "a", 8, 5);
    let ckpt = tmp.path().join("m.ckpt");
    let config = a.join("config.toml");
    ok(&[
        "pretrain",
        "--manifest",
        s(&a.join("manifest.jsonl")),
        "--config",
        s(&config),
        "--steps",
        "1",
        "--batch-size",
        "4",
        "--checkpoint",
        s(&ckpt),
    ]);
    let tuned = tmp.path().join("ft.ckpt");
    let labels = a.join("labels.jsonl");
    let multilabels = a.join("multilabels.jsonl");
    let bad_out = tmp.path().join("bad.ckpt");
    let ml_out = tmp.path().join("ml.ckpt");
    let common = ["--config", s(&config), "--steps", "2", "--batch-size", "4"];
    let mut args = vec![
        "finetune",
        "--checkpoint",
        s(&ckpt),
        "--labels",
        s(&labels),
        "--task",
        "multiclass",
        "--output",
        s(&tuned),
    ];
    args.extend(common);
    let table = tsv(&ok(&args));
    assert_eq!(column(&table, "metric"), "accuracy");
    let acc: f64 = column(&table, "value").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let eval = tsv(&ok(&[
        "eval-classify",
        "--checkpoint",
        s(&tuned),
        "--labels",
        s(&labels),
        "--task",
        "multiclass",
    ]));
    assert_eq!(eval.len(), 2);

    let mut args = vec![
        "finetune",
        "--checkpoint",
        s(&ckpt),
        "--labels",
        s(&labels),
        "--task",
        "multilabel",
        "--output",
        s(&bad_out),
    ];
    args.extend(common);
    assert_eq!(run(&args).status.code(), Some(1));

    let mut args = vec![
        "finetune",
        "--checkpoint",
        s(&ckpt),
        "--labels",
        s(&multilabels),
        "--task",
        "multilabel",
        "--output",
        s(&ml_out),
    ];
    args.extend(common);
    let table = tsv(&ok(&args));
    assert_eq!(column(&table, "metric"), "mAP");
}

#[test]
fn workers_zero_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["--workers", "0", "make-synthetic", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}
