use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn grcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = grcn(args);
    assert!(
        out.status.success(),
        "grcn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    grcn(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_spec(dir: &Path, noise: f64) -> PathBuf {
    let path = dir.join("spec.json");
    let spec = format!(
        r#"{{"num_users": 10, "num_items": 24, "num_clusters": 2,
            "modalities": [{{"modality": "visual", "width": 4}}],
            "interactions_per_user": 8, "noise_fraction": {noise},
            "cluster_separation": 2.0, "feature_noise_scale": 0.3, "seed": 3}}"#
    );
    fs::write(&path, spec).unwrap();
    path
}

fn synth(dir: &Path, noise: f64) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--config", s(&write_spec(dir, noise)), "--out", s(&data)]);
    data
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        "[hyper]\nembed_dim = 8\nproj_dim = 4\nmodalities = [\"visual\"]\nlearning_rate = 0.01\nmax_epochs = 3\n",
    )
    .unwrap();
    path
}

fn digest(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn synth_writes_four_files_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 0.25);
    let mut files: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["features_visual.txt", "interactions.tsv", "labels.tsv", "spec.json"]);

    let b = dir.path().join("again");
    ok(&["synth", "--config", s(&dir.path().join("spec.json")), "--out", s(&b)]);
    for f in &files {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f}");
    }
}

#[test]
fn noiseless_synth_labels_are_all_true() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.0);
    let labels = fs::read_to_string(data.join("labels.tsv")).unwrap();
    assert!(labels.lines().all(|l| l.ends_with("\ttrue_positive")));
}

#[test]
fn one_epoch_gives_one_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.25);
    let out = dir.path().join("run");
    let cfg = small_config(dir.path());
    let stdout = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--max-epochs", "1"]);
    assert!(stdout.contains("epochs 1 "), "{stdout}");
    let report = fs::read_to_string(out.join("train_report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 1);
    assert!(report.contains("\"val_recall\""));
    assert!(out.join("checkpoint.json").exists());
    assert!(out.join("id_map.json").exists());
}

#[test]
fn id_only_exports_id_width_representations() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.25);
    let run = dir.path().join("run");
    let cfg = small_config(dir.path());
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--variant", "id-only"]);
    let exported = dir.path().join("emb");
    ok(&[
        "export-embeddings",
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--data",
        s(&data),
        "--out",
        s(&exported),
    ]);
    let items = fs::read_to_string(exported.join("item_embeddings.tsv")).unwrap();
    assert_eq!(items.lines().count(), 24);
    // Raw id column plus D = 8 values.
    assert!(items.lines().all(|l| l.split('\t').count() == 9));

    let full = dir.path().join("full");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&full)]);
    ok(&[
        "export-embeddings",
        "--checkpoint",
        s(&full.join("checkpoint.json")),
        "--data",
        s(&data),
        "--out",
        s(&exported),
    ]);
    let users = fs::read_to_string(exported.join("user_embeddings.tsv")).unwrap();
    assert!(users.lines().all(|l| l.split('\t').count() == 1 + 8 + 4));
}

#[test]
fn eval_defaults_and_splits() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.25);
    let run = dir.path().join("run");
    let cfg = small_config(dir.path());
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ck = run.join("checkpoint.json");
    let test: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data)])).unwrap();
    assert_eq!(test["k"], 10);
    assert_eq!(test["users_evaluated"], 10);
    let val: serde_json::Value = serde_json::from_str(&ok(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--split",
        "validation",
        "--k",
        "5",
    ]))
    .unwrap();
    assert_eq!(val["k"], 5);
    for key in ["precision", "recall", "ndcg"] {
        let x = val[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }
}

#[test]
fn eval_rejects_foreign_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.25);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&small_config(dir.path())), "--data", s(&data), "--out", s(&run)]);
    let other = dir.path().join("other");
    fs::create_dir_all(&other).unwrap();
    fs::copy(data.join("features_visual.txt"), other.join("features_visual.txt")).unwrap();
    fs::write(other.join("interactions.tsv"), "a\t0\nb\t1\n").unwrap();
    let out = grcn(&["eval", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&other)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint covers"));
}

#[test]
fn inspect_edges_with_and_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.25);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&small_config(dir.path())), "--data", s(&data), "--out", s(&run)]);
    let ck = run.join("checkpoint.json");
    let plain = ok(&["inspect-edges", "--checkpoint", s(&ck), "--data", s(&data)]);
    assert!(plain.starts_with("user\titem\ts_user_from_item\ts_item_from_user\tvisual_user_from_item"));
    assert!(!plain.contains("edge_weight_auc"));
    let labeled = ok(&[
        "inspect-edges",
        "--checkpoint",
        s(&ck),
        "--data",
        s(&data),
        "--labels",
        s(&data.join("labels.tsv")),
    ]);
    let last = labeled.lines().last().unwrap();
    let auc: f64 = last.strip_prefix("# edge_weight_auc\t").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let bad = dir.path().join("bad_labels.tsv");
    fs::write(&bad, "0\t999\ttrue_positive\n").unwrap();
    assert_eq!(code(&["inspect-edges", "--checkpoint", s(&ck), "--data", s(&data), "--labels", s(&bad)]), 2);
}

#[test]
fn degree_one_user_has_unit_modality_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("interactions.tsv"), "solo\t2\nu1\t0\nu1\t1\nu1\t2\nu2\t1\nu2\t3\n").unwrap();
    fs::write(data.join("features_visual.txt"), "4 2\n1 0\n0 1\n1 1\n-1 0.5\n").unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&small_config(dir.path())), "--data", s(&data), "--out", s(&run)]);
    let table = ok(&["inspect-edges", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data)]);
    let row = table.lines().find(|l| l.starts_with("solo\t")).unwrap();
    let cols: Vec<&str> = row.split('\t').collect();
    assert_eq!(cols[4], "1");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.25);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"hyper": {"layers": 0}}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&bad), "--data", s(&data), "--out", "x"]), 2);
    assert_eq!(code(&["train", "--data", s(&data)]), 2);
    let missing = dir.path().join("nope");
    assert_eq!(
        code(&["eval", "--checkpoint", s(&missing.join("c.json")), "--data", s(&data)]),
        4
    );
    assert_eq!(code(&["bogus"]), 2);

    let out = Command::new(env!("CARGO_BIN_EXE_grcn"))
        .args(["synth", "--config", s(&dir.path().join("spec.json")), "--out", s(&dir.path().join("t"))])
        .env("GRCN_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let wild = dir.path().join("wild.json");
    fs::write(
        &wild,
        r#"{"hyper": {"embed_dim": 8, "proj_dim": 4, "modalities": ["visual"], "learning_rate": 1e300, "max_epochs": 5}}"#,
    )
    .unwrap();
    let out = grcn(&["train", "--config", s(&wild), "--data", s(&data), "--out", s(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_metrics_are_byte_identical() {
    let run_once = |tag: &str| {
        let dir = tempfile::tempdir().unwrap();
        let data = synth(dir.path(), 0.25);
        let run = dir.path().join(tag);
        ok(&["train", "--config", s(&small_config(dir.path())), "--data", s(&data), "--out", s(&run), "--seed", "11"]);
        ok(&["eval", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data), "--out", s(&run)]);
        fs::read(run.join("metrics.json")).unwrap()
    };
    assert_eq!(run_once("a"), run_once("b"));
}

#[test]
fn threads_env_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 0.25);
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&small_config(dir.path())), "--data", s(&data), "--out", s(&run)]);
    let ck = run.join("checkpoint.json");
    let single = Command::new(env!("CARGO_BIN_EXE_grcn"))
        .args(["eval", "--checkpoint", s(&ck), "--data", s(&data)])
        .env("GRCN_THREADS", "1")
        .output()
        .unwrap();
    assert!(single.status.success());
    assert_eq!(String::from_utf8(single.stdout).unwrap(), ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data)]));
}
