use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn geotrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geotrec")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = geotrec(dir, args);
    assert!(out.status.success(), "geotrec {}:\n{}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = geotrec(dir.path(), &["diagnose", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage") && text.contains("--contexts"), "{text}");
}

#[test]
fn unknown_flag_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = geotrec(dir.path(), &["train", "--bogus-flag", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus-flag"));
    let out = geotrec(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn failures_carry_a_structured_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = geotrec(dir.path(), &["eval", "--log", "missing.jsonl", "--ckpt", "missing.ckpt", "--out", "r.json"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:"), "{err}");
}

/// Runs every stage on the default 200-user synthetic dataset with relative
/// paths, so manifests are comparable across directories.
fn full_pipeline(dir: &Path) {
    ok(dir, &["synth", "--out", "data", "--seed", "11"]);
    ok(dir, &["enrich", "--input", "data/log.jsonl", "--cache", "cache.jsonl", "--provider", "mock", "--seed", "2"]);
    ok(dir, &["mock-embed", "--items", "data/items.jsonl", "--out", "items.gtemb", "--dim", "16", "--seed", "3"]);
    ok(dir, &["mock-embed", "--contexts", "cache.jsonl", "--out", "contexts.gtemb", "--dim", "16", "--seed", "3"]);
    ok(dir, &[
        "diagnose", "--items", "items.gtemb", "--contexts", "contexts.gtemb", "--log", "data/log.jsonl", "--k", "10,20",
        "--out", "diag.json",
    ]);
    let data = ["--log", "data/log.jsonl", "--items", "items.gtemb", "--contexts", "contexts.gtemb"];
    for (variant, extra) in [("baseline_id", None), ("id_meta_gt", Some("--gt-train-only")), ("meta_gt", None)] {
        let ckpt = format!("{variant}.ckpt");
        let mut args = vec!["train"];
        args.extend(data);
        args.extend(["--variant", variant, "--epochs", "2", "--d-model", "16", "--seed", "5", "--out", &ckpt]);
        args.extend(extra);
        ok(dir, &args);
        let report = format!("{variant}.json");
        let mut args = vec!["eval"];
        args.extend(data);
        args.extend(["--ckpt", &ckpt, "--out", &report]);
        ok(dir, &args);
    }
    ok(dir, &["report", "--baseline", "baseline_id.json", "--reports", "id_meta_gt.json", "meta_gt.json", "--out", "table"]);
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_completes_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path());
    full_pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    for f in ["table.txt", "table.csv", "table.json", "diag.json", "id_meta_gt.ckpt", "id_meta_gt.ckpt.manifest.json"] {
        assert!(ta.contains_key(f), "{f} missing; have {:?}", ta.keys().collect::<Vec<_>>());
    }
    let table = String::from_utf8_lossy(&ta["table.txt"]);
    assert!(table.contains("Id+M+GT_train") && table.contains("M+GT"), "{table}");
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        assert!(bytes == &tb[name], "{name} differs between runs");
    }
}

#[test]
fn cli_flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--out", "data", "--users", "30", "--items", "60"]);
    std::fs::write(d.join("run.toml"), "[train]\nmax_epochs = 1\n[train.backbone]\nd_model = 8\n").unwrap();
    ok(d, &["--config", "run.toml", "train", "--data", "data", "--out", "one.ckpt"]);
    ok(d, &["--config", "run.toml", "train", "--data", "data", "--epochs", "2", "--out", "two.ckpt"]);
    let lines = |f: &str| std::fs::read_to_string(d.join(f)).unwrap().lines().count();
    assert_eq!(lines("one.ckpt.log.jsonl"), 1);
    assert_eq!(lines("two.ckpt.log.jsonl"), 2);
    std::fs::write(d.join("bad.toml"), "[train]\nmax_epoch = 1\n").unwrap();
    assert!(!geotrec(d, &["--config", "bad.toml", "train", "--data", "data", "--out", "x.ckpt"]).status.success());
}
