use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelprompt")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

const SMALL: &[&str] = &["--layers", "1", "--heads", "2", "--d-model", "16"];

fn corpus(dir: &Path) -> String {
    let path = dir.join("c.jsonl").display().to_string();
    let out = run(&["gen-synthetic", "--relations", "4", "--per-class", "8", "--vocab-size", "40", "--seed", "3", "--out", &path]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    path
}

#[test]
fn help_exits_zero_everywhere() {
    for sub in ["", "gen-synthetic", "stats", "kshot-sample", "train", "eval", "analyze-on", "export-hiddens"] {
        let args: Vec<&str> = sub.split_whitespace().chain(["--help"]).collect();
        let out = run(&args);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    for args in [
        vec!["frobnicate"],
        vec![],
        vec!["stats"],
        vec!["stats", "--corpus", &c, "--bogus"],
        vec!["train", "--corpus", &c, "--k", "-1"],
        vec!["train", "--corpus", &c, "--k", "0"],
        vec!["kshot-sample", "--corpus", &c, "--k", "-1"],
        vec!["train", "--corpus", &c, "--token-strategy", "purple"],
        vec!["train", "--corpus", &c, "--batch-size", "0"],
        vec!["eval", "--checkpoint", "x", "--corpus", &c, "--split", "nope"],
    ] {
        let out = run(&args);
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out.stdout.is_empty(), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl").display().to_string();
    let out = run(&["stats", "--corpus", &missing]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"tokens\": [\"a\"], \"subj\": [0, 1], \"obj\": [0, 1], \"relation\": \"r\"}\n").unwrap();
    let out = run(&["stats", "--corpus", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let out = run(&["eval", "--checkpoint", dir.path().to_str().unwrap(), "--corpus", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn stats_and_kshot() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let stats = json(&run(&["stats", "--corpus", &c]));
    assert_eq!(stats["train"], 32);
    assert_eq!(stats["relations"], 4);

    let a = run(&["kshot-sample", "--corpus", &c, "--k", "3", "--seed", "5"]);
    let b = run(&["kshot-sample", "--corpus", &c, "--k", "3", "--seed", "5"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(String::from_utf8_lossy(&a.stdout).lines().count(), 12);

    let out = dir.path().join("k.jsonl");
    let summary = json(&run(&["kshot-sample", "--corpus", &c, "--k", "3", "--seed", "5", "--out", out.to_str().unwrap()]));
    assert_eq!(summary["instances"], 12);
    assert_eq!(std::fs::read(&out).unwrap(), a.stdout);
}

fn train(c: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--corpus", c, "--k", "2", "--epochs", "2", "--seed", "7", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_is_reproducible_and_feeds_other_commands() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let a = train(&c, &r1, &[]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let b = train(&c, &r2, &[]);
    assert_eq!(a.stdout, b.stdout);
    for file in ["history.jsonl", "metrics.json", "config.json", "checkpoint/model.json", "checkpoint/vocab.txt"] {
        assert_eq!(std::fs::read(r1.join(file)).unwrap(), std::fs::read(r2.join(file)).unwrap(), "{file}");
    }
    let metrics = json(&a);
    assert_eq!(metrics["train_size"], 8);
    assert!(metrics["test"]["micro_f1"].is_number());
    assert_eq!(std::fs::read_to_string(r1.join("history.jsonl")).unwrap().lines().count(), 2);
    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r1.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["learning_rate"], 1e-2);
    assert_eq!(config["k"], 2);

    let ckpt = r1.join("checkpoint");
    let ckpt = ckpt.to_str().unwrap();
    let report = json(&run(&["eval", "--checkpoint", ckpt, "--corpus", &c]));
    assert_eq!(report["micro_f1"], metrics["test"]["micro_f1"]);
    let with_nr = json(&run(&["eval", "--checkpoint", ckpt, "--corpus", &c, "--exclude-no-relation", "false"]));
    assert_eq!(with_nr["excluded"], serde_json::Value::Null);

    let on = dir.path().join("on.csv");
    let rates = dir.path().join("on.jsonl");
    let summary = json(&run(&[
        "analyze-on", "--checkpoint", ckpt, "--corpus", &c, "--out", on.to_str().unwrap(), "--instances-out", rates.to_str().unwrap(),
    ]));
    assert_eq!(summary["excluded"], serde_json::json!(["no_relation"]));
    assert_eq!(std::fs::read_to_string(&on).unwrap().lines().count(), 4);
    assert!(dir.path().join("on.counts.json").is_file());
    assert!(rates.is_file());
    let out = run(&["analyze-on", "--checkpoint", ckpt, "--corpus", &c, "--out", on.to_str().unwrap(), "--exclude", "nope"]);
    assert_eq!(code(&out), 1);

    let hid = dir.path().join("h.csv");
    let summary = json(&run(&["export-hiddens", "--checkpoint", ckpt, "--corpus", &c, "--out", hid.to_str().unwrap()]));
    assert_eq!(summary["dim"], 16);
    let text = std::fs::read_to_string(&hid).unwrap();
    assert!(text.starts_with("gold_relation,h0,h1"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "alpha1 = 0\ngamma = 3\nlr = 0.005\ntoken_strategy = mask\n").unwrap();
    let out = dir.path().join("r");
    let res = train(&c, &out, &["--config", cfg.to_str().unwrap(), "--gamma", "1.5"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let config: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["objective"]["alpha1"], 0.0);
    assert_eq!(config["objective"]["gamma"], 1.5);
    assert_eq!(config["learning_rate"], 0.005);
    assert_eq!(config["token_strategy"], "mask");

    let res = train(&c, &dir.path().join("p"), &["--pretrained-lr"]);
    assert_eq!(code(&res), 0);
    let config: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p/config.json")).unwrap()).unwrap();
    assert_eq!(config["learning_rate"], 4e-5);

    std::fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(code(&train(&c, &dir.path().join("q"), &["--config", cfg.to_str().unwrap()])), 1);
}
