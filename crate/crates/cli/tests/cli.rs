use std::path::Path;
use std::process::{Command, Output};

fn hammer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hammer")).args(args).output().expect("run hammer")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(hammer(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(hammer(&["gen-data", "--num", "3"]).status.code(), Some(2));
    assert_eq!(hammer(&["eval", "--bogus"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&hammer(&["gen-data", "--out", p(d), "--num", "60", "--seed", "7"]));
    }
    for f in ["train.jsonl", "test.jsonl", "stats.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let lines = std::fs::read_to_string(a.join("test.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 12);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("stats.json")).unwrap()).unwrap();
    assert!(stats.get("train").is_some() && stats.get("test").is_some());
}

#[test]
fn train_eval_infer_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    ok(&hammer(&["gen-data", "--out", p(&data), "--num", "40", "--seed", "1"]));
    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, "# tiny smoke run\nmodel = tiny\nepochs = 2\nbatch_size = 8\nwarmup = 2\npeak_lr = 1e-3\nqueue_size = 16\n").unwrap();
    let ckpt = d.join("m.ck");
    ok(&hammer(&["train", "--config", p(&cfg), "--data", p(&data), "--ckpt", p(&ckpt)]));

    let report = d.join("r.json");
    ok(&hammer(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)]));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    for group in ["binary", "multilabel", "bbox", "token"] {
        assert!(r.get(group).is_some(), "missing {group}");
    }

    let shown = hammer(&["report", "--report", p(&report)]);
    ok(&shown);
    assert!(String::from_utf8_lossy(&shown.stdout).contains("AUC"));

    let preds = d.join("infer.json");
    ok(&hammer(&["infer", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&preds), "--limit", "3"]));
    let ins: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&preds).unwrap()).unwrap();
    let arr = ins.as_array().unwrap();
    assert_eq!(arr.len(), 3);
    assert!(arr[0]["agg_attention"].as_array().is_some_and(|a| !a.is_empty()));
    assert!(arr[0]["prediction"]["fake_prob"].is_number());

    // Same seed and config: byte-identical checkpoint.
    let again = d.join("m2.ck");
    ok(&hammer(&["train", "--config", p(&cfg), "--data", p(&data), "--ckpt", p(&again)]));
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    // Config and data errors are diagnostics, not usage errors.
    std::fs::write(&cfg, "model = tiny\nlearning_rate = 1\n").unwrap();
    let bad = hammer(&["train", "--config", p(&cfg), "--data", p(&data), "--ckpt", p(&ckpt)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown key"));
    let missing = hammer(&["eval", "--ckpt", p(&d.join("nope.ck")), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = hammer(&["gradcheck"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for term in ["mac", "img", "mlc", "bic", "tmg", "joint"] {
        assert!(text.lines().any(|l| l.starts_with(term) && l.trim_end().ends_with("ok")), "{term}:\n{text}");
    }
}
