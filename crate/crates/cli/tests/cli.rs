use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
synth.items = 60
synth.users = 80
synth.blocks = 6
synth.out_degree = 4
backbone.d = 8
backbone.layers = 1
reasoning.epochs = 2
reasoning.batch_size = 16
train_prefixes = 2
";

fn graphreason(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphreason"))
        .args(args)
        .arg("--output")
        .arg(dir)
        .output()
        .expect("spawn graphreason")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn verify_writes_jsonl_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphreason(dir.path(), &["verify", "--seed", "3"]);
    ok(&out);
    let text = std::fs::read_to_string(dir.path().join("verification.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["status"], "pass");
        assert_eq!(v["seed"], 3);
    }
    assert!(dir.path().join("verify.manifest.json").exists());
}

#[test]
fn flops_example() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&graphreason(
        dir.path(),
        &["flops", "--context", "8", "--history", "50", "--d", "256", "--layers", "2", "--steps", "3"],
    ));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["total"], "9808384");
    assert_eq!(v["encoder"], "9324544");
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphreason(
        dir.path(),
        &[
            "flops",
            "--context",
            "1",
            "--history",
            "1",
            "--d",
            "1",
            "--layers",
            "1",
            "--steps",
            "1",
            "--set",
            "backbone.nope=1",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "synth.noise = 1.5\n").unwrap();
    let out = graphreason(dir.path(), &["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    let metrics = |sub: &str| {
        let out = dir.path().join(sub);
        ok(&graphreason(&out, &["synth", "--config", c]));
        assert!(out.join("interactions.csv").exists());
        ok(&graphreason(&out, &["build-graph", "--config", c]));
        let graph = out.join("graph.tsv");
        let g = graph.to_str().unwrap();
        ok(&graphreason(&out, &["train", "--config", c, "--graph", g]));
        ok(&graphreason(&out, &["eval", "--config", c, "--graph", g]));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = metrics("a");
    let b = metrics("b");
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("metric,K,value"));

    let run = dir.path().join("a");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("train.manifest.json")).unwrap()).unwrap();
    assert!(manifest["config"].as_str().unwrap().contains("backbone.d = 8"));
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 1);
    assert_eq!(manifest["outputs"].as_object().unwrap().len(), 2);

    let out = ok(&graphreason(&run, &["infer", "--config", c, "--history", "1,2,3"]));
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["top_k"].as_array().unwrap().len(), 10);
    let steps = v["steps_used"].as_u64().unwrap();
    assert!((1..=5).contains(&steps));

    ok(&graphreason(&run, &["export-attention", "--config", c, "--samples", "4"]));
    let att = std::fs::read_to_string(run.join("attention.csv")).unwrap();
    assert!(att.starts_with("layer,head,query_index,key_index,query_region,key_region,score"));
}

#[test]
fn missing_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = graphreason(
        dir.path(),
        &["eval", "--set", "synth.users=40", "--set", "synth.items=60", "--set", "synth.blocks=6"],
    );
    assert_eq!(out.status.code(), Some(1));
}
