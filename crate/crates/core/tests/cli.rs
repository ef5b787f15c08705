use std::path::Path;
use std::process::{Command, Output};

fn kprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kprompt"))
        .args(args)
        .env_remove("KPROMPT_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kprompt(args);
    assert!(
        out.status.success(),
        "kprompt {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = kprompt(args);
    assert!(
        !out.status.success(),
        "kprompt {} succeeded",
        args.join(" ")
    );
    String::from_utf8(out.stderr).unwrap()
}

const TINY: [&str; 12] = [
    "--model.d_model",
    "16",
    "--model.d_ff",
    "32",
    "--model.heads",
    "2",
    "--epochs",
    "1",
    "--model.layers_enc",
    "1",
    "--model.layers_dec",
    "1",
];

fn synth(dir: &Path) -> String {
    let d = dir.join("data");
    ok(&[
        "synth",
        "--out",
        d.to_str().unwrap(),
        "--rule",
        "attr-chain-2hop",
        "--n-users",
        "40",
        "--n-items",
        "40",
        "--n-attrs",
        "10",
        "--n-groups",
        "5",
        "--seed",
        "2",
    ]);
    d.to_str().unwrap().to_owned()
}

#[test]
fn compile_train_eval_writes_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    let mut args = vec![
        "compile",
        "--run",
        r,
        "--data-dir",
        &data,
        "--hops",
        "2",
        "--degree",
        "4",
    ];
    args.extend(TINY);
    let stats: serde_json::Value = serde_json::from_str(&ok(&args)).unwrap();
    assert_eq!(stats["test"], 40);
    for f in [
        "config.json",
        "vocab.txt",
        "train.jsonl",
        "valid.jsonl",
        "test.jsonl",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    ok(&["train", "--run", r]);
    assert!(run.join("model.ckpt").exists() && run.join("loss.csv").exists());
    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--run", r])).unwrap();
    assert_eq!(report["fingerprint"]["hops"], 2);
    assert_eq!(report["fingerprint"]["degree"], 4);
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(written, report);
    assert_eq!(
        std::fs::read_to_string(run.join("topk.jsonl"))
            .unwrap()
            .lines()
            .count(),
        40
    );
    ok(&["eval", "--run", r, "--valid"]);
    // Changing what was compiled requires recompiling.
    let e = fails(&["eval", "--run", r, "--hops", "1"]);
    assert!(e.contains("re-run `kprompt compile`"), "{e}");
}

#[test]
fn compiled_record_carries_tokens_nodes_and_target() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let run = tmp.path().join("run");
    ok(&[
        "compile",
        "--run",
        run.to_str().unwrap(),
        "--data-dir",
        &data,
        "--hops",
        "1",
    ]);
    let line = std::fs::read_to_string(run.join("test.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["user", "split", "tokens", "tree", "target", "mask"] {
        assert!(rec.get(key).is_some(), "{key} missing");
    }
    let node = &rec["tree"]["nodes"][0];
    for key in ["id", "kind", "parent", "spans"] {
        assert!(node.get(key).is_some(), "node {key} missing");
    }
}

#[test]
fn ablate_hops_by_mask_gives_eight_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let run = tmp.path().join("sweep");
    let mut args = vec![
        "ablate",
        "--sweep",
        "hops=0..3",
        "--mask",
        "both",
        "--run",
        run.to_str().unwrap(),
        "--data-dir",
        &data,
    ];
    args.extend(TINY);
    let csv = ok(&args);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 9, "{csv}");
    assert!(lines[0].starts_with("hops,degree,mask,users,HR@5,NDCG@5,HR@10,NDCG@10"));
    assert!(lines[1].starts_with("0,3,on,40,"));
    assert!(lines[8].starts_with("3,3,off,40,"));
    assert_eq!(
        std::fs::read_to_string(run.join("ablation.csv")).unwrap(),
        csv
    );
    assert!(run.join("hops2-degree3-maskoff/metrics.json").exists());
}

#[test]
fn over_budget_compile_reports_the_sample() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let run = tmp.path().join("run");
    let e = fails(&[
        "compile",
        "--run",
        run.to_str().unwrap(),
        "--data-dir",
        &data,
        "--hops",
        "3",
        "--degree",
        "5",
        "--max-input-tokens",
        "40",
    ]);
    assert!(
        e.contains("budget is 40") && e.contains("lower the degree"),
        "{e}"
    );
    assert!(e.contains("user `u"), "{e}");
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    let e = fails(&["compile", "--run", r, "--data-dir", &data, "--hops", "9"]);
    assert!(e.contains("compile.hops"), "{e}");
    let e = fails(&[
        "compile",
        "--run",
        r,
        "--data-dir",
        &data,
        "--beam-width",
        "3",
    ]);
    assert!(e.contains("beam"), "{e}");
    let e = fails(&["compile", "--run", r, "--widht", "3"]);
    assert!(e.contains("unknown configuration key `widht`"), "{e}");
    let e = fails(&["compile", "--run", r, "--hops"]);
    assert!(e.contains("needs a value"), "{e}");
    let e = fails(&["compile", "--run", r]);
    assert!(e.contains("data.interactions"), "{e}");
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"compile": {"hops": 1}, "bogus": true}"#).unwrap();
    let e = fails(&["compile", "--run", r, "--config", cfg.to_str().unwrap()]);
    assert!(e.contains("bogus"), "{e}");
}

#[test]
fn missing_stage_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let r = tmp.path().join("empty");
    let e = fails(&["train", "--run", r.to_str().unwrap()]);
    assert!(
        e.contains("missing artifact") && e.contains("config.json"),
        "{e}"
    );
    let data = synth(tmp.path());
    ok(&[
        "compile",
        "--run",
        r.to_str().unwrap(),
        "--data-dir",
        &data,
        "--hops",
        "0",
    ]);
    let e = fails(&["eval", "--run", r.to_str().unwrap()]);
    assert!(
        e.contains("missing artifact") && e.contains("model.ckpt"),
        "{e}"
    );
}

#[test]
fn seed_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_kprompt"))
        .args([
            "ingest",
            "--run",
            run.to_str().unwrap(),
            "--data-dir",
            &data,
        ])
        .env("KPROMPT_SEED", "41")
        .output()
        .unwrap();
    assert!(out.status.success());
    let saved = std::fs::read_to_string(run.join("config.json")).unwrap();
    assert!(saved.contains("\"seed\": 41"), "{saved}");
    assert!(run.join("interactions.filtered.tsv").exists());
    let out = Command::new(env!("CARGO_BIN_EXE_kprompt"))
        .args([
            "ingest",
            "--run",
            run.to_str().unwrap(),
            "--data-dir",
            &data,
        ])
        .env("KPROMPT_SEED", "x")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("KPROMPT_SEED"));
}
