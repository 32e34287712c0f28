use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_resattn");

fn resattn(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RESATTN_THREADS", "1").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = resattn(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn keys(v: &Value) -> Vec<&str> {
    let mut k: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    k.sort_unstable();
    k
}

fn golden(name: &str) -> Value {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn summary_json_matches_golden_files() {
    assert_eq!(json(&["summary", "attention-56-imagenet", "--json"]), golden("summary_attention-56-imagenet.json"));
    assert_eq!(json(&["summary", "resnet-152", "--json"]), golden("summary_resnet-152.json"));
    assert_eq!(json(&["summary", "cifar-attention", "m=2", "--json"]), golden("summary_cifar-attention_m_2.json"));
}

#[test]
fn summary_text_report() {
    let text = ok(&["summary", "cifar-attention", "m=2"]);
    assert!(text.contains("trunk depth  92"), "{text}");
    for stage in ["stem", "stage1", "stage2", "stage3", "head"] {
        assert!(text.lines().any(|l| l.starts_with(stage)), "missing {stage}:\n{text}");
    }
}

#[test]
fn summary_accepts_spec_files_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("net.toml");
    let text = resattn::network::NetworkSpec::builtin("cifar-attention", Some(1)).unwrap().to_text();
    std::fs::write(&file, text).unwrap();
    let from_file = json(&["summary", "--spec", file.to_str().unwrap(), "--json"]);
    assert_eq!(from_file, json(&["summary", "cifar-attention", "--m", "1", "--json"]));
    let local = json(&["summary", "cifar-attention", "m=1", "--mask", "localconv", "--json"]);
    assert_eq!(local["trunk_depth"], from_file["trunk_depth"]);
    assert_ne!(local["params"], from_file["params"]);
}

#[test]
fn bad_input_exits_nonzero_with_message() {
    for args in [
        &["summary", "attention-57"][..],
        &["summary", "cifar-attention", "m=x"],
        &["eval", "--checkpoint", "/no/such.ckpt", "--data", "synthetic"],
    ] {
        let out = resattn(args);
        assert!(!out.status.success(), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn gradcheck_primitives_pass_and_report_schema() {
    let v = json(&["gradcheck", "primitive", "--json"]);
    assert_eq!(keys(&v), ["cases", "passed", "schema", "seed", "tol"]);
    assert_eq!(v["schema"], "resattn.gradcheck/v1");
    assert_eq!(v["tol"], 1e-4);
    assert_eq!(v["passed"], true);
    let case = &v["cases"][0];
    assert_eq!(keys(case), ["checked", "max_rel_error", "name", "passed", "scope"]);
}

#[test]
fn gradcheck_attention_module_arl() {
    let v = json(&["gradcheck", "block", "--block", "attention-module", "--combine", "arl", "--json"]);
    let cases = v["cases"].as_array().unwrap();
    assert!(!cases.is_empty());
    assert!(cases.iter().all(|c| c["name"].as_str().unwrap().contains("attention_module")));
    assert_eq!(v["passed"], true);
}

#[test]
fn injected_fault_fails_gradcheck() {
    let out = resattn(&["gradcheck", "primitive", "--inject-fault", "sigmoid"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL sigmoid"));
}

#[test]
fn train_eval_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "[train]\npreset = \"cifar\"\nbatch_size = 16\ntotal_iters = 200\nlr_drop_iters = []\n\
         log_every = 100\ncheckpoint_every = 100\nprobe_every = 100\naugmentation = \"none\"\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let data = "synthetic:samples=64,seed=4";
    let t = json(&[
        "train", "--spec", "cifar-attention", "--m", "1", "--config", cfg.to_str().unwrap(), "--data", data,
        "--out", out.to_str().unwrap(), "--seed", "7", "--deterministic", "--json",
    ]);
    assert_eq!(keys(&t), ["checkpoint", "config_hash", "iteration", "out", "schema", "train_acc", "train_loss"]);
    assert_eq!(t["schema"], "resattn.train/v1");
    assert_eq!(t["iteration"], 200);

    let metrics = resattn::train::read_metrics(&out.join("metrics.tsv")).unwrap();
    assert!(metrics.len() >= 2, "{metrics:?}");
    assert!(metrics.last().unwrap().train_loss < metrics[0].train_loss, "{metrics:?}");

    let ckpt = out.join("latest.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let e = json(&["eval", "--checkpoint", ckpt, "--data", data, "--split", "train", "--json"]);
    assert_eq!(keys(&e), ["iteration", "samples", "schema", "top1_error", "top5_error"]);
    assert_eq!(e["samples"], 64);
    assert!(e["top5_error"].as_f64().unwrap() <= e["top1_error"].as_f64().unwrap());

    let p = json(&["probe", "--checkpoint", ckpt, "--data", data, "--json"]);
    assert_eq!(keys(&p), ["iteration", "rows", "samples", "schema"]);
    assert_eq!(p["rows"].as_array().unwrap().len(), 3);
    let trunk = json(&["probe", "--checkpoint", ckpt, "--data", data, "--trunk-only", "--json"]);
    let zero = json(&["probe", "--checkpoint", ckpt, "--data", data, "--mask-value", "0", "--json"]);
    assert_eq!(trunk["rows"], zero["rows"]);
    assert_ne!(trunk["rows"], p["rows"]);

    let tsv = ok(&["probe", "--checkpoint", ckpt, "--data", data]);
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[..2], ["# resattn-probe v1", "stage\tmean_abs_response"]);
    assert_eq!(lines.len(), 2 + 3);

    let resumed = json(&[
        "train", "--resume", ckpt, "--data", data, "--out", out.to_str().unwrap(), "--json",
    ]);
    assert_eq!(resumed["iteration"], 200, "already at total_iters");
    assert_eq!(resumed["config_hash"], t["config_hash"]);
}

#[test]
fn random_init_checkpoint_errs_about_ninety_percent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["train", "--spec", "cifar-attention", "--m", "1", "--data", "synthetic:samples=8", "--out", out, "--iters", "0"]);
    let ckpt = dir.path().join("latest.ckpt");
    let e = json(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", "synthetic:samples=1000,seed=9", "--json",
    ]);
    let top1 = e["top1_error"].as_f64().unwrap();
    println!("random-init top-1 error {top1:.3}");
    assert!((0.8..=0.97).contains(&top1), "{top1}");
    assert!(e["top5_error"].as_f64().unwrap() <= top1);
}

#[test]
fn same_seed_same_output() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap().to_owned();
        ok(&[
            "train", "--spec", "cifar-attention", "--m", "1", "--data", "synthetic:samples=16", "--out", &out,
            "--iters", "3", "--seed", "5", "--deterministic",
        ]);
        std::fs::read(dir.path().join("latest.ckpt")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn noise_ratio_out_of_range_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = resattn(&[
        "train", "--spec", "cifar-attention", "--m", "1", "--data", "synthetic:samples=8", "--out",
        dir.path().to_str().unwrap(), "--noise-clean-ratio", "1.5",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_clean_ratio"));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "nothing written");
}
