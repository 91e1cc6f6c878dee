use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

use dfp::dataset::{dataset_to_jsonl, synthetic_prompts};
use dfp::model_io::{load_weights, ModelConfig};
use dfp::transformer::{forward, greedy_argmax};
use dfp::DType;

fn dfp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = dfp(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

/// Temp dir holding `cfg.json` and the seed-42 model `m.dfpa`.
fn workspace(config: &ModelConfig) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), serde_json::to_vec(config).unwrap()).unwrap();
    ok(
        dir.path(),
        &["gen-model", "--config", "cfg.json", "--seed", "42", "--out", "m.dfpa"],
    );
    let p = dir.path().to_path_buf();
    (dir, p)
}

fn small_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 16,
        d_mlp: 32,
        vocab_size: 23,
        max_seq_len: 16,
        ..ModelConfig::fixture()
    }
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(s.trim_end().lines().count(), 1, "stderr should be one line: {s:?}");
    s
}

#[test]
fn gen_model_is_byte_identical() {
    let (_tmp, dir) = workspace(&ModelConfig::fixture());
    ok(
        &dir,
        &[
            "gen-model",
            "--config",
            "cfg.json",
            "--seed",
            "42",
            "--out",
            "again.dfpa",
        ],
    );
    let a = std::fs::read(dir.join("m.dfpa")).unwrap();
    let b = std::fs::read(dir.join("again.dfpa")).unwrap();
    assert_eq!(a, b);
    ok(
        &dir,
        &[
            "gen-model",
            "--config",
            "cfg.json",
            "--seed",
            "43",
            "--out",
            "other.dfpa",
        ],
    );
    assert_ne!(a, std::fs::read(dir.join("other.dfpa")).unwrap());
}

#[test]
fn manifest_records_inputs_and_fingerprint() {
    let (_tmp, dir) = workspace(&small_config());
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("m.dfpa.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-model");
    assert_eq!(m["flags"]["seed"], 42);
    let digest = hex::encode(Sha256::digest(std::fs::read(dir.join("cfg.json")).unwrap()));
    assert_eq!(m["input_digests"]["cfg.json"], digest.as_str());
    let (_, ws) = load_weights::<f64>(dir.join("m.dfpa")).unwrap();
    assert_eq!(m["model_fingerprint"], ws.fingerprint());
    assert!(m["tool_version"].is_string());
    assert!(m["wall_time_s"].as_f64().unwrap() >= 0.0);
}

#[test]
fn attribute_selfcheck_scores_sum_to_logit() {
    let (_tmp, dir) = workspace(&ModelConfig::fixture());
    let tokens = [0usize, 17, 4, 88, 23, 61, 9];
    let list = tokens.map(|t| t.to_string()).join(",");
    ok(
        &dir,
        &[
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            &list,
            "--init",
            "token",
            "--rule",
            "softmax",
            "--selfcheck",
            "--out",
            "r.json",
        ],
    );
    let report: Value = serde_json::from_slice(&std::fs::read(dir.join("r.json")).unwrap()).unwrap();
    let scores: Vec<f64> = serde_json::from_value(report["scores"].clone()).unwrap();
    assert_eq!(scores.len(), tokens.len());

    // oracle: the logit from a plain forward pass through the library
    let (_, ws) = load_weights::<f64>(dir.join("m.dfpa")).unwrap();
    let trace = forward(&tokens, &ws).unwrap();
    let y = greedy_argmax(trace.last_logits()).unwrap();
    assert_eq!(report["target"]["token"], y);
    let logit = trace.last_logits()[y];
    let sum: f64 = scores.iter().sum();
    assert!((sum - logit).abs() <= 1e-10 * logit.abs().max(1.0), "{sum} vs {logit}");

    // identical flags give identical bytes
    ok(
        &dir,
        &[
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            &list,
            "--init",
            "token",
            "--rule",
            "softmax",
            "--selfcheck",
            "--out",
            "r2.json",
        ],
    );
    assert_eq!(
        std::fs::read(dir.join("r.json")).unwrap(),
        std::fs::read(dir.join("r2.json")).unwrap()
    );
}

#[test]
fn attribute_f32_model_with_selfcheck() {
    let config = ModelConfig {
        numeric_precision: DType::F32,
        ..small_config()
    };
    let (_tmp, dir) = workspace(&config);
    for init in [["--init", "token"], ["--init", "heads"], ["--init", "neurons"]] {
        let mut args = vec![
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,3,5,7,2",
            "--selfcheck",
            "--out",
            "r.csv",
        ];
        args.extend(init);
        args.extend(["--layer", "1", "--format", "csv"]);
        ok(&dir, &args);
        let csv = std::fs::read_to_string(dir.join("r.csv")).unwrap();
        assert!(csv.starts_with("position,component,label,score,normalized"));
    }
}

#[test]
fn unknown_flag_exits_1_without_outputs() {
    let (_tmp, dir) = workspace(&small_config());
    let before = files(&dir);
    let out = dfp(
        &dir,
        &[
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,1",
            "--init",
            "token",
            "--frobnicate",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[usage]:"));
    assert_eq!(files(&dir), before);
}

#[test]
fn error_exit_codes() {
    let (_tmp, dir) = workspace(&small_config());
    let before = files(&dir);

    // input: token outside the vocabulary
    let out = dfp(
        &dir,
        &[
            "forward",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,99",
            "--trace-out",
            "t.dfpa",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[input]:"));

    // format: damaged archive
    let mut bytes = std::fs::read(dir.join("m.dfpa")).unwrap();
    bytes.truncate(bytes.len() - 8);
    std::fs::write(dir.join("cut.dfpa"), bytes).unwrap();
    let out = dfp(
        &dir,
        &[
            "forward",
            "--model",
            "cut.dfpa",
            "--tokens",
            "0,1",
            "--trace-out",
            "t.dfpa",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[archive_format]:"));
    std::fs::remove_file(dir.join("cut.dfpa")).unwrap();

    // usage: head decomposition without a layer
    let out = dfp(
        &dir,
        &[
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,1",
            "--init",
            "heads",
            "--out",
            "x.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));

    // numeric: no direction spans nothing
    let zeros = vec![0.0f64; 16];
    let mut w = dfp::model_io::ArchiveWriter::new();
    w.add("directions", &[1, 16], &zeros);
    w.write(dir.join("zero.dfpa")).unwrap();
    let out = dfp(&dir, &["project", "--directions", "zero.dfpa", "--out", "p.dfpa"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error[degenerate_subspace]:"));
    std::fs::remove_file(dir.join("zero.dfpa")).unwrap();

    assert_eq!(files(&dir), before, "failed commands must not leave files behind");
}

#[test]
fn text_prompts_resolve_through_vocab() {
    let (_tmp, dir) = workspace(&small_config());
    let words: Vec<String> = (0..23)
        .map(|i| if i == 0 { "<bos>".into() } else { format!("w{i}") })
        .collect();
    std::fs::write(dir.join("vocab.txt"), words.join("\n") + "\n").unwrap();
    let a = ok(
        &dir,
        &[
            "forward",
            "--model",
            "m.dfpa",
            "--text",
            "w3 w5",
            "--vocab",
            "vocab.txt",
            "--trace-out",
            "a.dfpa",
        ],
    );
    let b = ok(
        &dir,
        &[
            "forward",
            "--model",
            "m.dfpa",
            "--tokens",
            "0 3 5",
            "--trace-out",
            "b.dfpa",
        ],
    );
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(
        std::fs::read(dir.join("a.dfpa")).unwrap(),
        std::fs::read(dir.join("b.dfpa")).unwrap()
    );
    let out = dfp(
        &dir,
        &[
            "forward",
            "--model",
            "m.dfpa",
            "--text",
            "w3 nope",
            "--vocab",
            "vocab.txt",
            "--trace-out",
            "c.dfpa",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_line(&out).starts_with("error[tokenize]:"));
}

fn write_dataset(dir: &Path, count: usize, len: usize) {
    let (_, ws) = load_weights::<f64>(dir.join("m.dfpa")).unwrap();
    let ds = synthetic_prompts(&ws, count, len, 5).unwrap();
    std::fs::write(dir.join("ds.jsonl"), dataset_to_jsonl(&ds).unwrap()).unwrap();
}

#[test]
fn evaluate_faithfulness_and_components() {
    let (_tmp, dir) = workspace(&small_config());
    write_dataset(&dir, 4, 8);
    ok(
        &dir,
        &[
            "evaluate",
            "faithfulness",
            "--model",
            "m.dfpa",
            "--dataset",
            "ds.jsonl",
            "--methods",
            "depass,attention_rollout",
            "--grid",
            "0.25,0.5",
            "--out",
            "f.csv",
        ],
    );
    let csv = std::fs::read_to_string(dir.join("f.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,K_or_k,mean_metric,n_examples");
    // methods x kinds x grid
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert!(lines[1].starts_with("depass/patch_top,0.25,"));
    assert!(lines.iter().skip(1).all(|l| l.ends_with(",4")));

    ok(
        &dir,
        &[
            "evaluate",
            "components",
            "--model",
            "m.dfpa",
            "--dataset",
            "ds.jsonl",
            "--layer",
            "1",
            "--methods",
            "depass",
            "--out",
            "c.json",
            "--format",
            "json",
        ],
    );
    let curves: Value = serde_json::from_slice(&std::fs::read(dir.join("c.json")).unwrap()).unwrap();
    let curves = curves.as_array().unwrap();
    assert_eq!(curves.len(), 2);
    for c in curves {
        // nothing masked keeps every (correct) example
        assert_eq!(c["grid"][0], 0);
        assert_eq!(c["accuracy"][0], 1.0);
    }

    let out = dfp(
        &dir,
        &[
            "evaluate",
            "faithfulness",
            "--model",
            "m.dfpa",
            "--dataset",
            "ds.jsonl",
            "--grid",
            "1.5",
            "--out",
            "bad.csv",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.join("bad.csv").exists());
}

#[test]
fn probe_train_project_and_subspace_mask() {
    let (_tmp, dir) = workspace(&small_config());
    write_dataset(&dir, 3, 8);
    ok(
        &dir,
        &[
            "forward",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,4,9,2,7,11,3,5",
            "--trace-out",
            "t.dfpa",
        ],
    );
    let mut lines = String::new();
    for layer in 0..2 {
        for row in 0..8 {
            lines.push_str(&format!(
                "{{\"features_ref\": \"t.dfpa#layers.{layer}.hidden_out@{row}\", \"label\": {}, \"layer\": {layer}}}\n",
                usize::from(row >= 4)
            ));
        }
    }
    std::fs::write(dir.join("feat.jsonl"), lines).unwrap();
    let out = ok(
        &dir,
        &[
            "probe-train",
            "--features",
            "feat.jsonl",
            "--out",
            "probes.dfpa",
            "--steps",
            "300",
            "--lr",
            "0.5",
        ],
    );
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["0"]["final_loss"].as_f64().unwrap().is_finite());
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("probes.dfpa.manifest.json")).unwrap()).unwrap();
    assert!(m["input_digests"]["feat.jsonl"].is_string());
    assert!(m["input_digests"]["t.dfpa"].is_string());

    let out = ok(&dir, &["project", "--directions", "probes.dfpa", "--out", "p.dfpa"]);
    let proj: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(proj["rank"].as_u64().unwrap() >= 1);
    ok(
        &dir,
        &[
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,4,9,2",
            "--init",
            "subspace",
            "--layer",
            "0",
            "--projector",
            "p.dfpa",
            "--out",
            "s.json",
        ],
    );

    ok(
        &dir,
        &[
            "evaluate",
            "subspace-mask",
            "--model",
            "m.dfpa",
            "--dataset",
            "ds.jsonl",
            "--probes",
            "probes.dfpa",
            "--min-layer",
            "0",
            "--grid",
            "0.5,1.0",
            "--format",
            "json",
            "--out",
            "sm.json",
        ],
    );
    let rows: Value = serde_json::from_slice(&std::fs::read(dir.join("sm.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for budget in [0.5, 1.0] {
        let get = |m: &str| {
            rows.iter()
                .find(|r| r["method"] == m && r["budget"] == budget)
                .unwrap()
                .clone()
        };
        // both strategies remove the same number of tokens
        assert_eq!(get("flag")["mean_removed"], get("depass")["mean_removed"]);
        assert_eq!(get("none")["mean_removed"], 0.0);
        assert_eq!(get("none")["accuracy"], 1.0);
    }
}

#[test]
fn direction_target_from_json() {
    let (_tmp, dir) = workspace(&small_config());
    let mut v = vec![0.0f64; 16];
    v[3] = 1.0;
    std::fs::write(dir.join("v.json"), serde_json::to_vec(&v).unwrap()).unwrap();
    ok(
        &dir,
        &[
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,4,9,2",
            "--init",
            "token",
            "--target",
            "direction:v.json@1",
            "--positions",
            "all",
            "--out",
            "d.json",
        ],
    );
    let report: Value = serde_json::from_slice(&std::fs::read(dir.join("d.json")).unwrap()).unwrap();
    let scores: Vec<Vec<f64>> = serde_json::from_value(report["scores"].clone()).unwrap();
    let (_, ws) = load_weights::<f64>(dir.join("m.dfpa")).unwrap();
    let trace = forward(&[0, 4, 9, 2], &ws).unwrap();
    for (i, s) in scores.iter().enumerate() {
        let exact = trace.hidden_after(1)[(i, 3)];
        assert!((s.iter().sum::<f64>() - exact).abs() < 1e-10);
    }
    let m: Value = serde_json::from_slice(&std::fs::read(dir.join("d.json.manifest.json")).unwrap()).unwrap();
    assert!(m["input_digests"]["v.json"].is_string());

    std::fs::write(dir.join("short.json"), "[1.0, 2.0]").unwrap();
    let out = dfp(
        &dir,
        &[
            "attribute",
            "--model",
            "m.dfpa",
            "--tokens",
            "0,4",
            "--init",
            "token",
            "--target",
            "direction:short.json@1",
            "--out",
            "e.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_report() {
    let (_tmp, dir) = workspace(&small_config());
    let out = ok(
        &dir,
        &[
            "bench",
            "neurons",
            "--model",
            "m.dfpa",
            "--layer",
            "0",
            "--len",
            "6",
            "--repeats",
            "1",
            "--out",
            "b.json",
        ],
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["d_mlp"], 32);
    assert_eq!(v["report"]["seq_len"], 6);
    assert!(v["report"]["speedup"].as_f64().unwrap() > 0.0);
    assert!(dir.join("b.json.manifest.json").exists());
}
