use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use toponet::harness::Checkpoint;

fn toponet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toponet")).args(args).output().expect("binary runs")
}

fn config(out: &Path, epochs: usize, topology: &str) -> String {
    format!(
        r#"{{
  "arch": {{"stage_sizes": [5, 6], "topologies": [{{"kind": "complete"}}, {topology}], "base_width": 4, "num_classes": 2}},
  "data": {{"source": {{"kind": "synthetic-spirals", "n": 120, "noise": 0.05}}, "val_fraction": 0.25}},
  "train": {{"epochs": {epochs}, "batch_size": 16, "lr": 0.1, "schedule": {{"kind": "cosine"}}, "snapshot_epochs": [0, {epochs}]}},
  "analysis": {{"node_ablation": true, "edge_pruning": {{"thresholds": [0.0, 0.9], "retrain": true}},
               "histogram_bins": 6, "snapshot_study": true, "retrain_epochs": 1}},
  "output_dir": {out:?},
  "seed": 3
}}"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
    serde_json::from_str(stderr.trim()).unwrap()
}

#[test]
fn full_run_writes_consistent_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), "c.json", &config(&out, 3, r#"{"kind": "residual", "interval": 2}"#));
    let res = toponet(&["run", &cfg]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap().to_string();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["versions"]["toponet"].is_string());
    let files: Vec<String> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap().to_string()).collect();
    for f in [
        "metrics.csv",
        "checkpoint_epoch0.tpnc",
        "checkpoint_epoch3.tpnc",
        "checkpoint_final.tpnc",
        "sweep_nodes.csv",
        "sweep_edges.csv",
        "sweep_snapshots.csv",
        "histogram.csv",
        "topology_stage0.txt",
        "topology_stage1.txt",
    ] {
        assert!(files.contains(&f.to_string()), "{f} missing from manifest");
    }
    for f in &files {
        assert!(out.join(f).exists(), "{f} listed but not written");
        if f.ends_with(".json") {
            let v: Value = serde_json::from_str(&fs::read_to_string(out.join(f)).unwrap()).unwrap();
            assert_eq!(v["config_hash"], hash.as_str(), "{f}");
        }
        if f.ends_with(".tpnc") {
            assert_eq!(Checkpoint::load(&out.join(f)).unwrap().config_hash, hash, "{f}");
        }
    }
    assert!(!out.join(".lock").exists());
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 4);

    // the final checkpoint holds the exported topology
    let ck = Checkpoint::load(&out.join("checkpoint_final.tpnc")).unwrap();
    let net = ck.network().unwrap();
    let text = fs::read_to_string(out.join("topology_stage1.txt")).unwrap();
    assert_eq!(text, toponet::graph::to_text(&net.graphs()[1], Some(&net.alpha_matrix(1).unwrap())));
}

#[test]
fn same_config_twice_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &config(&tmp.path().join("a"), 2, r#"{"kind": "complete"}"#));
    let b = tmp.path().join("b");
    assert!(toponet(&["run", &cfg]).status.success());
    assert!(toponet(&["run", &cfg, "--output-dir", b.to_str().unwrap()]).status.success());
    let a = fs::read(tmp.path().join("a/metrics.csv")).unwrap();
    assert_eq!(a, fs::read(b.join("metrics.csv")).unwrap());
    let ma: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("a/manifest.json")).unwrap()).unwrap();
    let mb: Value = serde_json::from_str(&fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);

    let c = tmp.path().join("c");
    assert!(toponet(&["run", &cfg, "--output-dir", c.to_str().unwrap(), "--seed", "4"]).status.success());
    let mc: Value = serde_json::from_str(&fs::read_to_string(c.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(mc["seed"], 4);
    assert_ne!(mc["config_hash"], ma["config_hash"]);
}

#[test]
fn zero_epochs_writes_manifest_and_initial_checkpoint_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("z");
    let text = config(&out, 0, r#"{"kind": "complete"}"#).replace("\"snapshot_epochs\": [0, 0]", "\"snapshot_epochs\": []");
    let cfg = write_config(tmp.path(), "c.json", &text);
    let res = toponet(&["run", &cfg]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, vec!["checkpoint_epoch0.tpnc", "manifest.json"]);
    let ck = Checkpoint::load(&out.join("checkpoint_epoch0.tpnc")).unwrap();
    assert_eq!(ck.epoch, 0);
    assert!(ck.state.stages.iter().all(|s| s.alpha.data().iter().all(|&a| a == 0.0 || a == 1.0)));
}

#[test]
fn bad_residual_interval_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &config(&tmp.path().join("r"), 1, r#"{"kind": "residual", "interval": 3}"#));
    let res = toponet(&["run", &cfg]);
    assert!(!res.status.success());
    let err = error_json(&res);
    assert_eq!(err["error"], "network");
    assert!(err["message"].as_str().unwrap().contains("stage 1"), "{err}");
}

#[test]
fn config_errors_are_single_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let good = config(&tmp.path().join("u"), 1, r#"{"kind": "complete"}"#);
    let cfg = write_config(tmp.path(), "u.json", &good.replace("\"seed\": 3", "\"seed\": 3, \"color\": \"red\""));
    let res = toponet(&["run", &cfg]);
    assert_eq!(res.status.code(), Some(1));
    assert_eq!(error_json(&res)["error"], "config");

    let res = toponet(&["run", tmp.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(error_json(&res)["error"], "io");

    let res = toponet(&["frobnicate"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_json(&res)["error"], "usage");
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("l");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".lock"), "").unwrap();
    let cfg = write_config(tmp.path(), "c.json", &config(&out, 1, r#"{"kind": "complete"}"#));
    let res = toponet(&["run", &cfg]);
    assert!(!res.status.success());
    assert_eq!(error_json(&res)["error"], "locked");
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn inspect_and_analyze_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("i");
    let cfg = write_config(tmp.path(), "c.json", &config(&out, 2, r#"{"kind": "complete"}"#));
    assert!(toponet(&["run", &cfg]).status.success());
    let ckpt = out.join("checkpoint_final.tpnc");

    let res = toponet(&["inspect", ckpt.to_str().unwrap()]);
    assert!(res.status.success());
    let info: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(info["epoch"], 2);
    assert_eq!(info["stages"][1]["nodes"], 6);
    assert_eq!(info["edges"], 10 + 15);

    let analysis_dir = tmp.path().join("a");
    let res = toponet(&["analyze", ckpt.to_str().unwrap(), &cfg, "--output-dir", analysis_dir.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read(analysis_dir.join("sweep_nodes.csv")).unwrap(), fs::read(out.join("sweep_nodes.csv")).unwrap());

    // a config describing a different architecture is refused
    let other = write_config(tmp.path(), "o.json", &config(&out, 2, r#"{"kind": "complete"}"#).replace("[5, 6]", "[5, 7]"));
    let res = toponet(&["analyze", ckpt.to_str().unwrap(), &other, "--output-dir", tmp.path().join("m").to_str().unwrap()]);
    assert_eq!(error_json(&res)["error"], "mismatch");

    let junk = tmp.path().join("junk.tpnc");
    fs::write(&junk, b"NOPE0000").unwrap();
    let res = toponet(&["inspect", junk.to_str().unwrap()]);
    let err = error_json(&res);
    assert_eq!(err["error"], "checkpoint");
    assert!(err["message"].as_str().unwrap().contains("bad magic"));
}

#[test]
fn gen_topology_prints_text_format() {
    let res = toponet(&["gen-topology", "residual:6:2"]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    let (g, a) = toponet::graph::parse_text(&text).unwrap();
    assert_eq!(g, toponet::graph::residual_graph(6, 2).unwrap());
    assert!(a.values().iter().all(|&v| v == 0.0 || v == 1.0));

    let r1 = toponet(&["gen-topology", "random:8:0.5", "--seed", "7"]);
    let r2 = toponet(&["gen-topology", "random:8:0.5", "--seed", "7"]);
    assert_eq!(r1.stdout, r2.stdout);

    let res = toponet(&["gen-topology", "residual:7:2"]);
    assert!(!res.status.success());
    assert_eq!(error_json(&res)["error"], "config");
}
