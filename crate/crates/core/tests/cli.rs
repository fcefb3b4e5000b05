#![cfg(feature = "cli")]

use std::fs;
use std::path::{Path, PathBuf};

use conformer::cli::run;

fn cli(args: &[&str]) -> anyhow::Result<String> {
    let mut out = Vec::new();
    run(std::iter::once("conformer").chain(args.iter().copied()), &mut out)?;
    Ok(String::from_utf8(out)?)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.json");
    let json = serde_json::json!({
        "model": {"t_in": 6, "t_out": 3, "d_model": 8, "n_heads": 2},
        "train": {"max_epochs": 2, "windows_per_epoch": 16, "batch_size": 4, "val_stride": 4},
        "synth": {"n_nodes": 5, "days": 3, "interval_minutes": 30, "incident_rate": 0.5}
    });
    fs::write(&config, json.to_string()).unwrap();
    Workspace { _dir: dir, root, config }
}

fn synth_and_train(ws: &Workspace) -> (PathBuf, PathBuf) {
    let data = ws.root.join("data");
    let model = ws.root.join("model");
    cli(&["synth", "--config", s(&ws.config), "--seed", "3", "--out", s(&data)]).unwrap();
    cli(&["train", "--config", s(&ws.config), "--seed", "3", "--data", s(&data), "--out", s(&model)]).unwrap();
    (data, model)
}

#[test]
fn synth_writes_the_dataset_files() {
    let ws = workspace();
    let out = ws.root.join("d");
    let msg = cli(&["synth", "--config", s(&ws.config), "--out", s(&out)]).unwrap();
    assert!(msg.starts_with("nodes=5 steps=144 "), "{msg}");
    for f in ["values.csv", "incidents.csv", "adjacency.csv", "meta.json", "config.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let values = fs::read_to_string(out.join("values.csv")).unwrap();
    assert_eq!(values.lines().next(), Some("t,node,value"));
    assert_eq!(values.lines().count(), 1 + 144 * 5);
}

#[test]
fn synth_is_byte_deterministic() {
    let ws = workspace();
    let (a, b) = (ws.root.join("a"), ws.root.join("b"));
    for d in [&a, &b] {
        cli(&["synth", "--config", s(&ws.config), "--seed", "8", "--out", s(d)]).unwrap();
    }
    for f in ["values.csv", "incidents.csv", "adjacency.csv", "meta.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn zero_incident_rate_gives_header_only() {
    let ws = workspace();
    let out = ws.root.join("quiet");
    let msg = cli(&["synth", "--config", s(&ws.config), "--incident-rate", "0", "--out", s(&out)]).unwrap();
    assert!(msg.ends_with("accident_cells=0 regulation_cells=0\n"), "{msg}");
    assert_eq!(fs::read_to_string(out.join("incidents.csv")).unwrap(), "t,node,kind,code\n");
}

#[test]
fn train_evaluate_predict() {
    let ws = workspace();
    let (data, model) = synth_and_train(&ws);
    for f in ["checkpoint.bin", "history.csv", "config.json"] {
        assert!(model.join(f).is_file(), "{f}");
    }
    let history = fs::read_to_string(model.join("history.csv")).unwrap();
    assert_eq!(history.lines().next(), Some("epoch,train_mae,val_mae"));
    assert_eq!(history.lines().count(), 3);

    let ckpt = model.join("checkpoint.bin");
    let eval_dir = ws.root.join("eval");
    let out = cli(&[
        "evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--horizons", "1,3", "--out", s(&eval_dir),
    ])
    .unwrap();
    assert!(out.contains("# model (test)") && out.contains("# historical inertia (test)"), "{out}");
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let labels: Vec<&str> = metrics.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["horizon", "1", "3", "avg"]);
    assert!(eval_dir.join("metrics_hi.csv").is_file());

    let pred_dir = ws.root.join("pred");
    let out = cli(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--at", "138", "--out", s(&pred_dir)]).unwrap();
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "node_0,node_1,node_2,node_3,node_4");
    assert_eq!(lines.len(), 1 + 3);
    assert!(lines[1..].iter().all(|l| l.split(',').all(|v| v.parse::<f64>().unwrap().is_finite())));
    assert!(cli(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--at", "139"]).is_err());
}

#[test]
fn evaluate_rejects_horizon_beyond_forecast() {
    let ws = workspace();
    let (data, model) = synth_and_train(&ws);
    let err = cli(&[
        "evaluate", "--checkpoint", s(&model.join("checkpoint.bin")), "--data", s(&data), "--horizons", "4",
        "--out", s(&ws.root),
    ])
    .unwrap_err();
    assert!(err.to_string().contains("horizon 4"), "{err:#}");
}

#[test]
fn checkpoint_config_mismatch_is_an_error() {
    let ws = workspace();
    let (data, model) = synth_and_train(&ws);
    let ckpt = model.join("checkpoint.bin");
    let err = cli(&[
        "evaluate", "--checkpoint", s(&ckpt), "--data", s(&data), "--ablate", "no-accident", "--out", s(&ws.root),
    ])
    .unwrap_err();
    assert!(err.to_string().contains("differ"), "{err:#}");
    // The same configuration is accepted.
    cli(&["evaluate", "--config", s(&ws.config), "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ws.root)])
        .unwrap();
}

#[test]
fn flops_worked_example() {
    let ws = workspace();
    let cfg = ws.root.join("flops.json");
    let json = serde_json::json!({
        "model": {"t_in": 2, "d_model": 4, "hops": 2, "n_heads": 1},
        "synth": {"n_nodes": 3, "days": 1}
    });
    fs::write(&cfg, json.to_string()).unwrap();
    let out = cli(&["flops", "--config", s(&cfg), "--edges", "10"]).unwrap();
    assert_eq!(out.lines().next(), Some("flops=296"));
    assert!(out.lines().nth(1).unwrap().starts_with("params="));
}

#[test]
fn bad_arguments_are_errors() {
    let ws = workspace();
    assert!(cli(&["synth", "--ablate", "no-such", "--out", s(&ws.root)]).is_err());
    assert!(cli(&["train", "--data", s(&ws.root.join("missing")), "--out", s(&ws.root)]).is_err());
    fs::write(ws.root.join("bad.json"), r#"{"modle": {}}"#).unwrap();
    assert!(cli(&["flops", "--config", s(&ws.root.join("bad.json"))]).is_err());
}
