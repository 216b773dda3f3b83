use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn twin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twin"))
        .args(args)
        .output()
        .expect("spawn twin")
}

fn small_config(extra: Value) -> Value {
    let mut base = json!({
        "world": {"areas": 2, "steps": 40, "window": 4},
        "fed": {"rounds": 3, "local_steps": 2},
        "batch_size": 4,
        "twin": {"latent_dim": 4, "layers": {"conv": [{"channels": 2, "kernel": 2, "stride": 1}], "hidden": [6]}},
        "ops": ["V->W"],
        "seeds": [1]
    });
    merge(&mut base, extra);
    base
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, e) => *b = e,
    }
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn generate_writes_one_csv_per_area_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(json!({"world": {"areas": 3, "seed": 42}})));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = twin(&["generate", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let csvs = dir_bytes(&a.join("data"));
    assert_eq!(csvs.len(), 3);
    assert_eq!(csvs, dir_bytes(&b.join("data")));
    let manifest: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["dataset"]["seed"], 42);
    assert_eq!(manifest["effective_config"]["world"]["seed"], 42);
}

#[test]
fn generated_csvs_feed_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_config(json!({})));
    let gen = tmp.path().join("gen");
    assert!(twin(&["generate", "--config", s(&cfg), "--out", s(&gen)]).status.success());
    let data: Vec<String> = (0..2).map(|i| s(&gen.join(format!("data/area_{i}.csv"))).to_string()).collect();
    let from_csv = write_config(tmp.path(), "d.json", &small_config(json!({"data": data, "charts": false})));
    let out = tmp.path().join("run");
    let o = twin(&["run", "--config", s(&from_csv), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.join("charts.svg").exists());
    assert!(out.join("results.csv").exists());
}

#[test]
fn fusor_sweep_gives_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(json!({
        "twin": {"fusors": ["gating", "multiplication", "maximum"]},
        "seeds": [1, 2, 3],
        "checkpoints": false
    }));
    let path = write_config(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("out");
    let o = twin(&["run", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 9);
    for f in ["manifest.json", "history.csv", "costs.csv", "summary.csv", "charts.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn reruns_from_manifest_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(json!({"ops": ["V->W", "V+W->S", "S->V,W"], "twin": {"fusors": ["gating", "attention"]}, "seeds": [1, 2]}));
    let path = write_config(tmp.path(), "c.json", &cfg);
    let first = tmp.path().join("t1");
    let o = twin(&["run", "--config", s(&path), "--out", s(&first), "--threads", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let second = tmp.path().join("t8");
    let manifest = first.join("manifest.json");
    let o = twin(&["run", "--config", s(&manifest), "--out", s(&second), "--threads", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));

    assert_eq!(fs::read(first.join("results.csv")).unwrap(), fs::read(second.join("results.csv")).unwrap());
    let ckpts = dir_bytes(&first.join("checkpoints"));
    assert_eq!(ckpts.len(), 2 * 2 * (3 + 3));
    assert_eq!(ckpts, dir_bytes(&second.join("checkpoints")));
    let strip = |p: &Path| {
        let mut v: Value = serde_json::from_slice(&fs::read(p.join("manifest.json")).unwrap()).unwrap();
        v["effective_config"]["output"] = Value::Null;
        v
    };
    assert_eq!(strip(&first), strip(&second));
}

#[test]
fn seed_flag_overrides_world_and_training_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &small_config(json!({"seeds": [1, 2]})));
    let out = tmp.path().join("out");
    let o = twin(&["run", "--config", s(&path), "--out", s(&out), "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["effective_config"]["seeds"], json!([9]));
    assert_eq!(manifest["dataset"]["seed"], 9);
    let text = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn huge_local_rate_in_gated_mode_exits_with_bound_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(json!({"fed": {"aggregation": "gated", "local_lr": 10.0}}));
    let path = write_config(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("out");
    let o = twin(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(out.join("bound_report.json")).unwrap()).unwrap();
    assert!(report["local_lr"].as_f64().unwrap() > 1000.0 * report["bound"].as_f64().unwrap());
    assert!(stderr(&o).contains("bound_report.json"));
}

#[test]
fn divergence_exits_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(json!({"fed": {"local_lr": 1e6, "rounds": 20}}));
    let path = write_config(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("out");
    let o = twin(&["run", "--config", s(&path), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(out.join("divergence.json")).unwrap()).unwrap();
    for k in ["round", "area", "step", "loss"] {
        assert!(report.get(k).is_some(), "{k}");
    }
}

#[test]
fn config_errors_are_listed_and_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &json!({"speling": 1, "fed": {"roundz": 2}}));
    let o = twin(&["run", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("speling") && err.contains("fed.roundz"), "{err}");

    let path = write_config(tmp.path(), "d.json", &json!({"seeds": [], "world": {"window": 0}}));
    let o = twin(&["run", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("seeds") && err.contains("world.window"), "{err}");
}

#[test]
fn unwritable_output_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, "x").unwrap();
    let path = write_config(tmp.path(), "c.json", &small_config(json!({})));
    let o = twin(&["generate", "--config", s(&path), "--out", s(&file.join("sub"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn costs_match_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &small_config(json!({})));
    let out = tmp.path().join("out");
    let o = twin(&["costs", "--config", s(&path), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out.join("costs.csv"));
    let header = &rows[0];
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let fed = &rows[1];
    let central = &rows[2];
    assert_eq!(fed[col("mode")], "federated");
    assert_eq!(central[col("mode")], "centralized");

    let up: u64 = fed[col("upload_bytes")].parse().unwrap();
    let down: u64 = fed[col("download_bytes")].parse().unwrap();
    // T = 3 rounds, n = 2 areas, one vector each way per area and round
    assert_eq!(up, down);
    assert_eq!(up % 6, 0);
    let per_message = up / 6;
    assert_eq!((per_message - 64) % 8, 0);

    // 2 areas × 40 steps × (V 2 + W 2) values, one message per area
    let central_up: u64 = central[col("upload_bytes")].parse().unwrap();
    assert_eq!(central_up, 2 * (40 * 4 * 8 + 64));
    let central_down: u64 = central[col("download_bytes")].parse().unwrap();
    assert_eq!(central_down, per_message);

    let zero = write_config(tmp.path(), "z.json", &small_config(json!({"fed": {"rounds": 0}})));
    let out0 = tmp.path().join("zero");
    assert!(twin(&["costs", "--config", s(&zero), "--out", s(&out0)]).status.success());
    let rows = csv_rows(&out0.join("costs.csv"));
    assert_eq!(rows[1][col("upload_bytes")], "0");
    assert_eq!(rows[1][col("download_bytes")], "0");
    assert_eq!(rows[1][col("messages")], "0");
}

#[test]
fn single_op_commands_check_kind_and_accept_donors() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &small_config(json!({})));
    let o = twin(&["merge", "--config", s(&path), "--op", "V->W"]);
    assert_eq!(o.status.code(), Some(1));

    let first = tmp.path().join("first");
    let o = twin(&["transfer", "--config", s(&path), "--op", "V->W", "--out", s(&first)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let donor = first.join("checkpoints/gating_seed1_V_to_W.json");
    assert!(donor.exists());

    let second = tmp.path().join("second");
    let o = twin(&[
        "split", "--config", s(&path), "--op", "V->W,S", "--donor", s(&donor), "--out", s(&second),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt: Value = serde_json::from_slice(&fs::read(second.join("checkpoints/gating_seed1_V_to_WS.json")).unwrap()).unwrap();
    let provenance = ckpt["manifest"]["provenance"].as_array().unwrap();
    assert_eq!(provenance.last().unwrap(), "V->W,S");
    assert!(provenance.iter().any(|p| p == "V->W"));
}

#[test]
fn check_bound_reports_and_flags_violations() {
    let o = twin(&["check-bound", "--g", "1", "--l", "1", "--mu", "0.1", "--beta", "5", "--eta", "0.5"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["bound"].as_f64().unwrap(), 2.5e-4);
    let o = twin(&[
        "check-bound", "--g", "1", "--l", "1", "--mu", "0.1", "--beta", "5", "--eta", "0.5", "--local-lr", "1e-3",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = twin(&["check-bound", "--g", "0", "--l", "1", "--mu", "0.1", "--beta", "5", "--eta", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn mode_flag_trains_unified_twins() {
    let tmp = tempfile::tempdir().unwrap();
    let path = write_config(tmp.path(), "c.json", &small_config(json!({})));
    let out = tmp.path().join("out");
    let o = twin(&["run", "--config", s(&path), "--out", s(&out), "--mode", "unified"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt: Value = serde_json::from_slice(&fs::read(out.join("checkpoints/gating_seed1_V_to_W.json")).unwrap()).unwrap();
    assert_eq!(ckpt["manifest"]["decoders"], json!(["V", "W", "S"]));
    let manifest: Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["effective_config"]["mode"], "unified");
}
