use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use scene_core::agent::ModelConfig;
use serde_json::{json, Value};

fn scene(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scene")).args(args).env_remove("SCENE_CACHE_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = scene(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn json_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json") && n != "manifest.json")
        .collect();
    names.sort();
    names
}

/// Small networks and short pretraining so runs take seconds.
fn tiny_config(dir: &Path, extra: Value) -> String {
    let mut config = json!({
        "train_worlds": 2,
        "out_worlds": 1,
        "train": { "episodes": 3, "step_cap": 10, "k_images": 2, "model": ModelConfig::reduced() },
        "assets": { "generator": { "epochs": 1 }, "encoder": { "epochs": 1 } },
    });
    if let (Value::Object(c), Value::Object(e)) = (&mut config, extra) {
        c.extend(e);
    }
    let path = dir.join("config.json");
    std::fs::write(&path, config.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let out = scene(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in ["gen", "pretrain-gen", "train", "eval", "compare", "cache", "explain", "phrases", "serve-env"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(scene(&["gen", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(scene(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(scene(&["gen", "--count", "many"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(scene(&["gen", "--config", "/nonexistent/config.json", "--out", out]).status.code(), Some(1));
    assert_eq!(scene(&["eval", "--out", out]).status.code(), Some(1));
}

#[test]
fn gen_writes_requested_worlds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("worlds");
    ok(&["gen", "--difficulty", "easy", "--seed", "7", "--count", "5", "--out", out.to_str().unwrap()]);
    assert_eq!(json_files(&out).len(), 5);
    let m = manifest(&out);
    assert_eq!(m["master_seed"], 7);
    assert!(m["finished_unix"].is_u64());
    assert_eq!(m["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn flags_beat_config_file_beat_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"count": 3, "difficulty": "medium", "seed": 4}"#).unwrap();
    let out = dir.path().join("w");
    ok(&["gen", "--config", config.to_str().unwrap(), "--count", "2", "--out", out.to_str().unwrap()]);
    let names = json_files(&out);
    assert_eq!(names.len(), 2);
    assert!(names.iter().all(|n| n.starts_with("medium-")));
    let m = manifest(&out);
    assert_eq!(m["config"]["count"], 2);
    assert_eq!(m["config"]["seed"], 4);
    assert_eq!(m["config"]["runs"], 5);
}

#[test]
fn manifest_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen", "--seed", "11", "--count", "2", "--pool", "out", "--out", a.to_str().unwrap()]);
    let m = a.join("manifest.json");
    ok(&["gen", "--config", m.to_str().unwrap(), "--pool", "out", "--out", b.to_str().unwrap()]);
    for name in json_files(&a) {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
    assert_eq!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn train_eval_compare_text_agent() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), json!({}));
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    ok(&["train", "--config", &config, "--agent", "text-only", "--seed", "1", "--out", run_s]);
    assert!(run.join("checkpoint.ckpt").exists());
    let curve = std::fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert_eq!(manifest(&run)["config"]["train"]["agent"], "text_only");

    let eval = dir.path().join("eval");
    let ckpt = run.join("checkpoint.ckpt");
    ok(&["eval", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--runs", "2", "--seed", "1", "--out", eval.to_str().unwrap()]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"][0]["runs"], 2);
    assert!(eval.join("report.csv").exists());

    let random = dir.path().join("random");
    ok(&["eval", "--config", &config, "--random", "--runs", "2", "--out", random.to_str().unwrap()]);

    let cmp = dir.path().join("cmp");
    let table = ok(&[
        "compare",
        eval.join("report.json").to_str().unwrap(),
        random.join("report.json").to_str().unwrap(),
        "--curve",
        run.join("curve.csv").to_str().unwrap(),
        "--out",
        cmp.to_str().unwrap(),
    ]);
    assert!(table.contains("text_only") && table.contains("random"), "{table}");
    assert!(cmp.join("table.txt").exists());
    assert!(cmp.join("curves-easy.png").exists());
}

#[test]
fn multimodal_train_and_explain() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), json!({}));
    let assets = dir.path().join("assets");
    ok(&["pretrain-gen", "--config", &config, "--out", assets.to_str().unwrap()]);
    let run = dir.path().join("run");
    let assets_ckpt = assets.join("assets.ckpt");
    ok(&[
        "train",
        "--config",
        &config,
        "--agent",
        "multimodal",
        "--assets",
        assets_ckpt.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let explain = dir.path().join("explain");
    let ckpt = run.join("checkpoint.ckpt");
    ok(&["explain", "--config", &config, "--checkpoint", ckpt.to_str().unwrap(), "--steps", "2", "--out", explain.to_str().unwrap()]);
    let bundle: Value =
        serde_json::from_str(&std::fs::read_to_string(explain.join("step-0").join("manifest.json")).unwrap()).unwrap();
    let panels = bundle["panels"].as_array().unwrap();
    assert!(!panels.is_empty());
    assert!(explain.join("step-0").join("panel-0-overlay.png").exists());
}

#[test]
fn cache_warm_respects_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("cache-root");
    let queries = dir.path().join("q.txt");
    std::fs::write(&queries, "red apple\nRed  Apple\nblue box\n").unwrap();
    let out = dir.path().join("out");
    let warm = || {
        let o = Command::new(env!("CARGO_BIN_EXE_scene"))
            .args(["cache", "warm", queries.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env("SCENE_CACHE_DIR", &root)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        serde_json::from_slice::<Value>(&o.stdout).unwrap()
    };
    let first = warm();
    assert_eq!(first["backend_calls"], 2);
    assert_eq!(first["entries"], 2);
    assert!(root.join("index.json").exists());
    let second = warm();
    assert_eq!(second["backend_calls"], 0);

    let o = Command::new(env!("CARGO_BIN_EXE_scene"))
        .args(["cache", "clear", "--out", out.to_str().unwrap()])
        .env("SCENE_CACHE_DIR", &root)
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_scene"))
        .args(["cache", "stats", "--out", out.to_str().unwrap()])
        .env("SCENE_CACHE_DIR", &root)
        .output()
        .unwrap();
    assert_eq!(serde_json::from_slice::<Value>(&o.stdout).unwrap()["entries"], 0);
}

#[test]
fn phrases_one_per_line() {
    let text = ok(&["phrases", "You see a red apple on the table and a blue box."]);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() >= 2, "{text}");
    assert!(lines.iter().any(|l| l.contains("apple")));
}

#[test]
fn serve_env_answers_each_line() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_scene"))
        .arg("serve-env")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"{\"type\":\"reset\",\"seed\":3,\"difficulty\":\"easy\"}\n{\"type\":\"close\"}\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["type"], "observation");
    assert_eq!(lines[1]["type"], "close");
}
