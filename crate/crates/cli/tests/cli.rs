use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn arwkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_arwkv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = arwkv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const MODEL: &str = r#""model": {"vocab_size": 256, "d_model": 16, "n_layers": 2, "n_heads": 2,
    "n_kv_heads": 1, "head_dim": 8, "d_ffn": 32, "max_seq_len": 32, "seed": 1}"#;

fn write_config(dir: &Path, name: &str, train: &str, data: &str) -> PathBuf {
    let p = dir.join(name);
    let text = format!(r#"{{{MODEL}, "train": {{{train}}}, "data": {{{data}}}}}"#);
    std::fs::write(&p, text).unwrap();
    p
}

struct Pipeline {
    dir: tempfile::TempDir,
}

impl Pipeline {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = r#""seed": 3, "n_train": 4000, "n_heldout": 600"#;
        let p = Self { dir };
        let gen = write_config(p.path(), "gen.json", r#""stage": "pretrain""#, data);
        ok(&["gen-data", "--config", s(&gen), "--out-dir", s(p.path())]);
        p
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }

    fn config(&self, name: &str, stage: &str, extra: &str) -> PathBuf {
        let data = format!(
            r#""seed": 3, "train_path": "{}", "heldout_path": "{}""#,
            s(&self.file("train.bin")),
            s(&self.file("heldout.bin"))
        );
        let mut train = serde_json::json!({
            "stage": stage, "lr": 0.01, "batch_size": 2, "seq_len": 16, "max_steps": 6, "log_every": 2
        });
        let extra: serde_json::Value = serde_json::from_str(&format!("{{{}}}", extra.trim_start_matches(','))).unwrap();
        for (k, v) in extra.as_object().unwrap() {
            train[k] = v.clone();
        }
        let train = train.to_string();
        write_config(self.path(), name, &train[1..train.len() - 1], &data)
    }

    fn teacher(&self) -> PathBuf {
        let cfg = self.config("t.json", "pretrain", "");
        let out = self.file("teacher.ckpt");
        ok(&["train-teacher", "--config", s(&cfg), "--out", s(&out)]);
        out
    }
}

#[test]
fn full_pipeline_produces_artifacts() {
    let p = Pipeline::new();
    assert!(p.file("manifest.json").exists());
    let teacher = p.teacher();
    assert!(p.file("teacher.ckpt.manifest.json").exists());
    let metrics = std::fs::read_to_string(p.file("teacher.ckpt.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss", "tokens_seen", "wall_ms", "stage", "variant"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    let align_cfg = p.config("a.json", "align", "");
    let s1 = p.file("s1.ckpt");
    ok(&["align", "--config", s(&align_cfg), "--teacher", s(&teacher), "--out", s(&s1)]);
    assert!(p.file("s1.ckpt.metrics.jsonl").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(p.file("s1.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "align");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["corpora"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["config"]["train"]["beta1"], 0.9);

    let mut runs = Vec::new();
    for (name, extra) in [
        ("arwkv", r#", "gate_mode": "gate_free""#),
        ("arwkv_m", r#", "gate_mode": "gate_free", "freeze_mlp": false"#),
        ("arwkv_g_m", r#", "freeze_mlp": false"#),
    ] {
        let cfg = p.config(&format!("{name}.json"), "distill", extra);
        let out = p.file(&format!("{name}.ckpt"));
        ok(&[
            "distill", "--config", s(&cfg), "--teacher", s(&teacher), "--student", s(&s1), "--out",
            s(&out),
        ]);
        runs.push(out);
    }

    let sft_cfg = p.config("sft.json", "sft", r#", "seq_len": 24"#);
    let s3 = p.file("s3.ckpt");
    ok(&["sft", "--config", s(&sft_cfg), "--student", s(&runs[0]), "--out", s(&s3)]);

    let eval = ok(&["eval", "--config", s(&sft_cfg), "--model", s(&s3), "--teacher", s(&teacher)]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["metrics"]["ppl"].as_f64().unwrap() > 1.0);
    assert!(v["metrics"]["kl"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["variant"], "ARWKV");

    let list = runs.iter().map(|r| s(r).to_string()).collect::<Vec<_>>().join(",");
    let rep_json = p.file("report.json");
    let text = ok(&[
        "report", "--config", s(&align_cfg), "--runs", &list, "--teacher", s(&teacher), "--out",
        s(&rep_json),
    ]);
    let header = text.lines().next().unwrap();
    for tag in ["ARWKV", "ARWKV-M", "ARWKV-G-M"] {
        assert!(header.split_whitespace().any(|w| w == tag), "{header}");
    }
    assert!(text.lines().any(|l| l.starts_with("kl")));
    let again = ok(&[
        "report", "--config", s(&align_cfg), "--runs", &list, "--teacher", s(&teacher),
    ]);
    assert_eq!(text, again);

    let info = ok(&["inspect", s(&s3)]);
    let v: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(v["meta"]["stage"], "sft");
    assert!(v["groups"]["timemix"].as_u64().unwrap() > 0);
    let info = ok(&["inspect", s(&p.file("train.bin"))]);
    assert!(info.contains("\"tokens\": 4000"));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let p = Pipeline::new();
    let cfg = p.config("t.json", "pretrain", "");
    let full = p.file("full.ckpt");
    ok(&["train-teacher", "--config", s(&cfg), "--out", s(&full)]);
    let half = p.file("half.ckpt");
    let state = p.file("half.state");
    let metrics = p.file("resumed.jsonl");
    ok(&[
        "train-teacher", "--config", s(&cfg), "--out", s(&half), "--stop-at", "3", "--save-state",
        s(&state), "--metrics", s(&metrics),
    ]);
    let resumed = p.file("resumed.ckpt");
    ok(&[
        "train-teacher", "--config", s(&cfg), "--out", s(&resumed), "--resume", s(&state), "--metrics",
        s(&metrics),
    ]);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());
    let steps: Vec<u64> = std::fs::read_to_string(&metrics)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![2, 4, 6]);
}

#[test]
fn missing_flag_is_a_usage_error() {
    let out = arwkv(&["align", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--teacher"));
    assert_eq!(arwkv(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"stage": "align", "learning_rat": 0.1}}"#).unwrap();
    let out = arwkv(&["align", "--config", s(&cfg), "--teacher", "t.ckpt", "--out", "o.ckpt"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(v["error"], "config");
    assert!(v["message"].as_str().unwrap().contains("learning_rat"));

    let out = arwkv(&["inspect", s(&dir.path().join("missing.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap();
    assert_eq!(v["error"], "io");
}

#[test]
fn report_fails_on_missing_checkpoint() {
    let p = Pipeline::new();
    let cfg = p.config("r.json", "distill", "");
    let out = arwkv(&["report", "--config", s(&cfg), "--runs", s(&p.file("nope.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}

#[test]
fn probe_task_teacher_trains_without_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("parity.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"vocab_size": 3, "d_model": 16, "n_layers": 1, "n_heads": 2, "n_kv_heads": 1,
            "head_dim": 8, "d_ffn": 32, "max_seq_len": 64, "attention_kind": "rwkv7", "a_range": "extended"},
           "train": {"stage": "pretrain", "max_steps": 3, "batch_size": 2, "seq_len": 8},
           "data": {"task": "parity", "eval_lengths": [8, 40], "n_eval": 4}}"#,
    )
    .unwrap();
    let out = dir.path().join("p.ckpt");
    ok(&["train-teacher", "--config", s(&cfg), "--out", s(&out)]);
    let eval = ok(&["eval", "--config", s(&cfg), "--model", s(&out)]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!(v["metrics"]["parity@40"].as_f64().is_some());
}
