//! End-to-end checks of the executable: subcommand pipelines and exit codes.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_iris-lab"))
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage") || stderr.contains("usage"), "{stderr}");
}

#[test]
fn help_exits_zero() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn grad_check_passes_on_default_small_config() {
    let out = bin().arg("grad-check").output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn train_eval_rollout_render_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let config = dir.path().join("config.json");
    // tiny architecture so the pipeline test stays fast
    std::fs::write(
        &config,
        r#"{"total_steps": 4, "eval_every": 2, "checkpoint_every": 2,
            "policy": {"d": 4, "k": 2, "h": 8}}"#,
    )
    .unwrap();

    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run)
        .args(["--seed", "11"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("config.json").exists());
    assert!(run.join("metrics.jsonl").exists());
    assert!(run.join("eval/step_2.json").exists());
    let ckpt = run.join("checkpoints/step_4");
    assert!(ckpt.exists());

    let prompts = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/eval_prompts.txt");
    let report = dir.path().join("report.json");
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--prompts")
        .arg(&prompts)
        .arg("--out")
        .arg(&report)
        .args(["--images-per-prompt", "1"])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let body: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(body["n_prompts"], 40);

    let out = bin()
        .args(["rollout", "--ckpt"])
        .arg(&ckpt)
        .args(["--prompt", "one red left-of one blue", "--seed", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let map_lines: Vec<&str> = stdout
        .lines()
        .filter(|l| l.len() == 8 && l.chars().all(|c| ".RGBY".contains(c)))
        .collect();
    assert_eq!(map_lines.len(), 8, "{stdout}");
    assert!(stdout.contains("mean SC (text)"));
    assert!(stdout.contains("mean SC (image)"));

    let curves = dir.path().join("curves");
    let out = bin()
        .args(["render", "--log"])
        .arg(run.join("metrics.jsonl"))
        .arg("--out")
        .arg(&curves)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(&curves).unwrap().count(), 10);
}

#[test]
fn runtime_failures_exit_two() {
    let out = bin()
        .args(["render", "--log", "/nonexistent/metrics.jsonl", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"clip_epsilon": 1.5}"#).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("clip_epsilon"), "{stderr}");
}

#[test]
fn env_seed_is_lowest_precedence_override() {
    let dir = tempfile::tempdir().unwrap();
    let run_env = dir.path().join("env");
    let run_flag = dir.path().join("flag");
    let base = r#"{"total_steps": 1, "eval_every": 0, "policy": {"d": 4, "k": 2, "h": 8}}"#;
    let config = dir.path().join("config.json");
    std::fs::write(&config, base).unwrap();

    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run_env)
        .env("IRIS_LAB_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_env.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(snap["trainer"]["seed"], 77);

    // the flag wins over the environment
    let out = bin()
        .args(["train", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&run_flag)
        .args(["--seed", "5"])
        .env("IRIS_LAB_SEED", "77")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let snap: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_flag.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(snap["trainer"]["seed"], 5);
}
