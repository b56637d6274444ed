use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_vem-rl");

const SMOKE_TOML: &str = r#"
seed = 7

[env]
screens = 4
tasks = 2
history_k = 0

[collect]
episodes = 30

[vem]
kind = "tabular"
epochs = 20
history_k = 0

[policy]
epochs = 3
actions_per_state = 8

[eval]
seeds = [0, 1]

[theory]
noise_levels = [0.0, 0.1]
"#;

fn run(dir: &Path, config: Option<&Path>, args: &[&str]) -> std::process::Output {
    let mut cmd = Command::new(BIN);
    cmd.arg("--out-dir").arg(dir);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args);
    cmd.output().expect("spawn vem-rl")
}

fn write_smoke(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("exp.toml");
    fs::write(&cfg, SMOKE_TOML).unwrap();
    cfg
}

#[test]
fn stagewise_commands_exit_zero_and_write_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_smoke(dir);
    for (args, artifact) in [
        (vec!["generate-env"], "env.json"),
        (vec!["collect"], "data.jsonl"),
        (vec!["annotate"], "labels.jsonl"),
        (vec!["train-vem"], "vem.bin"),
        (vec!["train-policy"], "policy.bin"),
        (vec!["evaluate"], "eval_report.json"),
        (vec!["theory-check"], "bound_report.json"),
        (vec!["report"], "report.md"),
    ] {
        let out = run(dir, Some(&cfg), &args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(dir.join(artifact).exists(), "{args:?} did not write {artifact}");
    }
    let csv = fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(csv.starts_with("method,domain,step_sr,task_sr,avg_step_length"));
}

#[test]
fn run_subcommand_completes_and_caches() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_smoke(dir);
    let out = run(dir, Some(&cfg), &["run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("manifest.json").exists());
    let again = run(dir, Some(&cfg), &["run"]);
    assert!(again.status.success());
    let stderr = String::from_utf8_lossy(&again.stderr);
    assert!(stderr.contains("cached"), "second run not cached: {stderr}");
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // Malformed TOML.
    let bad = dir.join("bad.toml");
    fs::write(&bad, "seed = = 3").unwrap();
    let out = run(dir, Some(&bad), &["generate-env"]);
    assert_eq!(out.status.code(), Some(2));

    // Well-formed TOML with an invalid enum value.
    let bad2 = dir.join("bad2.toml");
    fs::write(&bad2, "[collect]\nbehavior = \"mystery\"\n").unwrap();
    let out = run(dir, Some(&bad2), &["collect"]);
    assert_eq!(out.status.code(), Some(2));

    // Missing config file.
    let out = run(dir, Some(&dir.join("absent.toml")), &["generate-env"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failures_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_smoke(dir);
    // collect requires env.json, which does not exist yet.
    let out = run(dir, Some(&cfg), &["collect"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    // Corrupt dataset fails train-vem downstream.
    let ok = run(dir, Some(&cfg), &["generate-env"]);
    assert!(ok.status.success());
    fs::write(dir.join("data.jsonl"), "not json\n").unwrap();
    let out = run(dir, Some(&cfg), &["train-vem"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let t1 = tempfile::tempdir().unwrap();
    let t2 = tempfile::tempdir().unwrap();
    let cfg1 = write_smoke(t1.path());
    let cfg2 = write_smoke(t2.path());
    for (dir, cfg, seed) in [(t1.path(), &cfg1, "5"), (t2.path(), &cfg2, "6")] {
        let out = Command::new(BIN)
            .args(["--out-dir"])
            .arg(dir)
            .args(["--config"])
            .arg(cfg)
            .args(["--seed", seed, "generate-env"])
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = fs::read_to_string(t1.path().join("env.json")).unwrap();
    let b = fs::read_to_string(t2.path().join("env.json")).unwrap();
    assert_ne!(a, b, "different seeds generated identical environments");
}
