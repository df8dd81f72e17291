//! End-to-end checks of the binary: flags, exit codes, seed precedence.

use std::path::PathBuf;
use std::process::{Command, Output};

fn kaleido() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kaleido"))
}

fn run(args: &[&str]) -> Output {
    kaleido().args(args).output().expect("binary runs")
}

fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kaleido_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gen-data"));
    assert!(text.contains("grad-check"));
}

#[test]
fn unknown_command_and_flag_exit_one() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("USAGE"));

    let out = run(&["gen-data", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pretrain_without_corpus_exits_one() {
    let out = run(&["pretrain", "--out-dir", "/tmp/kaleido_cli_nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));
}

#[test]
fn missing_corpus_file_exits_two() {
    let dir = temp_dir("missing");
    let out = run(&[
        "inspect-align",
        "--corpus",
        dir.join("nope.kbc").to_str().unwrap(),
        "--record",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_readable_corpus() {
    let dir = temp_dir("gen");
    let corpus = dir.join("c.kbc");
    let out = run(&["gen-data", "--seed", "7", "--count", "5", "--out", corpus.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let records = kaleido::data::read_corpus(&corpus).unwrap();
    assert_eq!(records.len(), 5);
    assert!(dir.join("run-gen-data.cfg").exists());
}

#[test]
fn corrupt_corpus_exits_two() {
    let dir = temp_dir("corrupt");
    let corpus = dir.join("c.kbc");
    run(&["gen-data", "--seed", "1", "--count", "2", "--out", corpus.to_str().unwrap()]);
    let mut bytes = std::fs::read(&corpus).unwrap();
    bytes[0] ^= 0xFF;
    std::fs::write(&corpus, &bytes).unwrap();
    let out = run(&["inspect-align", "--corpus", corpus.to_str().unwrap(), "--record", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format"));
}

#[test]
fn seed_precedence_flag_over_env_over_file() {
    let dir = temp_dir("seeds");
    // config file with seed 1
    let cfg_path = dir.join("base.cfg");
    std::fs::write(&cfg_path, "[run]\nseed=1\n").unwrap();

    let corpus_for = |name: &str, extra_env: Option<(&str, &str)>, args: &[&str]| -> Vec<u8> {
        let corpus = dir.join(name);
        let mut cmd = kaleido();
        cmd.args(["gen-data", "--count", "3", "--out", corpus.to_str().unwrap()]);
        cmd.args(args);
        if let Some((k, v)) = extra_env {
            cmd.env(k, v);
        }
        let out = cmd.output().unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(corpus).unwrap()
    };

    let from_file = corpus_for("file.kbc", None, &["--config", cfg_path.to_str().unwrap()]);
    let seed1_direct = corpus_for("direct1.kbc", None, &["--seed", "1"]);
    assert_eq!(from_file, seed1_direct, "config file seed applies");

    let env_wins =
        corpus_for("env.kbc", Some(("KB_SEED", "2")), &["--config", cfg_path.to_str().unwrap()]);
    let seed2_direct = corpus_for("direct2.kbc", None, &["--seed", "2"]);
    assert_eq!(env_wins, seed2_direct, "env beats file");
    assert_ne!(env_wins, seed1_direct);

    let flag_wins = corpus_for(
        "flag.kbc",
        Some(("KB_SEED", "2")),
        &["--config", cfg_path.to_str().unwrap(), "--seed", "3"],
    );
    let seed3_direct = corpus_for("direct3.kbc", None, &["--seed", "3"]);
    assert_eq!(flag_wins, seed3_direct, "flag beats env");
}

#[test]
fn bad_env_seed_exits_one() {
    let out = kaleido()
        .args(["gen-data", "--count", "1", "--out", "/tmp/kaleido_cli_badseed.kbc"])
        .env("KB_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn inspect_commands_print_structure() {
    let dir = temp_dir("inspect");
    let corpus = dir.join("c.kbc");
    run(&["gen-data", "--seed", "4", "--count", "3", "--out", corpus.to_str().unwrap()]);

    let out = run(&[
        "inspect-masking",
        "--corpus",
        corpus.to_str().unwrap(),
        "--record",
        "1",
        "--seed",
        "9",
        "--strategy",
        "random",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("strategy random"));
    assert!(text.contains("masked level5"));

    let out = run(&[
        "inspect-kpg",
        "--corpus",
        corpus.to_str().unwrap(),
        "--image-record",
        "0",
        "--out-dir",
        dir.join("patches").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.join("patches/patch_00.ppm").exists());
    assert!(dir.join("patches/patch_54.ppm").exists());
    // PPM header sanity
    let ppm = std::fs::read(dir.join("patches/patch_00.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
}

#[test]
fn grad_check_small_config_exits_zero() {
    let out = run(&["grad-check", "--hidden", "4", "--heads", "1", "--d-img", "4", "--seed", "3"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout: {} stderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}
