use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cuebeat::cli::FAILED_MARKER;
use cuebeat::synthdata::MANIFEST_FILE;

const SMALL_RUN: &str = "d_model = 32\nn_layers = 2\nn_heads = 2\nffn_dim = 64\nadapted_layers = 1\n\
                         max_prefix_len = 200\npretrain_steps = 10\nepochs = 1\nbatch_size = 2\n";

fn cuebeat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cuebeat")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    manifest: PathBuf,
    base: PathBuf,
}

/// Synthesises four short clips and pretrains a tiny base.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("spec.toml");
    std::fs::write(&spec, "n_clips = 4\nduration_s = 4.0\nseed = 9\nwrite_flow = false\n").unwrap();
    let config = root.join("run.toml");
    std::fs::write(&config, SMALL_RUN).unwrap();
    let data = root.join("data");
    let base = root.join("base");
    assert!(cuebeat(&["synth-data", "--spec", s(&spec), "--out", s(&data)]).status.success());
    let manifest = data.join(MANIFEST_FILE);
    let out = cuebeat(&["pretrain", "--config", s(&config), "--data", s(&manifest), "--out", s(&base)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    Fixture {
        _dir: dir,
        root,
        config,
        manifest,
        base,
    }
}

#[test]
fn train_reports_budget_and_greedy_generation_is_repeatable() {
    let f = fixture();
    let ckpt = f.root.join("ckpt");
    let out = cuebeat(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.manifest),
        "--base",
        s(&f.base),
        "--out",
        s(&ckpt),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("trainable fraction"), "{stdout}");

    let generate = |dir: &Path| {
        let out = cuebeat(&[
            "generate",
            "--config",
            s(&f.config),
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&f.manifest),
            "--out",
            s(dir),
            "--seeds",
            "1,2",
            "--temperature",
            "0",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b) = (f.root.join("gen_a"), f.root.join("gen_b"));
    generate(&a);
    generate(&b);
    let mut tokens: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with("_tokens.expt"))
        .collect();
    tokens.sort();
    assert_eq!(tokens.len(), 8);
    for name in tokens {
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn divergence_exits_with_code_two_and_leaves_a_marker() {
    // A step size past the f32 range turns the first update into infinities.
    let f = fixture();
    let ckpt = f.root.join("ckpt");
    let out = cuebeat(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.manifest),
        "--base",
        s(&f.base),
        "--out",
        s(&ckpt),
        "--learning-rate",
        "1e39",
        "--grad-clip",
        "false",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let marker = std::fs::read_to_string(ckpt.join(FAILED_MARKER)).unwrap();
    assert!(marker.contains("diverge") || marker.contains("non-finite"), "{marker}");
}

#[test]
fn unknown_config_key_exits_with_code_one() {
    let f = fixture();
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "d_model = 32\nwarmup = 3\n").unwrap();
    let out = cuebeat(&["pretrain", "--config", s(&bad), "--data", s(&f.manifest), "--out", s(&f.root.join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));
}
