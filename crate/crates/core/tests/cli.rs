//! End-to-end checks of the `ciml` binary on a small synthetic config.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
trials = 2
[data.synthetic]
n = 120
v = 2
m = 3
dim_common = 2
dim_unique = 2
noise_std = 0.1
label_mix = [1.0, 0.85, 0.85]
seed = 0
[train]
epochs = 4
dim_common = 2
dim_unique = 2
hidden_dims = [16]
head_hidden_dims = [16]
mine_hidden_dims = [8]
batch_size = 32
[sweep]
kind = "beta12"
beta1 = [1e-6, 1e-2]
beta2 = [1e-4]
[audit]
hidden = [8]
epochs = 2
[probe]
steps = 50
"#;

fn ciml(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ciml"))
        .arg("--output-root")
        .arg(root)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn setup() -> (tempfile::TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let path = config.to_str().unwrap().to_string();
    (dir, path)
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let (dir, config) = setup();
    let root = dir.path();
    ok(ciml(root, &["train", "-c", &config, "--out", "full"]));
    ok(ciml(root, &["train", "-c", &config, "--out", "split", "--epochs", "2"]));
    ok(ciml(root, &["train", "-c", &config, "--out", "split", "--resume"]));
    let read = |p: &str| fs::read(root.join(p)).unwrap();
    assert_eq!(read("full/history.jsonl"), read("split/history.jsonl"));
    assert_eq!(read("full/checkpoint.ckpt"), read("split/checkpoint.ckpt"));
    assert_eq!(read("full/metrics.json"), read("split/metrics.json"));
    assert_eq!(String::from_utf8(read("full/history.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn every_command_writes_its_outputs() {
    let (dir, config) = setup();
    let root = dir.path();
    ok(ciml(root, &["synth", "-c", &config, "--out", "synth", "--format", "binary"]));
    assert!(root.join("synth/dataset/manifest.toml").exists());
    assert!(root.join("synth/oracle.json").exists());

    ok(ciml(root, &["train", "-c", &config, "--out", "train"]));
    let ckpt = root.join("train/checkpoint.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    for (cmd, out, file) in [
        ("eval", "eval", "eval.json"),
        ("audit", "audit", "audit.json"),
        ("export-embeddings", "emb", "embeddings/manifest.toml"),
    ] {
        ok(ciml(root, &[cmd, "-c", &config, "--out", out, "--checkpoint", ckpt]));
        assert!(root.join(out).join(file).exists(), "{cmd}");
    }
    for (cmd, file) in [("ablate", "ablation.json"), ("sweep", "sweep.json")] {
        ok(ciml(root, &[cmd, "-c", &config, "--out", cmd, "--trials", "1"]));
        assert!(root.join(cmd).join(file).exists(), "{cmd}");
        assert!(root.join(cmd).join("config.toml").exists(), "{cmd}");
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let (dir, config) = setup();
    let root = dir.path();

    let bad = root.join("bad.toml");
    fs::write(&bad, SMALL.replace("m = 3", "m = 0")).unwrap();
    let out = ciml(root, &["train", "-c", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("synthetic.m"));

    let out = ciml(root, &["train", "-c", root.join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(5));

    let out = ciml(root, &["train", "-c", &config, "--format", "yaml"]);
    assert_eq!(out.status.code(), Some(2));
}
