//! End-to-end runs of the `ciml` binary: every subcommand, the exit-code
//! contract, and the single-line error prefix.

use std::path::Path;
use std::process::{Command, Output};

fn ciml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ciml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn oracle_verify_passes_and_prints_the_residual_table() {
    let out = ciml(&["oracle", "verify", "--nets", "20", "--seed", "1"]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(text.contains("20 random discrete models"));
    assert!(text.contains("max |I1 - (I2+I3+I4)|"));
    assert!(text.contains("identities hold"));
}

#[test]
fn usage_errors_exit_64_and_help_exits_0() {
    assert_eq!(ciml(&["--definitely-not-a-flag"]).status.code(), Some(64));
    assert_eq!(ciml(&["train"]).status.code(), Some(64)); // missing required flags
    assert_eq!(ciml(&["no-such-command"]).status.code(), Some(64));
    assert_eq!(ciml(&["--help"]).status.code(), Some(0));
    assert_eq!(ciml(&["--version"]).status.code(), Some(0));
}

#[test]
fn a_missing_config_is_a_validation_error_with_the_error_prefix() {
    let out = ciml(&[
        "train",
        "--config",
        "/definitely/missing.toml",
        "--data",
        "/tmp",
        "--out",
        "/tmp",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.starts_with("CIML-ERR: "), "got: {err}");
    assert_eq!(err.trim_end().lines().count(), 1, "one line only: {err}");
}

#[test]
fn a_missing_checkpoint_is_a_runtime_error() {
    let out = ciml(&["eval", "--checkpoint", "/definitely/missing.ckpt", "--data", "/tmp"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).starts_with("CIML-ERR: "));
}

fn write_config(path: &Path) {
    std::fs::write(
        path,
        r#"
[assignment]
modalities = ["m0", "m1"]

[assignment.targets]
m0 = ["outer", "inner"]
m1 = ["middle"]

[architecture]
patch_size = 16
base_channels = 1
spatial_dims = 3
norm = "instance"

[training]
max_epochs = 1
iterations_per_epoch = 1
batch_size = 1
seed = 3
"#,
    )
    .unwrap();
}

#[test]
fn synthetic_data_round_trips_through_training_eval_and_both_visualizers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.toml");
    write_config(&cfg);

    let out = ciml(&[
        "synth", "generate",
        "--out", data.to_str().unwrap(),
        "--cases", "2",
        "--size", "16",
        "--modalities", "2",
        "--contrast", "1,0,1",
        "--seed", "5",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(data.join("manifest.json").is_file());

    let out = ciml(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.is_file());
    assert!(run.join("train_log.jsonl").is_file());

    let out = ciml(&[
        "eval",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let summary: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    let mean = summary["mean_dice"].as_f64().unwrap();
    assert!(mean.is_finite() && (0.0..=1.0).contains(&mean));
    assert_eq!(summary["per_region"].as_array().unwrap().len(), 3);

    let cam = dir.path().join("cam");
    let out = ciml(&[
        "viz-cam",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", cam.to_str().unwrap(),
        "--case", "case0000",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(cam.join("weights.json").is_file());
    assert!(cam.join("case0000_outer_m0_from_m1.png").is_file());

    let wdir = dir.path().join("weights");
    let out = ciml(&[
        "viz-weights",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", wdir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(wdir.join("weights.png").is_file());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(wdir.join("weights.json")).unwrap())
            .unwrap();
    // Every row's shares sum to one over the lone sender.
    for row in sidecar["rows"].as_array().unwrap() {
        let total: f64 = row["weights"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-9, "row {row}");
    }
}

#[test]
fn eval_rejects_a_dataset_with_a_different_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let data2 = dir.path().join("two");
    let data3 = dir.path().join("three");
    let run = dir.path().join("run");
    let cfg = dir.path().join("cfg.toml");
    write_config(&cfg);
    for (path, m, contrast) in [(&data2, "2", "1,0,1"), (&data3, "3", "1,2,0")] {
        let out = ciml(&[
            "synth", "generate",
            "--out", path.to_str().unwrap(),
            "--cases", "1",
            "--size", "16",
            "--modalities", m,
            "--contrast", contrast,
            "--seed", "5",
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    }
    let out = ciml(&[
        "train",
        "--config", cfg.to_str().unwrap(),
        "--data", data2.to_str().unwrap(),
        "--out", run.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let ckpt = run.join("model.ckpt");
    let out = ciml(&[
        "eval",
        "--checkpoint", ckpt.to_str().unwrap(),
        "--data", data3.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("do not match dataset modalities"));
}

#[test]
fn the_demo_pipeline_writes_dataset_checkpoint_log_and_figures() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("demo");
    let out = ciml(&[
        "demo", "shapes",
        "--out", out_dir.to_str().unwrap(),
        "--n", "8",
        "--image-size", "32",
        "--epochs", "1",
        "--seed", "2",
        "--generate",
        "--train",
        "--evaluate",
        "--export-figures",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("union dice"));
    assert!(text.contains("localization"));
    assert!(out_dir.join("dataset/manifest.json").is_file());
    assert!(out_dir.join("model.ckpt").is_file());
    assert!(out_dir.join("train_log.jsonl").is_file());
    for panel in ["primary", "auxiliary", "truth", "prediction", "complementary"] {
        assert!(out_dir.join(format!("figures/pair00_{panel}.png")).is_file(), "{panel}");
    }
    // Asking for a stage without the artifacts it needs is the caller's
    // mistake: evaluate before any training happened.
    let fresh = dir.path().join("fresh");
    let out = ciml(&[
        "demo", "shapes",
        "--out", fresh.to_str().unwrap(),
        "--n", "4",
        "--evaluate",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).starts_with("CIML-ERR: "));
}
