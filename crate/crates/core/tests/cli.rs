use std::path::Path;
use std::process::{Command, Output};

fn promptner(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptner"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = promptner(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("configs/desk.toml")
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(
        promptner(&["train", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(promptner(&["frobnicate"]).status.code(), Some(2));
    let cfg = config();
    assert_eq!(
        promptner(&["train", "--config", &cfg, "--set", "train.bogus=1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        promptner(&["train", "--config", &cfg, "--set", "train.max_steps=0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        promptner(&["train", "--config", "/no/such/config.toml"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_checkpoint_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let episodes = tmp.path().join("e.jsonl");
    std::fs::write(&episodes, "").unwrap();
    let out_dir = format!(
        "output_dir={:?}",
        tmp.path().join("nothing").to_str().unwrap()
    );
    let out = promptner(&[
        "eval",
        "--config",
        &config(),
        "--set",
        &out_dir,
        "--episodes",
        episodes.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn selftest_passes() {
    let stdout = ok(&["selftest"]);
    assert!(stdout.lines().count() >= 8);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}

#[test]
fn full_pipeline_writes_its_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let cfg = config();
    let out_dir = format!("output_dir={:?}", p("run"));
    let common = [
        "--config",
        cfg.as_str(),
        "--set",
        out_dir.as_str(),
        "--set",
        "train.max_steps=30",
    ];

    ok(&[
        "synth",
        "--types",
        "food,planet",
        "--sentences",
        "16",
        "--seed",
        "2",
        "--out",
        &p("c.txt"),
    ]);
    let sampled: serde_json::Value = serde_json::from_str(
        ok(&[
            &["sample"],
            &common[..],
            &[
                "--corpus",
                &p("c.txt"),
                "--count",
                "2",
                "--out",
                &p("e.jsonl"),
            ],
        ]
        .concat())
        .trim(),
    )
    .unwrap();
    assert_eq!(sampled["episodes"], 2);
    assert_eq!(sampled["failed_validation"], 0);

    ok(&[&["train"], &common[..]].concat());
    assert!(dir.join("run/checkpoint").is_dir());
    assert!(dir.join("run/train_report.json").is_file());

    ok(&[
        &["eval"],
        &common[..],
        &["--episodes", &p("e.jsonl"), "--seeds", "1,2"],
    ]
    .concat());
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/results.json")).unwrap())
            .unwrap();
    assert_eq!(results["results"].as_array().unwrap().len(), 2);
    let summary = &results["summary"][0];
    assert!(summary["micro_f1_mean"].is_number() && summary["micro_f1_std"].is_number());
    for key in [
        "variant", "seed", "p", "r", "f1", "fp_span", "fp_type", "steps",
    ] {
        assert!(results["results"][0].get(key).is_some(), "missing {key}");
    }

    ok(&[
        &["analyze-errors"],
        &common[..],
        &[
            "--episodes",
            &p("e.jsonl"),
            "--predictions",
            &p("run/predictions.jsonl"),
        ],
    ]
    .concat());
    let errors: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run/errors.json")).unwrap())
            .unwrap();
    assert!(errors["errors"]["fp_span_ratio"].is_number());

    let table = ok(&[
        &["ablate"],
        &common[..],
        &[
            "--episodes",
            &p("e.jsonl"),
            "--grid",
            "rerank",
            "--seeds",
            "1",
        ],
    ]
    .concat());
    assert_eq!(table.lines().count(), 5, "{table}");
    assert!(dir.join("run/ablation.json").is_file() && dir.join("run/ablation.txt").is_file());
}
