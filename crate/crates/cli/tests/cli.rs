//! End-to-end tests of the `minicbir` binary: full artifact lifecycle,
//! config precedence, exit codes, and determinism of written artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_minicbir"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, expected: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(expected),
        "{context}: expected exit {expected}\nstdout:\n{}\nstderr:\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}

/// Small-and-fast run config shared by the lifecycle tests.
fn write_tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let config = serde_json::json!({
        "preset": "desk",
        "model": {
            "input_size": 16,
            "stem_channels": 4,
            "group_channels": [4, 8],
            "blocks_per_group": 1,
            "group_dilations": [1, 2],
            "group_strides": [1, 1],
            "embedding_dim": 8,
            "region_levels": 2
        },
        "train": {
            "epochs": 1,
            "batch_size": 4,
            "classes_per_batch": 2,
            "samples_per_class": 2,
            "seed": 1
        },
        "data": {
            "num_classes": 4,
            "images_per_class": 8,
            "image_size": 16,
            "translation_px": 2,
            "distractors": 2
        }
    });
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_lifecycle_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("model.ckpt");
    let ckpt2 = tmp.path().join("model2.ckpt");
    let index = tmp.path().join("gallery.idx");
    let index2 = tmp.path().join("gallery2.idx");
    let report = tmp.path().join("report");

    // gen-data
    let out = run(&[
        "gen-data",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&data),
        "--seed",
        "3",
    ]);
    assert_code(&out, 0, "gen-data");
    assert!(data.join("manifest.json").exists());
    assert!(stdout_of(&out).contains("effective config"));

    // train twice: same artifact bytes both times
    for target in [&ckpt, &ckpt2] {
        let out = run(&[
            "train",
            "--config",
            path_str(&cfg),
            "--data",
            path_str(&data),
            "--out",
            path_str(target),
        ]);
        assert_code(&out, 0, "train");
        let log = stdout_of(&out);
        assert!(log.contains("epoch   1"), "per-epoch stats missing:\n{log}");
    }
    let bytes1 = std::fs::read(&ckpt).unwrap();
    let bytes2 = std::fs::read(&ckpt2).unwrap();
    assert_eq!(
        bytes1, bytes2,
        "reruns must write byte-identical checkpoints"
    );

    // embed a dataset split to a JSON file
    let emb = tmp.path().join("query.embeddings.json");
    let out = run(&[
        "embed",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--split",
        "query",
        "--out",
        path_str(&emb),
    ]);
    assert_code(&out, 0, "embed");
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&emb).unwrap()).unwrap();
    let rows = parsed.as_array().expect("embed writes a JSON array");
    assert!(!rows.is_empty());
    assert!(rows[0]["values"].as_array().is_some());

    // index twice: byte-identical
    for target in [&index, &index2] {
        let out = run(&[
            "index",
            "--checkpoint",
            path_str(&ckpt),
            "--data",
            path_str(&data),
            "--out",
            path_str(target),
        ]);
        assert_code(&out, 0, "index");
    }
    assert_eq!(
        std::fs::read(&index).unwrap(),
        std::fs::read(&index2).unwrap(),
        "reruns must write byte-identical indexes"
    );

    // query with a gallery image and k=1 finds that image at distance 0
    let gallery_image = first_ppm(&data.join("gallery"));
    let id = gallery_image
        .file_stem()
        .unwrap()
        .to_string_lossy()
        .into_owned();
    let out = run(&[
        "query",
        "--checkpoint",
        path_str(&ckpt),
        "--index",
        path_str(&index),
        "--image",
        path_str(&gallery_image),
        "--k",
        "1",
    ]);
    assert_code(&out, 0, "query");
    let hits = stdout_of(&out);
    let first = hits.lines().next().expect("one hit line");
    assert!(first.contains(&id), "expected {id} first, got: {first}");
    assert!(
        first.contains("0.000000"),
        "expected distance 0, got: {first}"
    );

    // evaluate writes text + JSON with the config echoed inside
    let out = run(&[
        "evaluate",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--out",
        path_str(&report),
    ]);
    assert_code(&out, 0, "evaluate");
    let text = std::fs::read_to_string(report.with_extension("txt")).unwrap();
    assert!(text.contains("mP@5"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap())
            .unwrap();
    assert!(json["mp_at_5"].is_number());
    assert_eq!(json["config_echo"]["preset"], "desk");
    assert!(
        json["recall_at_4"].is_null(),
        "class datasets report no recall@4"
    );
}

fn first_ppm(root: &Path) -> PathBuf {
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "ppm") {
                return path;
            }
        }
    }
    panic!("no ppm under {}", root.display());
}

#[test]
fn groups_dataset_uses_recall_protocol() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let data = tmp.path().join("groups");
    let ckpt = tmp.path().join("model.ckpt");
    let report = tmp.path().join("groups_report");

    let out = run(&[
        "gen-data",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&data),
        "--groups",
        "5",
        "--seed",
        "9",
    ]);
    assert_code(&out, 0, "gen-data --groups");

    // train on a tiny class dataset first so a checkpoint exists
    let class_data = tmp.path().join("data");
    let out = run(&[
        "gen-data",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&class_data),
        "--seed",
        "3",
    ]);
    assert_code(&out, 0, "gen-data");
    let out = run(&[
        "train",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(&class_data),
        "--out",
        path_str(&ckpt),
    ]);
    assert_code(&out, 0, "train");

    let out = run(&[
        "evaluate",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--out",
        path_str(&report),
    ]);
    assert_code(&out, 0, "evaluate groups");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.with_extension("json")).unwrap())
            .unwrap();
    let recall = json["recall_at_4"]
        .as_f64()
        .expect("groups report recall@4");
    assert!((0.0..=4.0).contains(&recall));
    assert!(stdout_of(&out).contains("recall@4"));
}

#[test]
fn compare_miners_tabulates_all_four_strategies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let table = tmp.path().join("miners.txt");

    let out = run(&[
        "gen-data",
        "--config",
        path_str(&cfg),
        "--out",
        path_str(&data),
        "--seed",
        "3",
    ]);
    assert_code(&out, 0, "gen-data");

    let out = run(&[
        "compare-miners",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(&data),
        "--seeds",
        "1,2,3,4,5",
        "--out",
        path_str(&table),
    ]);
    assert_code(&out, 0, "compare-miners");
    let text = std::fs::read_to_string(&table).unwrap();
    for name in [
        "hardest_neg_all_pos",
        "hardest_neg_hardest_pos",
        "hardest_neg_easiest_pos",
        "easiest_neg_all_pos",
    ] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
    assert!(text.contains("median"));

    // fewer than 5 seeds is a usage error
    let out = run(&[
        "compare-miners",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(&data),
        "--seeds",
        "1,2",
    ]);
    assert_code(&out, 1, "compare-miners with 2 seeds");
}

#[test]
fn flags_override_json_which_overrides_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    std::fs::write(
        &cfg,
        serde_json::to_string(&serde_json::json!({
            "preset": "paper",
            "train": { "margin": 0.5 }
        }))
        .unwrap(),
    )
    .unwrap();

    // JSON overrides the preset's margin but keeps its other fields; the
    // command fails later (no dataset) — the echo still proves precedence.
    let out = run(&[
        "train",
        "--config",
        path_str(&cfg),
        "--margin",
        "0.25",
        "--epochs",
        "2",
    ]);
    assert_code(&out, 1, "train without data");
    let echo = stdout_of(&out);
    let json_start = echo.find('{').unwrap();
    let eff: serde_json::Value = serde_json::from_str(echo[json_start..].trim()).unwrap();
    assert_eq!(eff["preset"], "paper");
    assert_eq!(eff["train"]["margin"], 0.25, "flag beats JSON");
    assert_eq!(eff["train"]["epochs"], 2, "flag beats preset");
    assert_eq!(
        eff["train"]["learning_rate"], 1e-4,
        "untouched fields come from the preset"
    );
    assert_eq!(eff["train"]["batch_size"], 55);
}

#[test]
fn paper_preset_echoes_published_hyperparameters() {
    let out = run(&["train", "--preset", "paper"]);
    assert_code(&out, 1, "train --preset paper without data");
    let echo = stdout_of(&out);
    let json_start = echo.find('{').unwrap();
    let eff: serde_json::Value = serde_json::from_str(echo[json_start..].trim()).unwrap();
    assert_eq!(eff["train"]["margin"], 0.7);
    assert_eq!(eff["train"]["learning_rate"], 1e-4);
    assert_eq!(eff["train"]["momentum"], 0.9);
    assert_eq!(eff["train"]["weight_decay"], 5e-5);
    assert_eq!(eff["train"]["batch_size"], 55);
    assert_eq!(eff["train"]["epochs"], 20);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();

    // 0: help and version
    assert_code(&run(&["--help"]), 0, "--help");
    assert_code(&run(&["--version"]), 0, "--version");

    // 1: usage and config errors
    assert_code(&run(&["no-such-command"]), 1, "unknown subcommand");
    assert_code(&run(&["train", "--preset", "mystery"]), 1, "unknown preset");
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"surprise": true}"#).unwrap();
    assert_code(
        &run(&["train", "--config", path_str(&bad)]),
        1,
        "unknown top-level key",
    );
    std::fs::write(&bad, r#"{"train": {"learning_rale": 0.1}}"#).unwrap();
    assert_code(
        &run(&["train", "--config", path_str(&bad)]),
        1,
        "unknown train key",
    );
    std::fs::write(&bad, r#"{"train": {"learning_rate": -5.0}}"#).unwrap();
    assert_code(
        &run(&["train", "--config", path_str(&bad), "--data", "x"]),
        1,
        "invalid value",
    );
    std::fs::write(&bad, "not json").unwrap();
    assert_code(
        &run(&["train", "--config", path_str(&bad)]),
        1,
        "unparseable config",
    );

    // 2: data errors
    let missing = tmp.path().join("missing");
    assert_code(
        &run(&["train", "--data", path_str(&missing)]),
        2,
        "missing dataset directory",
    );
    assert_code(
        &run(&[
            "evaluate",
            "--checkpoint",
            path_str(&missing),
            "--data",
            path_str(&missing),
            "--out",
            "r",
        ]),
        2,
        "missing checkpoint",
    );
    // corrupt checkpoint file
    let corrupt = tmp.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"BOGUS not a checkpoint").unwrap();
    assert_code(
        &run(&[
            "embed",
            "--checkpoint",
            path_str(&corrupt),
            "--image",
            path_str(&corrupt),
        ]),
        2,
        "corrupt checkpoint",
    );
}

#[test]
fn gradcheck_command_passes_on_correct_build() {
    let out = run(&["gradcheck", "--seed", "11"]);
    assert_code(&out, 0, "gradcheck");
    let text = stdout_of(&out);
    assert!(
        text.contains("overall: ok"),
        "unexpected gradcheck output:\n{text}"
    );
}
