use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attend_cli::Cli;
use attend_service::{Hub, ServiceConfig};
use clap::CommandFactory;
use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn attend(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attend"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_str(&stdout(out)).unwrap()
}

#[test]
fn help_documents_every_flag() {
    let mut root = Cli::command();
    root.build();
    let mut checked = 0;
    for sub in root.get_subcommands() {
        let help = sub.clone().render_long_help().to_string();
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{id} lacks help text", sub.get_name());
            if let Some(long) = arg.get_long() {
                assert!(help.contains(&format!("--{long}")), "{} help omits --{long}", sub.get_name());
            }
            checked += 1;
        }
    }
    assert!(checked > 40);

    let dir = TempDir::new().unwrap();
    let top = stdout(&attend(dir.path(), &["--help"]));
    for sub in ["synth-data", "train", "evaluate", "detect", "predict", "fit-index", "serve", "report", "replay"] {
        assert!(top.contains(sub), "top-level help omits {sub}");
        let help = stdout(&attend(dir.path(), &[sub, "--help"]));
        assert!(help.contains("--json") && help.contains("--seed"), "{sub} help omits global flags");
        assert!(help.contains("[default: 42]"), "{sub} help omits the seed default");
    }
}

#[test]
fn synth_data_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let run = |seed: &str, out: &str| {
        json(&attend(
            dir.path(),
            &["--json", "--seed", seed, "synth-data", "--out", out, "--train", "60", "--val", "20", "--test", "20"],
        ))["digest"]
            .as_str()
            .unwrap()
            .to_owned()
    };
    let a = run("7", "a");
    let b = run("7", "b");
    let c = run("8", "c");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.len(), 64);
}

#[test]
fn predict_one_hot_engagement_prints_index() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("p.json"), "[[1,0,0,0],[0,0,0,1],[1,0,0,0],[1,0,0,0]]").unwrap();
    let text = stdout(&attend(dir.path(), &["predict", "--probs", "p.json"]));
    assert!(text.contains("4.617"), "{text}");

    std::fs::write(dir.path().join("q.json"), r#"{"probs": [[1,0,0,0],[0,0,0,1],[1,0,0,0],[1,0,0,0]]}"#).unwrap();
    let v = json(&attend(dir.path(), &["--json", "predict", "--probs", "q.json"]));
    assert!((v["index"].as_f64().unwrap() - 4.617).abs() < 1e-12);
    assert_eq!(v["levels"], serde_json::json!([0, 3, 0, 0]));
    assert_eq!(v["invalid"], false);
}

#[test]
fn exit_codes_distinguish_usage_data_and_success() {
    let dir = TempDir::new().unwrap();
    assert_eq!(attend(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(attend(dir.path(), &["predict"]).status.code(), Some(1));
    assert_eq!(attend(dir.path(), &["predict", "--probs", "missing.json"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.json"), "[[0.9,0,0,0],[1,0,0,0],[1,0,0,0],[1,0,0,0]]").unwrap();
    assert_eq!(attend(dir.path(), &["predict", "--probs", "bad.json"]).status.code(), Some(2));
    assert_eq!(attend(dir.path(), &["train", "--data", "nowhere"]).status.code(), Some(2));
    assert_eq!(attend(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn train_then_evaluate_writes_artifacts_and_table() {
    let dir = TempDir::new().unwrap();
    stdout(&attend(dir.path(), &["synth-data", "--out", "d", "--train", "64", "--val", "32", "--test", "32"]));
    let v = json(&attend(
        dir.path(),
        &["--json", "train", "--data", "d", "--out", "m.bin", "--epochs", "2", "--sequential"],
    ));
    assert_eq!(v["epochs_run"], 2);
    for f in ["m.bin", "m.bin.json", "m.bin.history.csv", "m.bin.card.json"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(dir.path().join("m.bin.history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let card: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.bin.card.json")).unwrap()).unwrap();
    assert_eq!(card["parameter_count"], 483_440);

    let table = stdout(&attend(dir.path(), &["evaluate", "--model", "m.bin", "--data", "d"]));
    for title in ["Boredom", "Engagement", "Confusion", "Frustration"] {
        assert!(table.contains(title), "{table}");
    }
    let e = json(&attend(dir.path(), &["--json", "evaluate", "--model", "m.bin", "--data", "d", "--split", "val"]));
    assert_eq!(e["samples"], 32);
    for acc in e["accuracy"].as_object().unwrap().values() {
        assert!((0.0..=1.0).contains(&acc.as_f64().unwrap()));
    }
}

#[test]
fn detect_lists_and_draws_faces() {
    let dir = TempDir::new().unwrap();
    let image = fixture("astronaut_256.pgm");
    let cascade = fixture("haarcascade_frontalface_default.xml");
    let v = json(&attend(
        dir.path(),
        &[
            "--json",
            "detect",
            "--image",
            image.to_str().unwrap(),
            "--cascade",
            cascade.to_str().unwrap(),
            "--draw",
            "boxes.pgm",
        ],
    ));
    let faces = v["faces"].as_array().unwrap();
    assert!(!faces.is_empty());
    let drawn = std::fs::read(dir.path().join("boxes.pgm")).unwrap();
    assert!(drawn.starts_with(b"P5"));
    assert_ne!(drawn, std::fs::read(&image).unwrap());
}

#[test]
fn fit_index_recovers_weights_from_annotations() {
    let dir = TempDir::new().unwrap();
    let w = [-0.598, 1.539, 0.334, -0.085];
    let mut csv = String::from("id,boredom,engagement,confusion,frustration,r1,r2\n");
    let mut x = [0.3f64, 1.1, 2.0, 0.7];
    let mut rows = 0;
    while rows < 40 {
        for (k, v) in x.iter_mut().enumerate() {
            *v = (*v * 1.7 + 0.37 * (k + 1) as f64) % 3.0;
        }
        let y: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        if !(1.1..=9.9).contains(&y) {
            continue;
        }
        let i = rows;
        rows += 1;
        csv.push_str(&format!("c{i},{},{},{},{},{},{}\n", x[0], x[1], x[2], x[3], y + 0.1, y - 0.1));
    }
    std::fs::write(dir.path().join("a.csv"), csv).unwrap();
    let v = json(&attend(dir.path(), &["--json", "fit-index", "--annotations", "a.csv", "--out", "w.json"]));
    let fitted: Vec<f64> = ["boredom", "engagement", "confusion", "frustration"]
        .iter()
        .map(|k| v["weights"][k].as_f64().unwrap())
        .collect();
    for (f, t) in fitted.iter().zip(w) {
        assert!((f - t).abs() < 1e-9, "{fitted:?}");
    }
    assert!(dir.path().join("w.json").is_file());
    std::fs::write(dir.path().join("p.json"), "[[1,0,0,0],[0,0,0,1],[1,0,0,0],[1,0,0,0]]").unwrap();
    let p = json(&attend(dir.path(), &["--json", "predict", "--probs", "p.json", "--weights", "w.json"]));
    assert!((p["index"].as_f64().unwrap() - 4.617).abs() < 1e-8);
}

fn live_session(data_dir: &Path) -> (String, String) {
    let cfg = ServiceConfig {
        data_dir: data_dir.to_owned(),
        min_frame_interval_ms: 0,
        ..ServiceConfig::default()
    };
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let hub = Hub::new(cfg, None).unwrap();
        let info = hub.create_session("Lecture", None).unwrap();
        let id = info.session_id.clone();
        let learners = ["ana", "ben", "caz"];
        for name in learners {
            hub.join(&id, name).await.unwrap();
        }
        let low = [[1.0, 0.0, 0.0, 0.0], [0.2, 0.4, 0.3, 0.1], [0.5, 0.5, 0.0, 0.0], [0.7, 0.1, 0.1, 0.1]];
        let high = [[0.7, 0.2, 0.1, 0.0], [0.0, 0.1, 0.2, 0.7], [0.6, 0.3, 0.1, 0.0], [0.9, 0.1, 0.0, 0.0]];
        for t in 0..120u64 {
            for (i, name) in learners.iter().enumerate() {
                let probs = if (40..80).contains(&t) && i < 2 { low } else { high };
                hub.ingest_probs(&id, name, 1_000 + t * 500 + i as u64, probs).await.unwrap();
            }
        }
        hub.set_threshold(&id, 0.45).await.unwrap();
        hub.close(&id).await.unwrap();
        (id.clone(), hub.session(&id).unwrap().report_path().display().to_string())
    })
}

#[test]
fn replay_matches_live_report_bytes() {
    let dir = TempDir::new().unwrap();
    let (id, report_path) = live_session(dir.path());
    let live = std::fs::read_to_string(&report_path).unwrap();
    let session_dir = dir.path().join("sessions").join(&id);

    let out = attend(dir.path(), &["replay", session_dir.to_str().unwrap()]);
    assert_eq!(stdout(&out).trim_end_matches('\n'), live);

    let log = session_dir.join("events.ndjson");
    stdout(&attend(dir.path(), &["replay", log.to_str().unwrap(), "--out", "again.json"]));
    assert_eq!(std::fs::read_to_string(dir.path().join("again.json")).unwrap(), live);

    let r = json(&attend(dir.path(), &["--json", "report", &report_path, session_dir.to_str().unwrap()]));
    assert_eq!(r["lectures"].as_array().unwrap().len(), 2);
    assert_eq!(r["lectures"][0]["session_id"], id.as_str());
    assert!(r["recommendations"].is_array());
    let text = stdout(&attend(dir.path(), &["report", &report_path]));
    assert!(text.contains(&id));
}

#[test]
fn replay_of_bare_log_uses_flag_metadata() {
    let dir = TempDir::new().unwrap();
    let (id, _) = live_session(dir.path());
    let log = dir.path().join("sessions").join(&id).join("events.ndjson");
    std::fs::copy(&log, dir.path().join("bare.ndjson")).unwrap();
    let a = stdout(&attend(dir.path(), &["replay", "bare.ndjson", "--title", "T", "--created-at-ms", "5"]));
    let b = stdout(&attend(dir.path(), &["replay", "bare.ndjson", "--title", "T", "--created-at-ms", "5"]));
    assert_eq!(a, b);
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["session"]["session_id"], id.as_str());
    assert_eq!(v["session"]["title"], "T");
    assert_eq!(attend(dir.path(), &["replay", "none.ndjson"]).status.code(), Some(2));
}
